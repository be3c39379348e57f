//! Synthetic ground-truth psychometric functions and a simulated observer.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::net::data::{validate_bounds, Bound};
use crate::util::normal_cdf;

/// Hartmann6 mixture weights.
pub const HART6_ALPHA: [f64; 4] = [2.0, 2.2, 2.8, 3.0];
/// Hartmann6 exponent scales.
pub const HART6_A: [[f64; 6]; 4] = [
    [8.0, 3.0, 10.0, 3.5, 1.7, 6.0],
    [0.5, 8.0, 10.0, 1.0, 6.0, 9.0],
    [3.0, 3.5, 1.7, 8.0, 10.0, 6.0],
    [10.0, 6.0, 0.5, 8.0, 1.0, 9.0],
];
/// Hartmann6 centres, in units of 1e-4.
pub const HART6_P: [[f64; 6]; 4] = [
    [1312.0, 1696.0, 5569.0, 124.0, 8283.0, 5886.0],
    [2329.0, 4135.0, 8307.0, 3736.0, 1004.0, 9991.0],
    [2348.0, 1451.0, 3522.0, 2883.0, 3047.0, 6650.0],
    [4047.0, 8828.0, 8732.0, 5743.0, 1091.0, 381.0],
];

/// Smallest magnitude allowed for the PS8D denominator.
pub const PS8D_DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionKind {
    Weibull { beta: Vec<f64>, threshold: Vec<f64> },
    Sin2d { amplitude: f64, frequency: f64, beta: f64 },
    Max2d { c0: f64, c_f: f64, t: f64, beta: f64 },
    Donut2d { beta: f64, r1: f64, r2: f64 },
    Novel2d,
    Hartmann6,
    Ps8d,
    Sphere { beta: f64, radius: f64 },
}

/// A ground-truth psychometric function with its asymptotes and domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFunction {
    #[serde(flatten)]
    pub kind: FunctionKind,
    pub alpha: f64,
    pub gamma_lapse: f64,
    pub bounds: Vec<Bound>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Detection,
    Discrimination,
}

impl Mode {
    pub fn alpha(self) -> f64 {
        match self {
            Mode::Detection => 0.0,
            Mode::Discrimination => 0.5,
        }
    }
}

impl FromStr for Mode {
    type Err = NestError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "detection" => Ok(Mode::Detection),
            "discrimination" => Ok(Mode::Discrimination),
            other => Err(NestError::config("mode", format!("unknown mode '{other}'"))),
        }
    }
}

/// Named function families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Family {
    Weibull(usize),
    Sin2d,
    Max2d,
    Dn2d,
    Nv2d,
    Hart6,
    Ps8d,
    Sphere(usize),
}

impl Family {
    pub fn dim(self) -> usize {
        match self {
            Family::Weibull(k) | Family::Sphere(k) => k,
            Family::Sin2d | Family::Max2d | Family::Dn2d | Family::Nv2d => 2,
            Family::Hart6 => 6,
            Family::Ps8d => 8,
        }
    }

    /// Native stimulus domain.
    pub fn bounds(self) -> Vec<Bound> {
        let wide = Bound::new(-30.0, 30.0);
        match self {
            Family::Weibull(k) | Family::Sphere(k) => vec![wide; k],
            Family::Sin2d => vec![Bound::new(0.0, 1.0), wide],
            Family::Max2d => vec![Bound::new(-1.0, 1.0), wide],
            Family::Dn2d => vec![wide; 2],
            Family::Nv2d => vec![Bound::new(-1.0, 1.0); 2],
            Family::Hart6 => vec![Bound::new(0.0, 1.0); 6],
            Family::Ps8d => vec![Bound::new(-1.0, 1.0); 8],
        }
    }

    /// Fixed reference parameters.
    pub fn canonical(self, mode: Mode) -> SyntheticFunction {
        let bounds = self.bounds();
        let kind = match self {
            Family::Weibull(k) => FunctionKind::Weibull {
                beta: vec![2.0; k],
                threshold: vec![0.0; k],
            },
            Family::Sin2d => FunctionKind::Sin2d {
                amplitude: 10.0,
                frequency: 1.0,
                beta: 2.0,
            },
            Family::Max2d => FunctionKind::Max2d {
                c0: 0.0,
                c_f: 20.0,
                t: -10.0,
                beta: 2.0,
            },
            Family::Dn2d => FunctionKind::Donut2d {
                beta: 4.0,
                r1: 8.0,
                r2: 20.0,
            },
            Family::Nv2d => FunctionKind::Novel2d,
            Family::Hart6 => FunctionKind::Hartmann6,
            Family::Ps8d => FunctionKind::Ps8d,
            Family::Sphere(_) => FunctionKind::Sphere {
                beta: 4.0,
                radius: 0.25 * bounds[0].span(),
            },
        };
        SyntheticFunction {
            kind,
            alpha: mode.alpha(),
            gamma_lapse: 0.0,
            bounds,
        }
    }

    /// Parameters drawn uniformly from the documented ranges:
    /// Weibull thresholds in the central 60% of each bound and slopes in
    /// [0.5, 4]; Sin2D amplitude in [0.1, 0.4] of the x1 span and frequency in
    /// [0.5, 2]; Max2D floor and intercept in half the x1 half-span, slope in
    /// the x1 half-span per x0 half-span (either sign); Donut inner radius in
    /// [0.15, 0.3] of the span and ring width in [0.15, 0.3] of the span.
    pub fn randomize<R: Rng + ?Sized>(self, rng: &mut R, mode: Mode) -> SyntheticFunction {
        let mut f = self.canonical(mode);
        let slope = |rng: &mut R| rng.random_range(0.5..=4.0);
        f.kind = match self {
            Family::Weibull(k) => {
                let threshold = f
                    .bounds
                    .iter()
                    .map(|b| rng.random_range((b.low + 0.2 * b.span())..=(b.high - 0.2 * b.span())))
                    .collect();
                FunctionKind::Weibull {
                    beta: (0..k).map(|_| slope(rng)).collect(),
                    threshold,
                }
            }
            Family::Sin2d => FunctionKind::Sin2d {
                amplitude: rng.random_range(0.1..=0.4) * f.bounds[1].span(),
                frequency: rng.random_range(0.5..=2.0),
                beta: slope(rng),
            },
            Family::Max2d => {
                let h1 = 0.5 * f.bounds[1].span();
                let h0 = 0.5 * f.bounds[0].span();
                FunctionKind::Max2d {
                    c0: rng.random_range(-0.5..=0.5) * h1,
                    c_f: rng.random_range(-1.0..=1.0) * h1 / h0,
                    t: rng.random_range(-0.5..=0.5) * h1,
                    beta: slope(rng),
                }
            }
            Family::Dn2d => {
                let span = f.bounds[0].span();
                let r1 = rng.random_range(0.15..=0.3) * span;
                FunctionKind::Donut2d {
                    beta: slope(rng),
                    r1,
                    r2: r1 + rng.random_range(0.15..=0.3) * span,
                }
            }
            Family::Sphere(_) => FunctionKind::Sphere {
                beta: slope(rng),
                radius: 0.25 * f.bounds[0].span(),
            },
            Family::Nv2d | Family::Hart6 | Family::Ps8d => f.kind.clone(),
        };
        f
    }

    pub fn name(self) -> String {
        match self {
            Family::Weibull(k) => format!("wei{k}d"),
            Family::Sin2d => "sin2d".into(),
            Family::Max2d => "max2d".into(),
            Family::Dn2d => "dn2d".into(),
            Family::Nv2d => "nv2d".into(),
            Family::Hart6 => "hart6".into(),
            Family::Ps8d => "ps8d".into(),
            Family::Sphere(2) => "sphere".into(),
            Family::Sphere(k) => format!("sphere{k}d"),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Family {
    type Err = NestError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let dim_of = |rest: &str| -> Option<usize> { rest.strip_suffix('d')?.parse().ok().filter(|&k| k >= 1) };
        let fam = match s.as_str() {
            "sin2d" => Family::Sin2d,
            "max2d" => Family::Max2d,
            "dn2d" => Family::Dn2d,
            "nv2d" => Family::Nv2d,
            "hart6" => Family::Hart6,
            "ps8d" => Family::Ps8d,
            "sphere" => Family::Sphere(2),
            _ => {
                if let Some(k) = s.strip_prefix("wei").and_then(dim_of) {
                    Family::Weibull(k)
                } else if let Some(k) = s.strip_prefix("sphere").and_then(dim_of) {
                    Family::Sphere(k)
                } else {
                    return Err(NestError::config("function", format!("unknown function '{s}'")));
                }
            }
        };
        Ok(fam)
    }
}

impl TryFrom<String> for Family {
    type Error = NestError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Family> for String {
    fn from(f: Family) -> Self {
        f.name()
    }
}

/// `exp(-10^(beta * d / 20))`, the decreasing Weibull factor.
fn weibull_factor(beta: f64, d: f64) -> f64 {
    (-(10f64).powf(beta * d / 20.0)).exp()
}

/// Raw Hartmann6 value `h(x) = 1 - sum_i alpha_i exp(-sum_j A_ij (x_j - P_ij)^2)`.
pub fn hartmann6_h(x: &[f64; 6]) -> f64 {
    let mut s = 0.0;
    for i in 0..4 {
        let e: f64 = (0..6)
            .map(|j| {
                let d = x[j] - HART6_P[i][j] * 1e-4;
                HART6_A[i][j] * d * d
            })
            .sum();
        s += HART6_ALPHA[i] * (-e).exp();
    }
    1.0 - s
}

/// PS8D boundary `c(x)` (coordinates indexed from 1 in the usual statement,
/// from 0 here).
pub fn ps8d_c(x: &[f64]) -> f64 {
    let inner = 0.6 * PI * x[1] * x[7] + x[6];
    let inner_sin = 0.3 * PI * x[1] * x[7] + x[6];
    (x[2] / 2.0 * (1.0 - inner.cos()) + x[3]) * (2.0 - x[5] * (1.0 + inner_sin.sin())) - 1.0
}

/// Novel2D threshold term.
pub fn novel2d_t(x0: f64, x1: f64, alpha: f64) -> f64 {
    let denom = 0.1 + 0.8 * (0.2 * x0 - 1.0).powi(2) * x0 * x0;
    4.0 * (1.0 - alpha) * (1.0 + x1) / denom - 4.0 * (1.0 - 2.0 * alpha)
}

impl SyntheticFunction {
    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn validate(&self) -> Result<()> {
        validate_bounds(&self.bounds)?;
        if !(0.0..1.0).contains(&self.alpha) || !(0.0..1.0).contains(&self.gamma_lapse) {
            return Err(NestError::config("function.alpha", "asymptotes must lie in [0, 1)"));
        }
        if self.alpha + self.gamma_lapse >= 1.0 {
            return Err(NestError::config("function.alpha", "alpha + gamma_lapse must be below 1"));
        }
        let k = self.dim();
        let need = |want: usize| -> Result<()> {
            if k != want {
                return Err(NestError::config(
                    "function.bounds",
                    format!("expected {want} dimensions, got {k}"),
                ));
            }
            Ok(())
        };
        match &self.kind {
            FunctionKind::Weibull { beta, threshold } => {
                if beta.len() != k || threshold.len() != k {
                    return Err(NestError::config("function.beta", "one slope and threshold per dimension"));
                }
            }
            FunctionKind::Sin2d { .. } | FunctionKind::Max2d { .. } | FunctionKind::Novel2d => need(2)?,
            FunctionKind::Donut2d { r1, r2, .. } => {
                need(2)?;
                if !(r1 < r2) {
                    return Err(NestError::config("function.r1", "inner radius must be below outer radius"));
                }
            }
            FunctionKind::Hartmann6 => need(6)?,
            FunctionKind::Ps8d => need(8)?,
            FunctionKind::Sphere { radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(NestError::config("function.radius", "must be positive"));
                }
            }
        }
        Ok(())
    }

    fn centre(&self) -> Vec<f64> {
        self.bounds.iter().map(|b| 0.5 * (b.low + b.high)).collect()
    }

    /// Probability of a positive response at `x`.
    pub fn eval_truth(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(NestError::Shape {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if x.iter().zip(&self.bounds).any(|(&v, b)| !b.contains(v)) {
            return Err(NestError::Domain(format!("stimulus {x:?} outside the function domain")));
        }
        let (a, g) = (self.alpha, self.gamma_lapse);
        let span = 1.0 - a - g;
        let p = match &self.kind {
            FunctionKind::Weibull { beta, threshold } => {
                let sum: f64 = x
                    .iter()
                    .zip(beta.iter().zip(threshold))
                    .map(|(&xi, (&b, &t))| (10f64).powf(b * (xi - t) / 20.0))
                    .sum();
                (-sum).exp()
            }
            FunctionKind::Sin2d {
                amplitude,
                frequency,
                beta,
            } => weibull_factor(*beta, x[1] - amplitude * (2.0 * PI * frequency * x[0]).sin()),
            FunctionKind::Max2d { c0, c_f, t, beta } => weibull_factor(*beta, x[1] - t.max(c0 + c_f * x[0])),
            FunctionKind::Donut2d { beta, r1, r2 } => {
                let c = self.centre();
                let r = crate::util::squared_distance(x, &c).sqrt();
                weibull_factor(*beta, (r - r2).max(r1 - r))
            }
            FunctionKind::Novel2d => normal_cdf(novel2d_t(x[0], x[1], a)),
            FunctionKind::Hartmann6 => {
                let xs: [f64; 6] = x.try_into().expect("dimension checked");
                normal_cdf(3.0 * hartmann6_h(&xs) - 2.0)
            }
            FunctionKind::Ps8d => {
                let c = ps8d_c(x);
                let mut denom = x[4] * (2.0 + c);
                if denom.abs() < PS8D_DENOM_FLOOR {
                    denom = if denom < 0.0 { -PS8D_DENOM_FLOOR } else { PS8D_DENOM_FLOOR };
                }
                normal_cdf((x[0] - c) / denom)
            }
            FunctionKind::Sphere { beta, radius } => {
                let r = crate::util::squared_distance(x, &self.centre()).sqrt();
                weibull_factor(*beta, r - radius)
            }
        };
        Ok((a + span * p).clamp(a, 1.0 - g))
    }

    /// Bernoulli response with success probability `eval_truth(x)`.
    pub fn sample_response<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<bool> {
        let p = self.eval_truth(x)?;
        Ok(rng.random::<f64>() < p)
    }
}
