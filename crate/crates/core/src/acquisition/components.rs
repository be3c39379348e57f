//! Acquisition components, their normalization and their weighted geometric
//! combination, plus the exploration schedule.

use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::util::squared_distance;

/// Normalizers below this are treated as degenerate; the component is then 1.
pub const DEGENERATE_NORMALIZER: f64 = 1e-12;

/// Exponents of the gradient, proximity, uncertainty and lookahead components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionWeights {
    pub grad: f64,
    pub prox: f64,
    pub unc: f64,
    pub la: f64,
}

impl Default for AcquisitionWeights {
    fn default() -> Self {
        Self {
            grad: 0.8,
            prox: 10.6,
            unc: 6.0,
            la: 4.0,
        }
    }
}

impl AcquisitionWeights {
    pub fn new(grad: f64, prox: f64, unc: f64, la: f64) -> Self {
        Self { grad, prox, unc, la }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.grad, self.prox, self.unc, self.la]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(NestError::config("acq.weights", "weights must be finite and nonnegative"));
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return Err(NestError::config("acq.weights", "at least one weight must be positive"));
        }
        Ok(())
    }

    /// Weights with disabled components set to zero.
    pub fn masked(&self, set: &ComponentSet) -> Self {
        let keep = |on: bool, v: f64| if on { v } else { 0.0 };
        Self {
            grad: keep(set.grad, self.grad),
            prox: keep(set.prox, self.prox),
            unc: keep(set.unc, self.unc),
            la: keep(set.la, self.la),
        }
    }
}

/// Which acquisition components are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSet {
    pub grad: bool,
    pub prox: bool,
    pub unc: bool,
    pub la: bool,
}

impl Default for ComponentSet {
    fn default() -> Self {
        Self::all()
    }
}

impl ComponentSet {
    pub const NAMES: [&'static str; 4] = ["grad", "prox", "unc", "la"];

    pub fn all() -> Self {
        Self {
            grad: true,
            prox: true,
            unc: true,
            la: true,
        }
    }

    pub fn none() -> Self {
        Self {
            grad: false,
            prox: false,
            unc: false,
            la: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.grad || self.prox || self.unc || self.la)
    }

    /// Parses a comma-separated list such as `grad,prox`. An empty string is
    /// the empty set.
    pub fn parse(list: &str) -> Result<Self> {
        let mut set = Self::none();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "grad" => set.grad = true,
                "prox" => set.prox = true,
                "unc" => set.unc = true,
                "la" => set.la = true,
                other => {
                    return Err(NestError::config(
                        "ablation",
                        format!("unknown component '{other}' (expected grad, prox, unc, la)"),
                    ))
                }
            }
        }
        Ok(set)
    }

    pub fn to_list(&self) -> String {
        let flags = [self.grad, self.prox, self.unc, self.la];
        Self::NAMES
            .iter()
            .zip(flags)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// `p(t) = max(p_base, p0 * f^(t-1))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSchedule {
    pub p0: f64,
    pub f: f64,
    pub p_base: f64,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        Self {
            p0: 0.5,
            f: 0.97,
            p_base: 0.05,
        }
    }
}

pub fn exploration_probability(t: usize, schedule: &ExplorationSchedule) -> Result<f64> {
    if t < 1 {
        return Err(NestError::InvalidArgument("trial index starts at 1".into()));
    }
    Ok(schedule.p_base.max(schedule.p0 * schedule.f.powi((t - 1) as i32)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub weights: AcquisitionWeights,
    pub parzen_h: f64,
    pub mc_samples: usize,
    pub lookahead_subsample: usize,
    pub ntk_jitter: f64,
    pub candidate_count: usize,
    pub restarts: usize,
    pub exploration: ExplorationSchedule,
    /// Maximum quasi-Newton iterations per restart.
    pub refine_iterations: usize,
    /// Forward-difference step (unit-cube coordinates) for refinement gradients.
    pub fd_step: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            weights: AcquisitionWeights::default(),
            parzen_h: 0.25,
            mc_samples: 100,
            lookahead_subsample: 128,
            ntk_jitter: 1e-6,
            candidate_count: 512,
            restarts: 16,
            exploration: ExplorationSchedule::default(),
            refine_iterations: 20,
            fd_step: 1e-6,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.parzen_h > 0.0 && self.parzen_h.is_finite()) {
            return Err(NestError::config("acq.parzen_h", "must be positive"));
        }
        if self.mc_samples < 2 {
            return Err(NestError::config("acq.mc_samples", "must be at least 2"));
        }
        if self.lookahead_subsample < 1 {
            return Err(NestError::config("acq.lookahead_subsample", "must be at least 1"));
        }
        if !(self.ntk_jitter > 0.0 && self.ntk_jitter.is_finite()) {
            return Err(NestError::config("acq.ntk_jitter", "must be positive"));
        }
        if self.restarts < 1 || self.candidate_count < self.restarts {
            return Err(NestError::config(
                "acq.candidate_count",
                "need candidate_count >= restarts >= 1",
            ));
        }
        let e = &self.exploration;
        if !(0.0..=1.0).contains(&e.p0) || !(0.0..=1.0).contains(&e.p_base) || !(e.f > 0.0 && e.f <= 1.0) {
            return Err(NestError::config(
                "acq.exploration",
                "p0 and p_base must be probabilities and f must lie in (0, 1]",
            ));
        }
        if !(self.fd_step > 0.0 && self.fd_step < 0.5) {
            return Err(NestError::config("acq.fd_step", "must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Gaussian Parzen-window density of the history `xs` at `x` (normalized
/// coordinates): `1/(N h^K (2 pi)^(K/2)) sum exp(-|x - x_i|^2 / (2 h^2))`.
pub fn prox_density<'a>(x: &[f64], xs: impl IntoIterator<Item = &'a [f64]>, h: f64) -> Result<f64> {
    let k = x.len() as f64;
    let mut n = 0usize;
    let mut sum = 0.0;
    for xi in xs {
        sum += (-squared_distance(x, xi) / (2.0 * h * h)).exp();
        n += 1;
    }
    if n == 0 {
        return Err(NestError::EmptyHistory);
    }
    let norm = n as f64 * h.powf(k) * (2.0 * std::f64::consts::PI).powf(k / 2.0);
    Ok(sum / norm)
}

/// `raw / normalizer` clamped to `[0, 1]`, or 1 when the normalizer is degenerate.
pub fn normalize_component(raw: f64, normalizer: f64) -> f64 {
    if !(normalizer >= DEGENERATE_NORMALIZER) {
        return 1.0;
    }
    (raw / normalizer).clamp(0.0, 1.0)
}

/// `1 - density / normalizer`, clamped to `[0, 1]`.
pub fn prox_component(density: f64, normalizer: f64) -> f64 {
    if !(normalizer >= DEGENERATE_NORMALIZER) {
        return 1.0;
    }
    (1.0 - density / normalizer).clamp(0.0, 1.0)
}

/// Gradient component from the input-gradient norm.
pub fn grad_component(grad_norm: f64, normalizer: f64) -> f64 {
    normalize_component(grad_norm, normalizer)
}

/// Uncertainty component from the Monte-Carlo dropout standard deviation.
pub fn unc_component(std: f64, normalizer: f64) -> f64 {
    normalize_component(std, normalizer)
}

/// Lookahead component from the lookahead statistic `f_la`.
pub fn lookahead_component(f_la: f64, normalizer: f64) -> f64 {
    normalize_component(f_la, normalizer)
}

/// Weighted geometric mean `(prod c_i^w_i)^(1 / sum w_i)` with `0^0 = 1`.
pub fn combine(components: [f64; 4], weights: &AcquisitionWeights) -> f64 {
    let w = weights.as_array();
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (&c, &wi) in components.iter().zip(&w) {
        if wi == 0.0 {
            continue;
        }
        if c <= 0.0 {
            return 0.0;
        }
        log_sum += wi * c.ln();
    }
    (log_sum / total).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_peak_value() {
        let d = prox_density(&[0.1, 0.2], [[0.1, 0.2].as_slice()], 0.25).unwrap();
        assert!((d - 1.0 / (0.0625 * 2.0 * std::f64::consts::PI)).abs() < 1e-12);
        assert!((d - 2.546_479_1).abs() < 1e-6);
        let far = prox_density(&[2.5, 0.0], [[0.0, 0.0].as_slice()], 0.25).unwrap();
        assert!(far < 1e-20 * d);
        let none: [&[f64]; 0] = [];
        assert!(matches!(prox_density(&[0.0], none, 0.25), Err(NestError::EmptyHistory)));
    }

    #[test]
    fn component_normalization() {
        assert_eq!(prox_component(2.0, 2.0), 0.0);
        assert_eq!(prox_component(0.0, 2.0), 1.0);
        assert_eq!(prox_component(1.0, 2.0), 0.5);
        assert_eq!(grad_component(3.0, 3.0), 1.0);
        assert_eq!(grad_component(0.0, 0.0), 1.0);
        assert!((unc_component(0.3, 1.0) - 0.3).abs() < 1e-15);
        assert_eq!(lookahead_component(5.0, 1e-13), 1.0);
    }

    #[test]
    fn combine_examples() {
        let w = AcquisitionWeights::default();
        assert_eq!(combine([1.0; 4], &w), 1.0);
        assert_eq!(combine([1.0, 0.0, 1.0, 1.0], &w), 0.0);
        assert!((combine([0.25; 4], &w) - 0.25).abs() < 1e-15);
        let w0 = AcquisitionWeights::new(1.0, 0.0, 0.0, 0.0);
        assert!((combine([0.4, 0.0, 0.0, 0.0], &w0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn exploration_examples() {
        let s = ExplorationSchedule::default();
        assert_eq!(exploration_probability(1, &s).unwrap(), 0.5);
        assert!((exploration_probability(2, &s).unwrap() - 0.485).abs() < 1e-15);
        assert_eq!(exploration_probability(77, &s).unwrap(), 0.05);
        assert!(exploration_probability(0, &s).is_err());
    }

    #[test]
    fn component_set_parsing() {
        assert_eq!(ComponentSet::parse("grad,prox,unc,la").unwrap(), ComponentSet::all());
        assert!(ComponentSet::parse("").unwrap().is_empty());
        assert!(ComponentSet::parse("grad,bogus").is_err());
        let s = ComponentSet::parse("unc, la").unwrap();
        assert_eq!(s.to_list(), "unc,la");
        let w = AcquisitionWeights::default().masked(&s);
        assert_eq!(w.as_array(), [0.0, 0.0, 6.0, 4.0]);
    }
}
