//! Simulated observers and the fixed test sets they are scored on.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::Sobol;
use crate::error::{NestError, Result};
use crate::net::data::{validate_bounds, Bound};
use crate::psychfun::{Family, Mode, SyntheticFunction};
use crate::util::rng_from;

const TAG_FUNCTION: u64 = 0x4655_4e43;
const TAG_TEST_SET: u64 = 0x5445_5354;

/// Which observer a benchmark simulates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FunctionSpec {
    /// A named family with its canonical parameters, or parameters drawn
    /// per run when `randomize` is set.
    Named {
        family: Family,
        mode: Mode,
        #[serde(default)]
        randomize: bool,
    },
    /// Fully specified parameters.
    Custom { function: SyntheticFunction },
    /// Responds positively with probability 0.5 everywhere in [-1, 1]^dims.
    Random { dims: usize },
}

impl FunctionSpec {
    pub fn named(family: Family, mode: Mode) -> Self {
        FunctionSpec::Named {
            family,
            mode,
            randomize: false,
        }
    }

    /// Parses a CLI function name; `random` selects the 2D random observer.
    pub fn parse(name: &str, mode: Mode) -> Result<Self> {
        if name.eq_ignore_ascii_case("random") {
            return Ok(FunctionSpec::Random { dims: 2 });
        }
        Ok(Self::named(Family::from_str(name)?, mode))
    }

    pub fn name(&self) -> String {
        match self {
            FunctionSpec::Named { family, .. } => family.name(),
            FunctionSpec::Custom { .. } => "custom".into(),
            FunctionSpec::Random { dims } => format!("random{dims}d"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FunctionSpec::Named { family, .. } => {
                if family.dim() == 0 {
                    return Err(NestError::config("function", "dimension must be positive"));
                }
                Ok(())
            }
            FunctionSpec::Custom { function } => function.validate(),
            FunctionSpec::Random { dims } => {
                if *dims == 0 {
                    return Err(NestError::config("function.dims", "must be positive"));
                }
                Ok(())
            }
        }
    }

    /// The observer for one run. Randomized families draw their parameters
    /// from a stream derived from `run_seed`.
    pub fn resolve(&self, run_seed: u64) -> Result<Observer> {
        self.validate()?;
        Ok(match self {
            FunctionSpec::Named {
                family,
                mode,
                randomize,
            } => {
                let f = if *randomize {
                    family.randomize(&mut rng_from(run_seed, &[TAG_FUNCTION]), *mode)
                } else {
                    family.canonical(*mode)
                };
                Observer::Function(f)
            }
            FunctionSpec::Custom { function } => Observer::Function(function.clone()),
            FunctionSpec::Random { dims } => Observer::Constant {
                probability: 0.5,
                bounds: vec![Bound::new(-1.0, 1.0); *dims],
            },
        })
    }
}

/// Ground truth that a simulated participant answers from.
#[derive(Clone, Debug, PartialEq)]
pub enum Observer {
    Function(SyntheticFunction),
    Constant { probability: f64, bounds: Vec<Bound> },
}

impl Observer {
    pub fn bounds(&self) -> &[Bound] {
        match self {
            Observer::Function(f) => &f.bounds,
            Observer::Constant { bounds, .. } => bounds,
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds().len()
    }

    /// Lower asymptote of the observer's responses.
    pub fn alpha(&self) -> f64 {
        match self {
            Observer::Function(f) => f.alpha,
            Observer::Constant { .. } => 0.0,
        }
    }

    pub fn gamma_lapse(&self) -> f64 {
        match self {
            Observer::Function(f) => f.gamma_lapse,
            Observer::Constant { .. } => 0.0,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            Observer::Function(f) => f.eval_truth(x),
            Observer::Constant { probability, bounds } => {
                crate::net::data::check_in_bounds(x, bounds)?;
                Ok(*probability)
            }
        }
    }

    pub fn respond<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<bool> {
        let p = self.eval(x)?;
        Ok(rng.random::<f64>() < p)
    }
}

/// Points per axis of the default full grid, by dimension.
fn default_grid_levels(dim: usize) -> Option<usize> {
    match dim {
        1 | 2 => Some(64),
        3 => Some(16),
        _ => None,
    }
}

/// Default number of Sobol test points in four or more dimensions.
pub const DEFAULT_TEST_POINTS: usize = 4096;

/// Evaluation points over `bounds`. Without an explicit size this is a full
/// uniform grid with 64 points per axis in one or two dimensions, 16 per axis
/// in three, and 4096 digitally shifted Sobol points otherwise. An explicit
/// size always selects shifted Sobol points. The shift is derived from `seed`.
pub fn make_test_set(bounds: &[Bound], size: Option<usize>, seed: u64) -> Result<Vec<Vec<f64>>> {
    validate_bounds(bounds)?;
    let dim = bounds.len();
    if let (None, Some(levels)) = (size, default_grid_levels(dim)) {
        return Ok(full_grid(bounds, levels));
    }
    let n = size.unwrap_or(DEFAULT_TEST_POINTS);
    if n == 0 {
        return Err(NestError::config("test_set_size", "must be positive"));
    }
    let sobol = Sobol::new(dim)?;
    let mut rng = rng_from(seed, &[TAG_TEST_SET]);
    let shift: Vec<u32> = (0..dim).map(|_| rng.random::<u32>()).collect();
    Ok((0..n as u64)
        .map(|i| {
            sobol
                .shifted_unit_point(i, &shift)
                .iter()
                .zip(bounds)
                .map(|(&u, b)| b.from_unit(u))
                .collect()
        })
        .collect())
}

/// All points of a `levels`-per-axis grid including both bounds, with the
/// last dimension varying fastest.
pub fn full_grid(bounds: &[Bound], levels: usize) -> Vec<Vec<f64>> {
    let dim = bounds.len();
    let total = levels.pow(dim as u32);
    let step = |b: &Bound, i: usize| {
        if i + 1 == levels {
            b.high
        } else {
            b.low + b.span() * i as f64 / (levels - 1) as f64
        }
    };
    (0..total)
        .map(|mut flat| {
            let mut x = vec![0.0; dim];
            for d in (0..dim).rev() {
                x[d] = step(&bounds[d], flat % levels);
                flat /= levels;
            }
            x
        })
        .collect()
}
