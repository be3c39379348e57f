use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};

/// Output squashing and asymptote scaling applied after the last layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsychScaleConfig {
    /// Lower asymptote: success probability of a guess.
    pub alpha: f64,
    /// Lapse rate; the upper asymptote is `1 - gamma_lapse`.
    pub gamma_lapse: f64,
    /// Weibull slope.
    pub rho: f64,
    /// Weibull threshold.
    pub t_thresh: f64,
}

impl Default for PsychScaleConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            gamma_lapse: 0.0,
            rho: 1.0,
            t_thresh: 0.0,
        }
    }
}

impl PsychScaleConfig {
    pub fn with_asymptotes(alpha: f64, gamma_lapse: f64) -> Self {
        Self {
            alpha,
            gamma_lapse,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(NestError::config("scale.alpha", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.gamma_lapse) {
            return Err(NestError::config("scale.gamma_lapse", "must lie in [0, 1)"));
        }
        if self.alpha + self.gamma_lapse >= 1.0 {
            return Err(NestError::config(
                "scale",
                "alpha + gamma_lapse must be below 1",
            ));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(NestError::config("scale.rho", "must be positive"));
        }
        if !self.t_thresh.is_finite() {
            return Err(NestError::config("scale.t_thresh", "must be finite"));
        }
        Ok(())
    }

    #[inline]
    fn exponent(&self, u: f64) -> f64 {
        10f64.powf(self.rho * (u - self.t_thresh) / 20.0)
    }

    /// Weibull CDF of the raw network output.
    #[inline]
    pub fn squash(&self, u: f64) -> f64 {
        -(-self.exponent(u)).exp_m1()
    }

    #[inline]
    pub fn squash_derivative(&self, u: f64) -> f64 {
        let z = self.exponent(u);
        if !z.is_finite() || z > 800.0 {
            return 0.0;
        }
        (-z).exp() * z * self.rho * std::f64::consts::LN_10 / 20.0
    }

    #[inline]
    pub fn span(&self) -> f64 {
        1.0 - self.alpha - self.gamma_lapse
    }

    /// Scaled probability of a raw output, in `[alpha, 1 - gamma_lapse]`.
    #[inline]
    pub fn output(&self, u: f64) -> f64 {
        self.alpha + self.span() * self.squash(u)
    }

    #[inline]
    pub fn output_derivative(&self, u: f64) -> f64 {
        self.span() * self.squash_derivative(u)
    }
}

/// `1 - exp(-10^(u/20))`, the output nonlinearity with unit slope and zero threshold.
pub fn weibull_squash(u: f64) -> f64 {
    PsychScaleConfig::default().squash(u)
}

/// Maps a unit-interval probability into `[alpha, 1 - gamma_lapse]`.
pub fn scale_probability(p: f64, cfg: &PsychScaleConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(NestError::Domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(cfg.alpha + cfg.span() * p)
}
