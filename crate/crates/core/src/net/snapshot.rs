//! Portable network snapshot: layer sizes, the flat layer-major parameter
//! vector (row-major weights then bias per layer), the output scaling, the
//! stimulus bounds and the normalization statistics needed to evaluate
//! native-unit stimuli.

use serde::{Deserialize, Serialize};

use super::data::{Bound, TrialDataset};
use super::network::{forward, NetworkState};
use super::psych::PsychScaleConfig;
use crate::error::{NestError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSnapshot {
    pub layer_sizes: Vec<usize>,
    pub params: Vec<f64>,
    pub rng_seed: u64,
    pub scale: PsychScaleConfig,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub bounds: Vec<Bound>,
}

impl NetworkSnapshot {
    pub fn capture(net: &NetworkState, scale: &PsychScaleConfig, dataset: &TrialDataset) -> Self {
        Self {
            layer_sizes: net.layer_sizes(),
            params: net.to_flat(),
            rng_seed: net.rng_seed,
            scale: scale.clone(),
            norm_mean: dataset.norm_mean.clone(),
            norm_std: dataset.norm_std.clone(),
            bounds: dataset.bounds.clone(),
        }
    }

    pub fn restore(&self) -> Result<NetworkState> {
        self.validate()?;
        NetworkState::from_flat(&self.layer_sizes, &self.params, self.rng_seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        let k = self.layer_sizes.first().copied().unwrap_or(0);
        if self.norm_mean.len() != k || self.norm_std.len() != k || self.bounds.len() != k {
            return Err(NestError::Shape {
                expected: k,
                got: self.norm_mean.len().min(self.norm_std.len()),
            });
        }
        if self.norm_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(NestError::Domain("normalization std must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.layer_sizes.first().copied().unwrap_or(0)
    }

    /// Scaled probability at a native-unit stimulus.
    pub fn predict(&self, net: &NetworkState, x: &[f64]) -> Result<f64> {
        let z = self.normalize(x)?;
        Ok(forward(net, &z, &self.scale, None)?.1)
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(NestError::Shape {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(self.norm_mean.iter().zip(&self.norm_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}
