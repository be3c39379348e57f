//! Monte-Carlo dropout on the last hidden layer.
//!
//! Activations up to the last hidden layer are computed once; only the final
//! layer's dropout is resampled. A single set of `M` masks is shared by every
//! point evaluated with the same sampler, so the resulting mean and variance
//! vary smoothly across stimuli.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::network::NetworkState;
use super::psych::PsychScaleConfig;
use crate::error::{NestError, Result};
use crate::util::rng_from;

const TAG_MC: u64 = 0x4d43_4452_4f50;

#[derive(Clone, Debug)]
pub struct McDropout {
    /// `M x width` multipliers: 0 for dropped units, `1/(1-p)` for kept ones.
    multipliers: Array2<f64>,
}

impl McDropout {
    pub fn new(width: usize, p: f64, samples: usize, seed: u64) -> Result<Self> {
        if samples < 2 {
            return Err(NestError::InvalidArgument(format!(
                "Monte-Carlo dropout needs at least 2 samples, got {samples}"
            )));
        }
        if !(0.0..1.0).contains(&p) {
            return Err(NestError::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
        }
        let mut rng = rng_from(seed, &[TAG_MC]);
        let keep = 1.0 / (1.0 - p);
        let multipliers = Array2::from_shape_fn((samples, width), |_| {
            if p > 0.0 && rng.random::<f64>() < p {
                0.0
            } else {
                keep
            }
        });
        Ok(Self { multipliers })
    }

    pub fn samples(&self) -> usize {
        self.multipliers.nrows()
    }

    /// Mean and population variance of the scaled output for each row of the
    /// normalized input batch `x`.
    pub fn stats(&self, net: &NetworkState, x: ArrayView2<f64>, scale: &PsychScaleConfig) -> Vec<(f64, f64)> {
        let hidden = net.last_hidden(x);
        self.stats_from_hidden(net, hidden.view(), scale)
    }

    /// Same as [`McDropout::stats`] but starting from precomputed last-hidden
    /// activations.
    pub fn stats_from_hidden(
        &self,
        net: &NetworkState,
        hidden: ArrayView2<f64>,
        scale: &PsychScaleConfig,
    ) -> Vec<(f64, f64)> {
        let out = net.layers().last().expect("output layer");
        assert_eq!(hidden.ncols(), self.multipliers.ncols(), "last hidden width");
        let weighted = &self.multipliers * &out.weight.row(0);
        let mut raw = hidden.dot(&weighted.t());
        raw += out.bias[0];
        let m = self.samples() as f64;
        raw.axis_iter(Axis(0))
            .map(|row| {
                let probs: Vec<f64> = row.iter().map(|&u| scale.output(u)).collect();
                // Shifting by the first sample keeps identical samples at exactly zero variance.
                let q0 = probs[0];
                let shift_mean = probs.iter().map(|q| q - q0).sum::<f64>() / m;
                let var = probs
                    .iter()
                    .map(|q| (q - q0 - shift_mean) * (q - q0 - shift_mean))
                    .sum::<f64>()
                    / m;
                (q0 + shift_mean, var)
            })
            .collect()
    }
}

/// Mean and population variance of `samples` dropout passes at one normalized
/// stimulus.
pub fn mc_dropout_stats(
    net: &NetworkState,
    x: &[f64],
    scale: &PsychScaleConfig,
    p: f64,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if x.len() != net.input_dim() {
        return Err(NestError::Shape {
            expected: net.input_dim(),
            got: x.len(),
        });
    }
    let width = *net.hidden_widths().last().ok_or_else(|| {
        NestError::InvalidDimension("network has no hidden layer for dropout".into())
    })?;
    let sampler = McDropout::new(width, p, samples, seed)?;
    let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    Ok(sampler.stats(net, view, scale)[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::network::{forward, init_network};

    #[test]
    fn zero_dropout_has_no_variance() {
        let net = init_network(2, 4).unwrap();
        let s = PsychScaleConfig::default();
        let x = [0.3, -0.4];
        let (mean, var) = mc_dropout_stats(&net, &x, &s, 0.0, 16, 1).unwrap();
        let (_, prob) = forward(&net, &x, &s, None).unwrap();
        assert_eq!(var, 0.0);
        assert!((mean - prob).abs() < 1e-15);
    }

    #[test]
    fn too_few_samples_rejected() {
        let net = init_network(2, 4).unwrap();
        assert!(matches!(
            mc_dropout_stats(&net, &[0.0, 0.0], &PsychScaleConfig::default(), 0.1, 1, 1),
            Err(NestError::InvalidArgument(_))
        ));
    }

    #[test]
    fn mean_stays_in_scaled_band() {
        let net = init_network(3, 8).unwrap();
        let s = PsychScaleConfig::with_asymptotes(0.5, 0.02);
        for i in 0..20 {
            let x = [i as f64 * 0.3 - 3.0, 1.0, -0.5 * i as f64];
            let (mean, var) = mc_dropout_stats(&net, &x, &s, 0.1, 50, i).unwrap();
            assert!((0.5..=0.98).contains(&mean));
            assert!(var >= 0.0);
        }
    }

    #[test]
    fn variance_estimates_agree_across_seeds() {
        let net = init_network(2, 21).unwrap();
        let s = PsychScaleConfig::default();
        let x = [0.8, -1.2];
        let (_, v1) = mc_dropout_stats(&net, &x, &s, 0.1, 10_000, 1).unwrap();
        let (_, v2) = mc_dropout_stats(&net, &x, &s, 0.1, 10_000, 2).unwrap();
        assert!(v1 > 0.0);
        assert!((v1 - v2).abs() / v1.max(v2) < 0.1, "{v1} vs {v2}");
    }
}
