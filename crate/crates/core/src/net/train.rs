//! Per-trial training: shrink-and-perturb warm start followed by full-batch
//! Adam epochs on the clamped binary cross-entropy, with per-record dropout
//! and input noise. The squared norm of each epoch's loss gradient is
//! accumulated into the trial's Fisher energy.

use ndarray::{Array1, Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::data::{TrialDataset, TrialRecord};
use super::network::{sum_param_grads, NetworkState};
use super::psych::PsychScaleConfig;
use crate::error::{NestError, Result};
use crate::util::rng_from;

const TAG_SHRINK: u64 = 0x5348_5249_4e4b;
const TAG_RECORD: u64 = 0x5245_434f_5244;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub eta0: f64,
    pub epochs_per_trial: usize,
    /// Learning rate at the end of a trial relative to `eta0`.
    pub final_lr_fraction: f64,
    pub shrink_lambda: f64,
    pub perturb_sigma: f64,
    pub dropout_p: f64,
    pub input_noise_sigma: f64,
    pub log_clamp: f64,
    pub normalization_freeze_trial: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta0: 1.0e-2,
            epochs_per_trial: 100,
            final_lr_fraction: 0.01,
            shrink_lambda: 0.9,
            perturb_sigma: 0.01,
            dropout_p: 0.1,
            input_noise_sigma: 0.01,
            log_clamp: 100.0,
            normalization_freeze_trial: 25,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(NestError::config("train.eta0", "must be positive"));
        }
        if self.epochs_per_trial == 0 {
            return Err(NestError::config("train.epochs_per_trial", "must be at least 1"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(NestError::config("train.final_lr_fraction", "must lie in (0, 1]"));
        }
        if !(self.shrink_lambda > 0.0 && self.shrink_lambda <= 1.0) {
            return Err(NestError::config("train.shrink_lambda", "must lie in (0, 1]"));
        }
        if !(self.perturb_sigma >= 0.0 && self.perturb_sigma.is_finite()) {
            return Err(NestError::config("train.perturb_sigma", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(NestError::config("train.dropout_p", "must lie in [0, 1)"));
        }
        if !(self.input_noise_sigma >= 0.0 && self.input_noise_sigma.is_finite()) {
            return Err(NestError::config("train.input_noise_sigma", "must be nonnegative"));
        }
        if !(self.log_clamp > 0.0) {
            return Err(NestError::config("train.log_clamp", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(NestError::config("train.adam_beta", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(NestError::config("train.adam_eps", "must be positive"));
        }
        Ok(())
    }

    /// Per-epoch learning-rate multiplier `g` with `g^epochs = final_lr_fraction`.
    pub fn decay_rate(&self) -> f64 {
        self.final_lr_fraction.powf(1.0 / self.epochs_per_trial as f64)
    }

    /// Learning rate of (zero-based) epoch `k`.
    pub fn learning_rate(&self, k: usize) -> f64 {
        self.eta0 * self.decay_rate().powi(k as i32)
    }
}

/// Mean binary cross-entropy with every log term clamped to `[-clamp, clamp]`.
pub fn bce_loss(preds: &[f64], labels: &[f64], clamp: f64) -> Result<f64> {
    if preds.is_empty() {
        return Err(NestError::EmptyDataset);
    }
    if preds.len() != labels.len() {
        return Err(NestError::Shape {
            expected: preds.len(),
            got: labels.len(),
        });
    }
    let sum: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&q, &y)| bce_term(q, y, clamp))
        .sum();
    Ok(sum / preds.len() as f64)
}

#[inline]
fn clamped_ln(v: f64, clamp: f64) -> f64 {
    v.ln().clamp(-clamp, clamp)
}

#[inline]
fn bce_term(q: f64, y: f64, clamp: f64) -> f64 {
    let mut t = 0.0;
    if y != 0.0 {
        t -= y * clamped_ln(q, clamp);
    }
    if y != 1.0 {
        t -= (1.0 - y) * clamped_ln(1.0 - q, clamp);
    }
    t
}

/// Derivative of one clamped BCE term with respect to the prediction.
/// Zero where a log term sits on its clamp.
#[inline]
pub fn bce_term_derivative(q: f64, y: f64, clamp: f64) -> f64 {
    let mut d = 0.0;
    if y != 0.0 && q.ln() > -clamp {
        d -= y / q;
    }
    if y != 1.0 && (1.0 - q).ln() > -clamp {
        d += (1.0 - y) / (1.0 - q);
    }
    d
}

/// Trial Fisher energy from per-epoch squared loss-gradient norms:
/// `sum_k (eta(k) / (N * K * eta0)) * |grad L|^2`, with `eta(k)` the learning
/// rate used in epoch `k`.
pub fn fisher_energy(epoch_grad_sq: &[f64], n_records: usize, cfg: &TrainConfig) -> Result<f64> {
    if n_records == 0 {
        return Err(NestError::EmptyDataset);
    }
    let k = epoch_grad_sq.len();
    if k == 0 {
        return Ok(0.0);
    }
    let g = cfg.decay_rate();
    let denom = (n_records * k) as f64;
    Ok(epoch_grad_sq
        .iter()
        .enumerate()
        .map(|(e, gsq)| g.powi(e as i32) * gsq / denom)
        .sum())
}

/// Dropout multipliers and input noise for one record in one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordNoise {
    pub masks: Vec<Vec<f64>>,
    pub input_noise: Vec<f64>,
}

/// Randomness for one record is keyed by the trial seed, the epoch and the
/// record's content, so reordering the dataset reorders the draws with it.
pub fn record_noise(
    seed: u64,
    epoch: usize,
    record: &TrialRecord,
    hidden_widths: &[usize],
    cfg: &TrainConfig,
) -> RecordNoise {
    let mut tags = Vec::with_capacity(record.stimulus.len() + 3);
    tags.push(TAG_RECORD);
    tags.push(epoch as u64);
    tags.extend(record.stimulus.iter().map(|v| v.to_bits()));
    tags.push(u64::from(record.response));
    let mut rng = rng_from(seed, &tags);
    let p = cfg.dropout_p;
    let keep_scale = 1.0 / (1.0 - p);
    let masks = hidden_widths
        .iter()
        .map(|&w| {
            if p == 0.0 {
                vec![1.0; w]
            } else {
                (0..w)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
                    .collect()
            }
        })
        .collect();
    let input_noise = record
        .stimulus
        .iter()
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            cfg.input_noise_sigma * z
        })
        .collect();
    RecordNoise { masks, input_noise }
}

/// `W <- lambda W + N(0, sigma^2)` on every weight matrix. Biases are untouched.
pub fn shrink_perturb(net: &mut NetworkState, lambda: f64, sigma: f64, seed: u64) {
    let mut rng = rng_from(seed, &[TAG_SHRINK]);
    for layer in net.layers_mut() {
        layer.weight.mapv_inplace(|w| {
            let noise = if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigma * z
            } else {
                0.0
            };
            lambda * w + noise
        });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub fisher_energy: f64,
    pub epoch_grad_sq: Vec<f64>,
    /// Training loss (with that epoch's noise) evaluated before each update.
    pub epoch_loss: Vec<f64>,
}

struct Adam {
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    t: i32,
}

impl Adam {
    fn new(net: &NetworkState) -> Self {
        let zeros: Vec<_> = net
            .layers()
            .iter()
            .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.len())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, net: &mut NetworkState, grads: &[(Array2<f64>, Array1<f64>)], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: &f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, (mw, mb)), (vw, vb)), (gw, gb)) in net
            .layers_mut()
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .zip(grads)
        {
            Zip::from(&mut layer.weight)
                .and(mw)
                .and(vw)
                .and(gw)
                .for_each(|p, m, v, g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(mb)
                .and(vb)
                .and(gb)
                .for_each(|p, m, v, g| update(p, m, v, g));
        }
    }
}

/// Retrains `net` on the whole dataset for one trial. Deterministic in `seed`.
pub fn train_trial(
    net: &mut NetworkState,
    data: &TrialDataset,
    cfg: &TrainConfig,
    scale: &PsychScaleConfig,
    seed: u64,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(NestError::EmptyDataset);
    }
    cfg.validate()?;
    if data.dim() != net.input_dim() {
        return Err(NestError::Shape {
            expected: net.input_dim(),
            got: data.dim(),
        });
    }
    shrink_perturb(net, cfg.shrink_lambda, cfg.perturb_sigma, seed);

    let n = data.len();
    let k = data.dim();
    let x_clean = data.normalized_stimuli();
    let labels = data.labels();
    let widths = net.hidden_widths();
    let mut adam = Adam::new(net);
    let mut epoch_grad_sq = Vec::with_capacity(cfg.epochs_per_trial);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs_per_trial);

    for epoch in 0..cfg.epochs_per_trial {
        let mut x = x_clean.clone();
        let mut masks: Vec<Array2<f64>> = widths.iter().map(|&w| Array2::zeros((n, w))).collect();
        for (i, rec) in data.records.iter().enumerate() {
            let noise = record_noise(seed, epoch, rec, &widths, cfg);
            for j in 0..k {
                x[[i, j]] += noise.input_noise[j];
            }
            for (m, layer_mask) in masks.iter_mut().zip(&noise.masks) {
                m.row_mut(i)
                    .iter_mut()
                    .zip(layer_mask)
                    .for_each(|(dst, &src)| *dst = src);
            }
        }
        let pass = net.forward_batch(x.view(), Some(&masks));
        let mut loss = 0.0;
        let d_raw: Array1<f64> = pass
            .raw
            .iter()
            .zip(&labels)
            .map(|(&u, &y)| {
                let q = scale.output(u);
                loss += bce_term(q, y, cfg.log_clamp);
                bce_term_derivative(q, y, cfg.log_clamp) * scale.output_derivative(u) / n as f64
            })
            .collect();
        epoch_loss.push(loss / n as f64);
        let deltas = pass.backward(net, d_raw.view());
        let grads = sum_param_grads(&pass, &deltas);
        let gsq: f64 = grads
            .iter()
            .map(|(w, b)| w.iter().map(|v| v * v).sum::<f64>() + b.iter().map(|v| v * v).sum::<f64>())
            .sum();
        epoch_grad_sq.push(gsq);
        adam.step(net, &grads, cfg.learning_rate(epoch), cfg);
    }

    let fisher = fisher_energy(&epoch_grad_sq, n, cfg)?;
    Ok(TrainReport {
        fisher_energy: fisher,
        epoch_grad_sq,
        epoch_loss,
    })
}

/// Deterministic (noise-free, dropout-free) loss of the current network.
pub fn clean_loss(net: &NetworkState, data: &TrialDataset, scale: &PsychScaleConfig, clamp: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(NestError::EmptyDataset);
    }
    let pass = net.forward_batch(data.normalized_stimuli().view(), None);
    let preds: Vec<f64> = pass.raw.iter().map(|&u| scale.output(u)).collect();
    bce_loss(&preds, &data.labels(), clamp)
}
