use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Inclusive per-dimension stimulus range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub low: f64,
    pub high: f64,
}

impl Bound {
    pub fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    pub fn span(&self) -> f64 {
        self.high - self.low
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.low && v <= self.high
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.low, self.high)
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        self.low + u * self.span()
    }

    pub fn to_unit(&self, v: f64) -> f64 {
        (v - self.low) / self.span()
    }
}

/// Checks that every dimension has a finite, non-degenerate range.
pub fn validate_bounds(bounds: &[Bound]) -> Result<()> {
    if bounds.is_empty() {
        return Err(NestError::InvalidBounds("no dimensions".into()));
    }
    for (i, b) in bounds.iter().enumerate() {
        if !(b.low.is_finite() && b.high.is_finite()) || b.high <= b.low {
            return Err(NestError::InvalidBounds(format!(
                "dimension {i}: [{}, {}]",
                b.low, b.high
            )));
        }
    }
    Ok(())
}

pub fn check_in_bounds(x: &[f64], bounds: &[Bound]) -> Result<()> {
    if x.len() != bounds.len() {
        return Err(NestError::Shape {
            expected: bounds.len(),
            got: x.len(),
        });
    }
    for (i, (v, b)) in x.iter().zip(bounds).enumerate() {
        if !b.contains(*v) {
            return Err(NestError::OutOfBounds(format!(
                "dimension {i}: {v} not in [{}, {}]",
                b.low, b.high
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub stimulus: Vec<f64>,
    #[serde(with = "bit")]
    pub response: bool,
}

/// Serializes a binary response as 0/1.
pub mod bit {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(D::Error::custom(format!("response must be 0 or 1, got {other}"))),
        }
    }
}

/// Stimulus/response history in native units plus the normalization in use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    pub records: Vec<TrialRecord>,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub bounds: Vec<Bound>,
}

impl TrialDataset {
    /// Empty dataset; normalization starts as the affine map of the bounds'
    /// midpoint and half-span.
    pub fn new(bounds: Vec<Bound>) -> Result<Self> {
        validate_bounds(&bounds)?;
        let norm_mean = bounds.iter().map(|b| 0.5 * (b.low + b.high)).collect();
        let norm_std = bounds.iter().map(|b| 0.5 * b.span()).collect();
        Ok(Self {
            records: Vec::new(),
            norm_mean,
            norm_std,
            bounds,
        })
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, stimulus: Vec<f64>, response: bool) -> Result<()> {
        check_in_bounds(&stimulus, &self.bounds)?;
        self.records.push(TrialRecord { stimulus, response });
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.norm_mean.iter().zip(&self.norm_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Normalized stimuli of the given native points, one per row.
    pub fn normalize_rows<'a>(&self, points: impl IntoIterator<Item = &'a [f64]>) -> Array2<f64> {
        let k = self.dim();
        let mut flat = Vec::new();
        let mut n = 0;
        for p in points {
            flat.extend(self.normalize(p));
            n += 1;
        }
        Array2::from_shape_vec((n, k), flat).expect("rows of width dim")
    }

    pub fn normalized_stimuli(&self) -> Array2<f64> {
        self.normalize_rows(self.records.iter().map(|r| r.stimulus.as_slice()))
    }

    pub fn labels(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| if r.response { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.records.iter().filter(|r| r.response).count();
        (pos, self.records.len() - pos)
    }
}

/// Per-dimension mean and (population) standard deviation of the recorded
/// stimuli while `trial_index <= freeze_at`; afterwards the dataset's stored
/// statistics are returned unchanged. The standard deviation is floored at 1e-8.
pub fn fit_normalization(
    dataset: &TrialDataset,
    trial_index: usize,
    freeze_at: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(NestError::EmptyDataset);
    }
    if trial_index > freeze_at {
        return Ok((dataset.norm_mean.clone(), dataset.norm_std.clone()));
    }
    let k = dataset.dim();
    let n = dataset.len() as f64;
    let mut mean = vec![0.0; k];
    for r in &dataset.records {
        for (m, v) in mean.iter_mut().zip(&r.stimulus) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; k];
    for r in &dataset.records {
        for ((s, v), m) in var.iter_mut().zip(&r.stimulus).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    Ok((mean, std))
}
