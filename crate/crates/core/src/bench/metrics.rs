//! Error metrics for estimated psychometric functions and the rank
//! correlation used to validate the Fisher-energy stopping signal.

use crate::error::{NestError, Result};
use crate::util::normal_cdf;

/// Smallest standard deviation used when turning a Monte-Carlo estimate into
/// an exceedance probability.
pub const BRIER_STD_FLOOR: f64 = 1e-9;

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(NestError::Shape { expected: a, got: b });
    }
    if a == 0 {
        return Err(NestError::InvalidArgument("metric needs at least one point".into()));
    }
    Ok(())
}

/// Root mean squared difference between predicted and true probabilities.
pub fn rmse(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(truth.len(), predicted.len())?;
    let sq: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / truth.len() as f64).sqrt())
}

/// Default target level: midway between the lower asymptote and 1.
pub fn default_mu_star(alpha: f64) -> f64 {
    0.5 * (1.0 + alpha)
}

/// Probability that a Gaussian with the given mean and standard deviation
/// exceeds `mu_star`. The standard deviation is floored at [`BRIER_STD_FLOOR`].
pub fn exceed_probability(mean: f64, std: f64, mu_star: f64) -> f64 {
    let s = if std.is_nan() { BRIER_STD_FLOOR } else { std.max(BRIER_STD_FLOOR) };
    normal_cdf((mean - mu_star) / s)
}

/// Brier score of the event "the true probability reaches `mu_star`", with
/// the model's belief taken from Monte-Carlo (mean, std) pairs.
pub fn brier(estimates: &[(f64, f64)], truth: &[f64], mu_star: f64) -> Result<f64> {
    check_pair(truth.len(), estimates.len())?;
    let sum: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(&(m, s), &t)| {
            let o = if t >= mu_star { 1.0 } else { 0.0 };
            let p = exceed_probability(m, s, mu_star);
            (o - p) * (o - p)
        })
        .sum();
    Ok(sum / truth.len() as f64)
}

/// Brier score from outcome indicators and forecast probabilities directly.
pub fn brier_from_probabilities(forecast: &[f64], outcome: &[bool]) -> Result<f64> {
    check_pair(outcome.len(), forecast.len())?;
    let sum: f64 = forecast
        .iter()
        .zip(outcome)
        .map(|(&p, &o)| {
            let d = if o { 1.0 - p } else { p };
            d * d
        })
        .sum();
    Ok(sum / outcome.len() as f64)
}

/// Trapezoidal area under a per-trial series with unit spacing.
pub fn auc(series: &[f64]) -> f64 {
    series.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum()
}

/// Ranks starting at 1; tied values share the average of their positions.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs.len(), ys.len())?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(NestError::Domain("correlation of a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of mid-ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs.len(), ys.len())?;
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(NestError::Domain("rank correlation of NaN values".into()));
    }
    pearson(&mid_ranks(xs), &mid_ranks(ys))
}

/// Arithmetic mean and standard error (sample standard deviation over
/// sqrt(n)); the standard error of a single value is 0.
pub fn mean_and_stderr(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(NestError::InvalidArgument("no values to aggregate".into()));
    }
    let n = values.len() as f64;
    // Deviations are taken from the first value so identical inputs give
    // exactly that value and a zero standard error.
    let v0 = values[0];
    let shift = values.iter().map(|v| v - v0).sum::<f64>() / n;
    let mean = v0 + shift;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - v0 - shift).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        let t = [0.1, 0.5, 0.9];
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        let off: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        assert!((rmse(&off, &t).unwrap() - 0.1).abs() < 1e-12);
        assert!(rmse(&[0.1], &t).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier_from_probabilities(&[1.0, 0.0], &[true, false]).unwrap(), 0.0);
        assert_eq!(brier_from_probabilities(&[0.5; 4], &[true, false, true, true]).unwrap(), 0.25);
        assert!((brier_from_probabilities(&[0.8], &[true]).unwrap() - 0.04).abs() < 1e-15);
        // Certain, correct forecasts through the Gaussian path.
        let b = brier(&[(0.9, 0.0), (0.1, 0.0)], &[0.95, 0.05], 0.5).unwrap();
        assert!(b < 1e-300);
    }

    #[test]
    fn exceed_probability_examples() {
        assert_eq!(exceed_probability(0.5, 0.2, 0.5), 0.5);
        assert!((exceed_probability(0.6, 0.0, 0.5) - 1.0).abs() < 1e-15);
        assert!(exceed_probability(0.4, 0.0, 0.5) < 1e-15);
        let p = exceed_probability(0.5 + 0.07, 0.07, 0.5);
        assert!((p - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn auc_examples() {
        assert!((auc(&[0.15; 150]) - 22.35).abs() < 1e-12);
        assert_eq!(auc(&[3.0]), 0.0);
        assert_eq!(auc(&[]), 0.0);
        let lin: Vec<f64> = (0..11).map(|i| 1.0 - i as f64 / 10.0).collect();
        assert!((auc(&lin) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [10.0, 20.0, 25.0, 100.0, 1000.0];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = b.iter().rev().copied().collect();
        assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(mid_ranks(&[2.0, 1.0, 2.0, 3.0]), vec![2.5, 1.0, 2.5, 4.0]);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn stderr_examples() {
        assert_eq!(mean_and_stderr(&[4.0]).unwrap(), (4.0, 0.0));
        assert_eq!(mean_and_stderr(&[2.0, 2.0, 2.0]).unwrap(), (2.0, 0.0));
        let (m, se) = mean_and_stderr(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-15);
    }
}
