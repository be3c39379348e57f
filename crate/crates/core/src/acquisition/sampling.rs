//! Space-filling helpers: blue-noise subsampling and discrete-grid snapping.

use rand::Rng;

use crate::error::{NestError, Result};
use crate::net::data::{validate_bounds, Bound};
use crate::util::{rng_from, squared_distance};

const TAG_BLUE: u64 = 0x424c_5545;
/// Consecutive rejected darts before the radius is shrunk.
const MAX_FAILURES: usize = 64;
const SHRINK: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct BlueNoise {
    /// Points in native units.
    pub points: Vec<Vec<f64>>,
    /// The same points in unit-cube coordinates.
    pub unit_points: Vec<Vec<f64>>,
    /// Final minimum-distance radius, in unit-cube coordinates.
    pub radius: f64,
}

/// Dart-throwing Poisson-disk sample of `n` points. The rejection radius starts
/// at `n^(-1/dim)` and shrinks geometrically whenever darts keep failing, so
/// every pairwise unit-cube distance is at least the returned radius.
pub fn blue_noise_subsample(bounds: &[Bound], n: usize, dim: usize, seed: u64) -> Result<BlueNoise> {
    if bounds.len() != dim {
        return Err(NestError::Shape {
            expected: dim,
            got: bounds.len(),
        });
    }
    validate_bounds(bounds)?;
    if n == 0 {
        return Err(NestError::InvalidArgument("blue-noise sample size must be positive".into()));
    }
    let mut rng = rng_from(seed, &[TAG_BLUE]);
    let mut radius = (1.0 / n as f64).powf(1.0 / dim as f64);
    let mut unit_points: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut failures = 0;
    while unit_points.len() < n {
        let cand: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let r2 = radius * radius;
        if unit_points.iter().all(|p| squared_distance(p, &cand) >= r2) {
            unit_points.push(cand);
            failures = 0;
        } else {
            failures += 1;
            if failures >= MAX_FAILURES {
                radius *= SHRINK;
                failures = 0;
            }
        }
    }
    let points = unit_points
        .iter()
        .map(|u| u.iter().zip(bounds).map(|(&v, b)| b.from_unit(v)).collect())
        .collect();
    Ok(BlueNoise {
        points,
        unit_points,
        radius,
    })
}

/// Per-dimension nearest level of the endpoint-inclusive uniform grid with
/// `n_sample` levels; exact midpoints go to the lower level.
pub fn snap_to_grid(x: &[f64], n_sample: usize, bounds: &[Bound]) -> Result<Vec<f64>> {
    if n_sample < 2 {
        return Err(NestError::InvalidArgument(format!(
            "grid needs at least 2 levels, got {n_sample}"
        )));
    }
    if x.len() != bounds.len() {
        return Err(NestError::Shape {
            expected: bounds.len(),
            got: x.len(),
        });
    }
    validate_bounds(bounds)?;
    let steps = (n_sample - 1) as f64;
    Ok(x.iter()
        .zip(bounds)
        .map(|(&v, b)| {
            let t = ((v - b.low) / b.span() * steps).clamp(0.0, steps);
            let lower = t.floor();
            let level = if t - lower > 0.5 { lower + 1.0 } else { lower };
            grid_value(level, steps, b)
        })
        .collect())
}

fn grid_value(level: f64, steps: f64, b: &Bound) -> f64 {
    if level >= steps {
        b.high
    } else {
        b.low + b.span() * (level / steps)
    }
}

/// Whether `x` lies exactly on the `n_sample`-level grid.
pub fn on_grid(x: &[f64], n_sample: usize, bounds: &[Bound]) -> bool {
    snap_to_grid(x, n_sample, bounds).is_ok_and(|s| s == x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapping_examples() {
        let b = [Bound::new(0.0, 1.0)];
        assert!((snap_to_grid(&[0.3], 4, &b).unwrap()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((snap_to_grid(&[0.51], 4, &b).unwrap()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(snap_to_grid(&[0.5], 3, &b).unwrap(), vec![0.5]);
        assert_eq!(snap_to_grid(&[1.0], 4, &b).unwrap(), vec![1.0]);
        assert!(snap_to_grid(&[0.5], 1, &b).is_err());
    }

    #[test]
    fn exact_midpoint_goes_low() {
        let b = [Bound::new(0.0, 1.0)];
        assert_eq!(snap_to_grid(&[0.25], 3, &b).unwrap(), vec![0.0]);
    }

    #[test]
    fn blue_noise_respects_radius() {
        let b = vec![Bound::new(-1.0, 1.0); 2];
        let s = blue_noise_subsample(&b, 64, 2, 3).unwrap();
        assert_eq!(s.points.len(), 64);
        for i in 0..64 {
            assert!(s.points[i].iter().all(|v| (-1.0..=1.0).contains(v)));
            for j in 0..i {
                assert!(squared_distance(&s.unit_points[i], &s.unit_points[j]).sqrt() >= s.radius);
            }
        }
        let one = blue_noise_subsample(&b, 1, 2, 3).unwrap();
        assert_eq!(one.points.len(), 1);
        assert_eq!(blue_noise_subsample(&b, 8, 2, 9).unwrap(), blue_noise_subsample(&b, 8, 2, 9).unwrap());
    }
}
