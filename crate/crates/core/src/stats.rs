//! Numerical primitives shared by detection, pruning and ranking.
//!
//! Everything here is a pure function over slices. Flat inputs are handled
//! by convention instead of erroring: a zero-variance vector has Pearson
//! correlation 0 with anything, and a zero-spread 3-sigma reference flags
//! every probe value that differs from its mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A gap-free run of per-minute values starting at `start_minute`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub start_minute: i64,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(start_minute: i64, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("series must hold at least one value"));
        }
        Ok(Self { start_minute, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// One past the last covered minute.
    pub fn end_minute(&self) -> i64 {
        self.start_minute + self.values.len() as i64
    }

    /// Values for minutes `[start, end)`, or `None` if that range is not covered.
    pub fn slice_minutes(&self, start: i64, end: i64) -> Option<&[f64]> {
        if start < self.start_minute || end > self.end_minute() || start > end {
            return None;
        }
        let lo = (start - self.start_minute) as usize;
        let hi = (end - self.start_minute) as usize;
        Some(&self.values[lo..hi])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mu = mean(values);
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}

pub fn max(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn is_flat(values: &[f64]) -> bool {
    values.iter().all(|v| *v == values[0])
}

/// Pearson correlation coefficient of two equal-length vectors.
///
/// Returns 0 when either vector has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "pearson: length mismatch ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson: need at least two points"));
    }
    if is_flat(x) || is_flat(y) {
        return Ok(0.0);
    }
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    let r = sxy / (sxx * syy).sqrt();
    Ok(r.clamp(-1.0, 1.0))
}

/// Entries of `probe` lying more than three population standard deviations
/// from the mean of `reference`, as `(index into probe, value)`.
pub fn three_sigma_outliers(reference: &[f64], probe: &[f64]) -> Result<Vec<(usize, f64)>> {
    if reference.len() < 2 {
        return Err(Error::invalid(
            "three_sigma_outliers: reference needs at least two values",
        ));
    }
    let (mu, sigma) = if is_flat(reference) {
        (reference[0], 0.0)
    } else {
        (mean(reference), std_dev(reference))
    };
    let bound = 3.0 * sigma;
    Ok(probe
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, v)| if sigma == 0.0 { v != mu } else { (v - mu).abs() > bound })
        .collect())
}

/// Trailing-window means: `out[i] = mean(values[i..i + window])`.
pub fn moving_average(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::invalid("moving_average: window must be positive"));
    }
    if window > values.len() {
        return Err(Error::invalid(format!(
            "moving_average: window {} exceeds length {}",
            window,
            values.len()
        )));
    }
    Ok(values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-9;

    #[test]
    fn pearson_identical_and_negated() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < EPS);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < EPS);
    }

    #[test]
    fn pearson_matches_frozen_oracle_value() {
        // Evaluated directly from the textbook formula outside this crate.
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 10.0]).unwrap();
        assert!((r - 0.8854377448471462).abs() < EPS, "{r}");
    }

    #[test]
    fn pearson_zero_variance_is_zero() {
        assert_eq!(pearson(&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn pearson_rejects_bad_lengths() {
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn three_sigma_constant_reference() {
        assert!(three_sigma_outliers(&[1.0; 4], &[1.0, 1.0]).unwrap().is_empty());
        assert_eq!(three_sigma_outliers(&[0.0; 4], &[0.0, 5.0]).unwrap(), vec![(1, 5.0)]);
    }

    #[test]
    fn three_sigma_empty_probe() {
        assert!(three_sigma_outliers(&[1.0, 2.0], &[]).unwrap().is_empty());
        assert!(three_sigma_outliers(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn three_sigma_seeded_reference() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(10.0, 1.0).unwrap();
        let reference: Vec<f64> = (0..60).map(|_| normal.sample(&mut rng)).collect();
        // Independent check of the bound.
        let n = reference.len() as f64;
        let mu = reference.iter().sum::<f64>() / n;
        let sd = (reference.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
        assert!(25.0 > mu + 3.0 * sd);
        assert!((10.2 - mu).abs() < 3.0 * sd);
        assert_eq!(
            three_sigma_outliers(&reference, &[10.2, 25.0]).unwrap(),
            vec![(1, 25.0)]
        );
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average(&[2.0; 4], 2).unwrap(), vec![2.0; 3]);
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), vec![1.5, 2.5, 3.5]);
        assert_eq!(moving_average(&[7.0], 1).unwrap(), vec![7.0]);
        assert!(moving_average(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn series_slicing() {
        let s = Series::new(10, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.slice_minutes(11, 13), Some(&[2.0, 3.0][..]));
        assert_eq!(s.slice_minutes(9, 12), None);
        assert!(Series::new(0, vec![]).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (2usize..40).prop_flat_map(|n| {
                (
                    prop::collection::vec(-1e3f64..1e3, n),
                    prop::collection::vec(-1e3f64..1e3, n),
                )
            })
        }

        proptest! {
            #[test]
            fn pearson_symmetric_and_bounded((x, y) in pair()) {
                let a = pearson(&x, &y).unwrap();
                let b = pearson(&y, &x).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
                prop_assert!(a.abs() <= 1.0);
            }

            #[test]
            fn pearson_affine_invariant((x, y) in pair(), a in 0.1f64..10.0, b in -100.0f64..100.0) {
                let base = pearson(&x, &y).unwrap();
                let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                let neg: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
                // Affine images of a (numerically) flat vector stay flat only
                // up to rounding; skip those.
                prop_assume!(std_dev(&x) > 1e-6 && std_dev(&y) > 1e-6);
                prop_assert!((pearson(&xs, &y).unwrap() - base).abs() < 1e-9);
                prop_assert!((pearson(&neg, &y).unwrap() + base).abs() < 1e-9);
            }

            #[test]
            fn three_sigma_is_monotone_in_distance(
                reference in prop::collection::vec(-50f64..50.0, 2..40),
                probe in prop::collection::vec(-500f64..500.0, 0..20),
            ) {
                let flagged = three_sigma_outliers(&reference, &probe).unwrap();
                let mu = mean(&reference);
                for &(i, v) in &flagged {
                    prop_assert!(i < probe.len());
                    prop_assert_eq!(probe[i], v);
                    for (j, w) in probe.iter().enumerate() {
                        let same_side = (w - mu).signum() == (v - mu).signum();
                        if same_side && (w - mu).abs() >= (v - mu).abs() {
                            prop_assert!(flagged.iter().any(|&(k, _)| k == j));
                        }
                    }
                }
            }

            #[test]
            fn moving_average_of_constant(c in -1e3f64..1e3, n in 1usize..50, w in 1usize..50) {
                prop_assume!(w <= n);
                let out = moving_average(&vec![c; n], w).unwrap();
                prop_assert_eq!(out.len(), n - w + 1);
                for v in out {
                    prop_assert!((v - c).abs() < 1e-9);
                }
            }
        }
    }
}
