//! Seed aggregation: medians, bootstrap standard errors, correlation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HarnessError, Result};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_SEED: u64 = 0;

fn check(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(HarnessError::Argument("no values to aggregate".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(HarnessError::Argument("NaN among values".into()));
    }
    Ok(())
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn median_of_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Sample median; the mean of the two middle values for even counts.
/// Infinite values are allowed and sort to the ends.
pub fn median(values: &[f64]) -> Result<f64> {
    check(values)?;
    Ok(median_of_sorted(&sorted(values)))
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    check(values)?;
    if !(0.0..=1.0).contains(&q) {
        return Err(HarnessError::Argument(format!("quantile {q} outside [0, 1]")));
    }
    let v = sorted(values);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(if lo == hi { v[lo] } else { v[lo] + frac * (v[hi] - v[lo]) })
}

/// Median with its bootstrap standard error: the population standard
/// deviation of the medians of `resamples` with-replacement resamples,
/// drawn from a ChaCha8 generator seeded with `seed`.
pub fn median_with_sem_seeded(values: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64)> {
    let m = median(values)?;
    if resamples == 0 {
        return Err(HarnessError::Argument("zero bootstrap resamples".into()));
    }
    let n = values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; n];
    let mut medians = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for slot in buf.iter_mut() {
            *slot = values[rng.random_range(0..n)];
        }
        buf.sort_by(f64::total_cmp);
        medians.push(median_of_sorted(&buf));
    }
    let mean = medians.iter().sum::<f64>() / resamples as f64;
    let var = medians.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / resamples as f64;
    let sem = if var.is_finite() { var.sqrt() } else { f64::INFINITY };
    Ok((m, sem))
}

pub fn median_with_sem(values: &[f64]) -> Result<(f64, f64)> {
    median_with_sem_seeded(values, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED)
}

/// Pearson correlation; `None` with fewer than two points or when either
/// coordinate has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
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
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    r.is_finite().then(|| r.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 3.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert_eq!(median(&[1.0, f64::INFINITY, 2.0]).unwrap(), 2.0);
        assert!(median(&[]).is_err());
        assert!(median(&[f64::NAN]).is_err());
    }

    #[test]
    fn single_value_has_zero_sem() {
        assert_eq!(median_with_sem(&[7.0]).unwrap(), (7.0, 0.0));
    }

    #[test]
    fn sem_is_deterministic_and_positive() {
        let v = [1.0, 2.0, 3.0, 4.0, 100.0];
        let a = median_with_sem(&v).unwrap();
        assert_eq!(a, median_with_sem(&v).unwrap());
        assert_eq!(a.0, 3.0);
        assert!(a.1 > 0.0);
        assert!(median_with_sem(&[]).is_err());
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.25).unwrap(), 2.0);
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5).unwrap(), 1.5);
        assert!(quantile(&v, 1.5).is_err());
    }

    #[test]
    fn pearson_cases() {
        let e = std::f64::consts::E;
        let r = pearson(&[e.ln(), (e * e).ln()], &[10.0, 20.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0], &[2.0]), None);
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]), None);
        let r = pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-15);
    }
}
