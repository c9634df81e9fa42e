//! Moments and histograms of globally standardized magnitudes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HIST_RANGE: f64 = 4.0;
pub const HIST_BINS: usize = 80;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub bin_edges: Vec<f64>,
    /// Out-of-range values are counted in the edge bins.
    pub counts: Vec<u64>,
    /// Center of the fullest histogram bin, in global standard deviations.
    pub mode_location: f64,
}

/// Global mean and standard deviation of a pooled set.
pub fn pooled_moments<'a>(groups: impl IntoIterator<Item = &'a [f64]> + Clone) -> Result<(f64, f64)> {
    let (mut n, mut sum) = (0usize, 0.0);
    for g in groups.clone() {
        n += g.len();
        sum += g.iter().sum::<f64>();
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    let mean = sum / n as f64;
    let var = groups
        .into_iter()
        .flat_map(|g| g.iter())
        .map(|x| (x - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::DegenerateDistribution(format!("variance {var}")));
    }
    Ok((mean, var.sqrt()))
}

/// Statistics of `values` after standardizing with the given global moments.
pub fn standardized_stats(values: &[f64], mean: f64, std: f64) -> Result<DistributionStats> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    let n = values.len() as f64;
    let z: Vec<f64> = values.iter().map(|x| (x - mean) / std).collect();
    let m = z.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in &z {
        let d = v - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };

    let width = 2.0 * HIST_RANGE / HIST_BINS as f64;
    let bin_edges: Vec<f64> = (0..=HIST_BINS).map(|i| -HIST_RANGE + i as f64 * width).collect();
    let mut counts = vec![0u64; HIST_BINS];
    for &v in &z {
        let i = ((v + HIST_RANGE) / width).floor();
        let i = i.clamp(0.0, (HIST_BINS - 1) as f64) as usize;
        counts[i] += 1;
    }
    let mode_bin = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(DistributionStats {
        count: values.len(),
        mean: m,
        variance: m2,
        skewness,
        excess_kurtosis,
        mode_location: 0.5 * (bin_edges[mode_bin] + bin_edges[mode_bin + 1]),
        bin_edges,
        counts,
    })
}

pub fn distribution_stats(values: &[f64]) -> Result<DistributionStats> {
    let (mean, std) = pooled_moments([values])?;
    standardized_stats(values, mean, std)
}

/// Standardizes all groups with the pooled moments and returns one
/// summary per group.
pub fn pooled_distribution_stats(groups: &[&[f64]]) -> Result<Vec<DistributionStats>> {
    let (mean, std) = pooled_moments(groups.iter().copied())?;
    groups
        .iter()
        .map(|g| standardized_stats(g, mean, std))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp1, StandardNormal};

    #[test]
    fn standard_normal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..1_000_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = distribution_stats(&x).unwrap();
        assert!(s.skewness.abs() < 0.01, "{}", s.skewness);
        assert!(s.excess_kurtosis.abs() < 0.02, "{}", s.excess_kurtosis);
        assert!(s.mean.abs() < 1e-12 && (s.variance - 1.0).abs() < 1e-9);
        assert_eq!(s.counts.iter().sum::<u64>(), 1_000_000);
        assert!(s.mode_location.abs() < 0.2);
    }

    #[test]
    fn exponential_skewness_is_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..1_000_000).map(|_| Exp1.sample(&mut rng)).collect();
        let s = distribution_stats(&x).unwrap();
        assert!((s.skewness - 2.0).abs() < 0.05, "{}", s.skewness);
        assert!((s.excess_kurtosis - 6.0).abs() < 0.5, "{}", s.excess_kurtosis);
    }

    #[test]
    fn constant_input_is_degenerate() {
        let err = distribution_stats(&[3.0; 100]).unwrap_err();
        assert!(err.to_string().contains("degenerate distribution"));
    }

    #[test]
    fn pooled_stats_locate_shifted_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = a.iter().map(|x: &f64| x + 4.0).collect();
        let s = pooled_distribution_stats(&[&a, &b]).unwrap();
        // Pooled std is sqrt(1 + 4) so the modes sit near -+0.894.
        assert!((s[0].mode_location + 0.894).abs() < 0.15);
        assert!((s[1].mode_location - 0.894).abs() < 0.15);
    }
}
