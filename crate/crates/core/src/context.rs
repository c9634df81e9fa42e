//! Long-term per-band quantile summaries used as auxiliary features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::TimeFrequencyMatrix;

/// Permille, percentile, decile, quartile and median levels.
pub const DEFAULT_LEVELS: [f64; 9] = [0.001, 0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 0.999];
pub const DEFAULT_WINDOW: f64 = 1800.0;
pub const DEFAULT_PERIOD: f64 = 450.0;
pub const CONTEXT_BANDS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub window: f64,
    pub period: f64,
    pub levels: Vec<f64>,
    pub bands: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            period: DEFAULT_PERIOD,
            levels: DEFAULT_LEVELS.to_vec(),
            bands: CONTEXT_BANDS,
        }
    }
}

/// A single context slice, quantile-major: `values[q * n_bands + f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSlice {
    pub values: Vec<f64>,
    pub n_quantiles: usize,
    pub n_bands: usize,
}

impl ContextSlice {
    pub fn zeros(n_quantiles: usize, n_bands: usize) -> Self {
        Self {
            values: vec![0.0; n_quantiles * n_bands],
            n_quantiles,
            n_bands,
        }
    }

    pub fn get(&self, q: usize, f: usize) -> f64 {
        self.values[q * self.n_bands + f]
    }
}

/// Quantile summaries indexed `(slice, quantile, band)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTensor {
    pub values: Vec<f64>,
    pub n_slices: usize,
    pub n_quantiles: usize,
    pub n_bands: usize,
    pub slice_period: f64,
    pub window: f64,
    pub levels: Vec<f64>,
}

impl ContextTensor {
    /// Time in seconds at which slice `i` is emitted.
    pub fn slice_time(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.slice_period
    }

    pub fn slice(&self, i: usize) -> ContextSlice {
        let n = self.n_quantiles * self.n_bands;
        ContextSlice {
            values: self.values[i * n..(i + 1) * n].to_vec(),
            n_quantiles: self.n_quantiles,
            n_bands: self.n_bands,
        }
    }

    /// Index of the most recent slice at or before `t`; the first slice
    /// before any slice exists.
    pub fn index_at(&self, t: f64) -> usize {
        let k = (t / self.slice_period).floor();
        if k < 1.0 {
            0
        } else {
            ((k as usize) - 1).min(self.n_slices - 1)
        }
    }

    pub fn context_at(&self, t: f64) -> ContextSlice {
        self.slice(self.index_at(t))
    }
}

/// Averages groups of consecutive bands so that `out_bands` remain.
pub fn reduce_bands(e: &TimeFrequencyMatrix, out_bands: usize) -> Result<TimeFrequencyMatrix> {
    if out_bands == 0 || e.n_bands % out_bands != 0 {
        return Err(Error::Config(format!(
            "cannot reduce {} bands to {out_bands}",
            e.n_bands
        )));
    }
    let group = e.n_bands / out_bands;
    let mut values = Vec::with_capacity(e.n_frames * out_bands);
    for t in 0..e.n_frames {
        for chunk in e.frame(t).chunks(group) {
            values.push(chunk.iter().sum::<f64>() / group as f64);
        }
    }
    let band_edges = e
        .band_edges
        .chunks(group)
        .map(|c| (c[0].0, c[c.len() - 1].1))
        .collect();
    Ok(TimeFrequencyMatrix {
        values,
        n_frames: e.n_frames,
        n_bands: out_bands,
        sample_rate: e.sample_rate,
        hop_length: e.hop_length,
        band_edges,
        kind: e.kind,
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Windowed per-band quantiles. Slice `i` summarizes frames in
/// `[t - window, t)` with `t = (i + 1) * period`, truncated at the start of
/// the recording. Slices are emitted while `t` does not exceed the
/// recording duration; at least one slice is always produced.
pub fn summary_statistics(e: &TimeFrequencyMatrix, cfg: &ContextConfig) -> Result<ContextTensor> {
    if !(cfg.period > 0.0) || cfg.window < cfg.period {
        return Err(Error::Config(format!(
            "need 0 < period <= window, got period={} window={}",
            cfg.period, cfg.window
        )));
    }
    let levels_ok = !cfg.levels.is_empty()
        && cfg.levels.iter().all(|&p| p > 0.0 && p < 1.0)
        && cfg.levels.windows(2).all(|w| w[0] < w[1]);
    if !levels_ok {
        return Err(Error::Config(format!(
            "quantile levels must be strictly increasing in (0,1): {:?}",
            cfg.levels
        )));
    }
    let rate = e.frame_rate();
    let duration = e.n_frames as f64 / rate;
    let n_slices = ((duration / cfg.period).floor() as usize).max(1);
    let nq = cfg.levels.len();
    let mut values = Vec::with_capacity(n_slices * nq * e.n_bands);
    let mut column = Vec::new();
    for i in 0..n_slices {
        let t = (i + 1) as f64 * cfg.period;
        let end = ((t * rate).round() as usize).min(e.n_frames);
        let start = (((t - cfg.window) * rate).round().max(0.0) as usize).min(end);
        if start == end {
            return Err(Error::EmptyWindow(format!(
                "no frames in [{:.3}, {t:.3}) s",
                t - cfg.window
            )));
        }
        let mut slice = vec![0.0; nq * e.n_bands];
        for f in 0..e.n_bands {
            column.clear();
            column.extend((start..end).map(|t| e.get(t, f)));
            column.sort_unstable_by(f64::total_cmp);
            for (q, &p) in cfg.levels.iter().enumerate() {
                slice[q * e.n_bands + f] = quantile_sorted(&column, p);
            }
        }
        values.extend(slice);
    }
    Ok(ContextTensor {
        values,
        n_slices,
        n_quantiles: nq,
        n_bands: e.n_bands,
        slice_period: cfg.period,
        window: cfg.window,
        levels: cfg.levels.clone(),
    })
}

/// Band reduction followed by windowed quantiles.
pub fn context_tensor(e: &TimeFrequencyMatrix, cfg: &ContextConfig) -> Result<ContextTensor> {
    summary_statistics(&reduce_bands(e, cfg.bands)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::Kind;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(n_frames: usize, n_bands: usize, hop: usize, f: impl Fn(usize, usize) -> f64) -> TimeFrequencyMatrix {
        let mut values = Vec::new();
        for t in 0..n_frames {
            for b in 0..n_bands {
                values.push(f(t, b));
            }
        }
        TimeFrequencyMatrix {
            values,
            n_frames,
            n_bands,
            sample_rate: 22050,
            hop_length: hop,
            band_edges: (0..n_bands).map(|b| (b as f64, b as f64 + 2.0)).collect(),
            kind: Kind::Pcen,
        }
    }

    #[test]
    fn reduce_constant_and_zero() {
        let e = matrix(5, 128, 32, |_, _| 3.5);
        let r = reduce_bands(&e, 32).unwrap();
        assert_eq!(r.n_bands, 32);
        assert!(r.values.iter().all(|&v| v == 3.5));
        let z = reduce_bands(&matrix(5, 128, 32, |_, _| 0.0), 32).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reduce_band_index_ramp() {
        let e = matrix(3, 128, 32, |_, b| b as f64);
        let r = reduce_bands(&e, 32).unwrap();
        for j in 0..32 {
            assert_eq!(r.get(1, j), 4.0 * j as f64 + 1.5);
        }
        assert_eq!(r.band_edges[1], (4.0, 9.0));
    }

    #[test]
    fn reduce_indivisible_is_error() {
        assert!(reduce_bands(&matrix(1, 30, 32, |_, _| 0.0), 32).is_err());
    }

    #[test]
    fn default_levels_and_timing() {
        let c = ContextConfig::default();
        assert_eq!(c.levels, vec![0.001, 0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 0.999]);
        assert_eq!((c.window, c.period, c.bands), (1800.0, 450.0, 32));
    }

    #[test]
    fn constant_input_quantiles() {
        // hop 22050 gives one frame per second.
        let e = matrix(1000, 2, 22050, |_, _| 4.0);
        let c = summary_statistics(&e, &ContextConfig { window: 300.0, period: 100.0, ..Default::default() }).unwrap();
        assert_eq!(c.n_slices, 10);
        assert!(c.values.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn permutation_quantiles_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut perm: Vec<usize> = (0..1000).collect();
        perm.shuffle(&mut rng);
        let e = matrix(1000, 1, 22050, |t, _| perm[t] as f64);
        let cfg = ContextConfig { window: 1000.0, period: 1000.0, ..Default::default() };
        let c = summary_statistics(&e, &cfg).unwrap();
        let mut sorted: Vec<f64> = (0..1000).map(|v| v as f64).collect();
        sorted.sort_by(f64::total_cmp);
        for (q, &p) in cfg.levels.iter().enumerate() {
            // On 0..999 the type-7 quantile is exactly p * 999.
            assert_eq!(c.slice(0).get(q, 0), p * 999.0);
            assert_eq!(c.slice(0).get(q, 0), quantile_sorted(&sorted, p));
        }
    }

    #[test]
    fn windows_truncate_at_start_and_slide() {
        let e = matrix(400, 1, 22050, |t, _| t as f64);
        let cfg = ContextConfig { window: 200.0, period: 100.0, levels: vec![0.5], bands: 1 };
        let c = summary_statistics(&e, &cfg).unwrap();
        assert_eq!(c.n_slices, 4);
        // [0,100), [0,200), [100,300), [200,400)
        let medians: Vec<f64> = (0..4).map(|i| c.slice(i).get(0, 0)).collect();
        assert_eq!(medians, vec![49.5, 99.5, 199.5, 299.5]);
    }

    #[test]
    fn bad_config_errors() {
        let e = matrix(10, 1, 22050, |t, _| t as f64);
        let bad = ContextConfig { window: 1.0, period: 2.0, ..Default::default() };
        assert!(summary_statistics(&e, &bad).is_err());
        let unsorted = ContextConfig { levels: vec![0.5, 0.1], ..Default::default() };
        assert!(summary_statistics(&e, &unsorted).is_err());
    }

    #[test]
    fn context_at_step_function() {
        let e = matrix(2000, 1, 22050, |t, _| t as f64);
        let cfg = ContextConfig { window: 900.0, period: 450.0, levels: vec![0.5], bands: 1 };
        let c = summary_statistics(&e, &cfg).unwrap();
        assert_eq!(c.n_slices, 4);
        assert_eq!(c.index_at(0.0), 0);
        assert_eq!(c.index_at(450.0), 0);
        assert_eq!(c.index_at(899.999), 0);
        assert_eq!(c.index_at(900.0), 1);
        assert_eq!(c.index_at(1000.0), 1);
        assert_eq!(c.index_at(1e9), 3);
        assert_eq!(c.context_at(1350.0), c.slice(2));
    }

    #[test]
    fn transient_barely_moves_median() {
        // 30 minutes of noise-like frames at 20 frames/s, one band.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rate = 20.0;
        let n = (1800.0 * rate) as usize;
        let base: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let mut with_event = base.clone();
        // 150 ms transient is 3 frames at 20 fps.
        for v in &mut with_event[1000..1003] {
            *v = 100.0;
        }
        let mut sorted = base.clone();
        sorted.sort_by(f64::total_cmp);
        let gap = quantile_sorted(&sorted, 0.503) - quantile_sorted(&sorted, 0.497);
        let mut s2 = with_event.clone();
        s2.sort_by(f64::total_cmp);
        let dm = (quantile_sorted(&s2, 0.5) - quantile_sorted(&sorted, 0.5)).abs();
        assert!(dm < gap, "{dm} vs {gap}");
    }

    proptest! {
        #[test]
        fn quantiles_monotone_and_permutation_invariant(
            vals in prop::collection::vec(-100.0f64..100.0, 20..200),
            seed in 0u64..1000,
        ) {
            let n = vals.len();
            let e = matrix(n, 1, 22050, |t, _| vals[t]);
            let cfg = ContextConfig { window: n as f64, period: n as f64, bands: 1, ..Default::default() };
            let c = summary_statistics(&e, &cfg).unwrap();
            let s = c.slice(0);
            for q in 1..s.n_quantiles {
                prop_assert!(s.get(q, 0) >= s.get(q - 1, 0));
            }
            let mut shuffled = vals.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let e2 = matrix(n, 1, 22050, |t, _| shuffled[t]);
            prop_assert_eq!(summary_statistics(&e2, &cfg).unwrap().slice(0), s);
        }
    }
}
