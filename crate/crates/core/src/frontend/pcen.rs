//! Per-channel energy normalization.
//!
//! Each band is divided by a causally smoothed copy of itself raised to
//! `alpha` (gain control), then root-compressed around the bias `delta`:
//!
//! `PCEN = (E / (eps + M^alpha) + delta)^r - delta^r`
//!
//! The smoother `M` is a first-order recursion with coefficient
//! `s = 1 - exp(-hop / T)`, seeded with the first frame.

use serde::{Deserialize, Serialize};

use super::spectrogram::{Kind, TimeFrequencyMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcenParams {
    /// Smoother time constant in seconds.
    pub time_constant: f64,
    pub alpha: f64,
    pub delta: f64,
    pub r: f64,
    pub eps: f64,
}

impl PcenParams {
    /// Outdoor bioacoustic setting: fast smoother, strong compression.
    pub const OUTDOOR: Self = Self {
        time_constant: 0.060,
        alpha: 0.8,
        delta: 10.0,
        r: 0.25,
        eps: 1e-6,
    };

    /// Indoor speech setting.
    pub const INDOOR: Self = Self {
        time_constant: 0.400,
        alpha: 0.98,
        delta: 2.0,
        r: 0.5,
        eps: 1e-6,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.time_constant > 0.0
            && self.alpha > 0.0
            && self.alpha <= 1.0
            && self.delta >= 0.0
            && self.r > 0.0
            && self.r <= 1.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid PCEN parameters {self:?}")))
        }
    }

    /// Closed-form output for a constant input `c` once the smoother has
    /// converged to `M = c`.
    pub fn steady_state(&self, c: f64) -> f64 {
        (c / (self.eps + c.powf(self.alpha)) + self.delta).powf(self.r) - self.delta.powf(self.r)
    }

    #[inline]
    pub fn compress(&self, e: f64, m: f64) -> f64 {
        (e / (self.eps + m.powf(self.alpha)) + self.delta).powf(self.r) - self.delta.powf(self.r)
    }
}

impl Default for PcenParams {
    fn default() -> Self {
        Self::OUTDOOR
    }
}

pub fn smoothing_coefficient(hop_seconds: f64, time_constant: f64) -> f64 {
    1.0 - (-hop_seconds / time_constant).exp()
}

/// Streaming per-band smoother. One instance per band set, owned by a
/// single consumer.
#[derive(Debug, Clone)]
pub struct EmaState {
    s: f64,
    state: Option<Vec<f64>>,
}

impl EmaState {
    pub fn new(s: f64) -> Self {
        Self { s, state: None }
    }

    pub fn coefficient(&self) -> f64 {
        self.s
    }

    /// Advances one frame and returns the updated smoother values.
    pub fn push(&mut self, frame: &[f64]) -> &[f64] {
        let s = self.s;
        match &mut self.state {
            Some(m) => {
                for (m, &e) in m.iter_mut().zip(frame) {
                    *m = (1.0 - s) * *m + s * e;
                }
            }
            None => self.state = Some(frame.to_vec()),
        }
        self.state.as_deref().unwrap()
    }
}

/// Streaming PCEN over successive energy frames.
#[derive(Debug, Clone)]
pub struct PcenState {
    params: PcenParams,
    ema: EmaState,
}

impl PcenState {
    pub fn new(params: PcenParams, hop_seconds: f64) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            ema: EmaState::new(smoothing_coefficient(hop_seconds, params.time_constant)),
            params,
        })
    }

    pub fn process(&mut self, frame: &[f64], out: &mut [f64]) {
        let p = self.params;
        let m = self.ema.push(frame);
        for ((o, &e), &m) in out.iter_mut().zip(frame).zip(m) {
            *o = p.compress(e, m);
        }
    }
}

pub fn ema_smooth(e: &TimeFrequencyMatrix, time_constant: f64) -> Result<TimeFrequencyMatrix> {
    e.expect_kind(Kind::Energy)?;
    if !(time_constant > 0.0) {
        return Err(Error::Config("smoother time constant must be positive".into()));
    }
    let hop = e.hop_length as f64 / e.sample_rate as f64;
    let mut ema = EmaState::new(smoothing_coefficient(hop, time_constant));
    let mut values = Vec::with_capacity(e.values.len());
    for t in 0..e.n_frames {
        values.extend_from_slice(ema.push(e.frame(t)));
    }
    Ok(e.with_values(values, Kind::Energy))
}

pub fn pcen(e: &TimeFrequencyMatrix, params: &PcenParams) -> Result<TimeFrequencyMatrix> {
    e.expect_kind(Kind::Energy)?;
    let hop = e.hop_length as f64 / e.sample_rate as f64;
    let mut state = PcenState::new(*params, hop)?;
    let mut values = vec![0.0; e.values.len()];
    for (t, out) in values.chunks_mut(e.n_bands).enumerate() {
        state.process(e.frame(t), out);
    }
    Ok(e.with_values(values, Kind::Pcen))
}

/// Number of frames spanned by `multiple * T` at the matrix frame rate.
pub fn burn_in_frames(e: &TimeFrequencyMatrix, time_constant: f64, multiple: f64) -> usize {
    (multiple * time_constant * e.frame_rate()).ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn energy(n_frames: usize, n_bands: usize, f: impl Fn(usize, usize) -> f64) -> TimeFrequencyMatrix {
        let mut values = Vec::with_capacity(n_frames * n_bands);
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
            hop_length: 32,
            band_edges: vec![(0.0, 1.0); n_bands],
            kind: Kind::Energy,
        }
    }

    #[test]
    fn smoothing_coefficient_outdoor() {
        let s = smoothing_coefficient(32.0 / 22050.0, 0.060);
        let expected = 1.0 - (-(32.0 / 22050.0) / 0.060f64).exp();
        assert_eq!(s, expected);
        assert!((s - 0.02390).abs() < 1e-5, "{s}");
    }

    #[test]
    fn ema_constant_is_fixed_point() {
        let e = energy(500, 3, |_, _| 2.5);
        let m = ema_smooth(&e, 0.06).unwrap();
        assert!(m.values.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn ema_impulse_response() {
        let e = energy(200, 2, |t, b| if t == 0 && b == 1 { 1.0 } else { 0.0 });
        let m = ema_smooth(&e, 0.06).unwrap();
        let s = smoothing_coefficient(32.0 / 22050.0, 0.06);
        for t in 0..200 {
            assert_eq!(m.get(t, 0), 0.0);
            let oracle = (1.0 - s).powi(t as i32);
            assert!((m.get(t, 1) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn pcen_of_zero_is_zero() {
        let e = energy(100, 4, |_, _| 0.0);
        for p in [PcenParams::OUTDOOR, PcenParams::INDOOR] {
            let out = pcen(&e, &p).unwrap();
            assert!(out.values.iter().all(|&v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn pcen_steady_state_outdoor_unit() {
        let p = PcenParams::OUTDOOR;
        let e = energy(2000, 2, |_, _| 1.0);
        let out = pcen(&e, &p).unwrap();
        let expected = (1.0 / (1e-6 + 1.0) + 10.0f64).powf(0.25) - 10f64.powf(0.25);
        assert!((expected - 0.0429).abs() < 1e-4);
        assert!((out.get(1999, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn pcen_perfect_gain_normalization() {
        let p = PcenParams {
            time_constant: 0.06,
            alpha: 1.0,
            delta: 0.0,
            r: 1.0,
            eps: 1e-300,
        };
        let e = energy(100, 1, |_, _| 7.0);
        let out = pcen(&e, &p).unwrap();
        assert!(out.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn wrong_kind_rejected() {
        let mut e = energy(10, 1, |_, _| 1.0);
        e.kind = Kind::Logmel;
        assert!(pcen(&e, &PcenParams::OUTDOOR).is_err());
        assert!(ema_smooth(&e, 0.06).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let e = energy(10, 1, |_, _| 1.0);
        let p = PcenParams {
            alpha: 1.5,
            ..PcenParams::OUTDOOR
        };
        assert!(pcen(&e, &p).is_err());
    }

    proptest! {
        #[test]
        fn ema_is_convex_combination(vals in prop::collection::vec(0.0f64..1e3, 2..200)) {
            let n = vals.len();
            let e = energy(n, 1, |t, _| vals[t]);
            let m = ema_smooth(&e, 0.01).unwrap();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in &m.values {
                prop_assert!(v >= lo - 1e-9 * hi && v <= hi + 1e-9 * hi);
            }
        }

        #[test]
        fn pcen_output_increases_with_energy(m in 1e-3f64..1e3, e in 0.0f64..1e3, de in 1e-3f64..10.0) {
            for p in [PcenParams::OUTDOOR, PcenParams::INDOOR] {
                prop_assert!(p.compress(e + de, m) > p.compress(e, m));
            }
        }

        #[test]
        fn gain_normalization_is_loudness_invariant(
            vals in prop::collection::vec(0.1f64..10.0, 50..100),
            g in 1e-3f64..1e3,
        ) {
            let p = PcenParams { time_constant: 0.02, alpha: 1.0, delta: 0.0, r: 1.0, eps: 1e-300 };
            let e = energy(vals.len(), 1, |t, _| vals[t]);
            let a = pcen(&e, &p).unwrap();
            let b = pcen(&e.scaled(g), &p).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
