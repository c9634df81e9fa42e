use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Name of the mel filterbank variant, recorded in feature metadata.
pub const MEL_VARIANT: &str = "slaney-mel/slaney-norm/triangular";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub fft_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            win_length: 256,
            hop_length: 32,
            fft_length: 1024,
            n_mels: 128,
            fmin: 2000.0,
            fmax: 11025.0,
        }
    }
}

impl SpectrogramConfig {
    /// Reduced setup for quick experiments: 64 bands at hop 64, so that a
    /// 150 ms clip spans 52 frames.
    pub fn desk() -> Self {
        Self {
            hop_length: 64,
            n_mels: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.sample_rate == 0 || self.win_length == 0 || self.hop_length == 0 {
            return Err(Error::Config(
                "sample rate, window and hop must be positive".into(),
            ));
        }
        if self.fft_length < self.win_length {
            return Err(Error::Config(format!(
                "fft_length {} < win_length {}",
                self.fft_length, self.win_length
            )));
        }
        if !(self.fmin > 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 < fmin < fmax <= {nyquist}, got fmin={} fmax={}",
                self.fmin, self.fmax
            )));
        }
        if self.n_mels < 2 {
            return Err(Error::Config("n_mels must be at least 2".into()));
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_length as f64
    }

    /// Number of frames under no-padding framing.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.win_length {
            0
        } else {
            (n_samples - self.win_length) / self.hop_length + 1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Energy,
    Logmel,
    Pcen,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Energy => "energy",
            Kind::Logmel => "logmel",
            Kind::Pcen => "pcen",
        }
    }
}

/// Frame-major matrix of magnitudes, `values[t * n_bands + f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeFrequencyMatrix {
    pub values: Vec<f64>,
    pub n_frames: usize,
    pub n_bands: usize,
    pub sample_rate: u32,
    pub hop_length: usize,
    /// (low, high) edge in Hz of each band's support.
    pub band_edges: Vec<(f64, f64)>,
    pub kind: Kind,
}

impl TimeFrequencyMatrix {
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_length as f64
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_bands..(t + 1) * self.n_bands]
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.n_bands + f]
    }

    pub fn band(&self, f: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(f).step_by(self.n_bands).copied()
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::WrongKind {
                expected: kind.name(),
                actual: self.kind.name(),
            });
        }
        Ok(())
    }

    pub(crate) fn with_values(&self, values: Vec<f64>, kind: Kind) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            kind,
            n_frames: self.n_frames,
            n_bands: self.n_bands,
            sample_rate: self.sample_rate,
            hop_length: self.hop_length,
            band_edges: self.band_edges.clone(),
        }
    }

    /// Frames `[start, end)`.
    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.n_frames);
        let start = start.min(end);
        Self {
            values: self.values[start * self.n_bands..end * self.n_bands].to_vec(),
            n_frames: end - start,
            n_bands: self.n_bands,
            sample_rate: self.sample_rate,
            hop_length: self.hop_length,
            band_edges: self.band_edges.clone(),
            kind: self.kind,
        }
    }

    pub fn scaled(&self, gain: f64) -> Self {
        self.with_values(self.values.iter().map(|v| v * gain).collect(), self.kind)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (logstep * (mel - MIN_LOG_MEL)).exp()
    } else {
        F_SP * mel
    }
}

/// Sparse triangular filter: first FFT bin and its weights.
#[derive(Debug, Clone)]
pub struct MelFilter {
    pub start: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub filters: Vec<MelFilter>,
    /// Triangle corner frequencies, `n_mels + 2` points.
    pub corners: Vec<f64>,
    pub n_bins: usize,
}

impl MelFilterbank {
    pub fn new(cfg: &SpectrogramConfig) -> Self {
        let n_bins = cfg.fft_length / 2 + 1;
        let lo = hz_to_mel(cfg.fmin);
        let hi = hz_to_mel(cfg.fmax);
        let corners: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_length as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (f0, f1, f2) = (corners[m], corners[m + 1], corners[m + 2]);
                let norm = 2.0 / (f2 - f0);
                let dense: Vec<f64> = (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let lower = (f - f0) / (f1 - f0);
                        let upper = (f2 - f) / (f2 - f1);
                        lower.min(upper).max(0.0) * norm
                    })
                    .collect();
                let start = dense.iter().position(|&w| w > 0.0).unwrap_or(0);
                let end = dense.iter().rposition(|&w| w > 0.0).map_or(start, |e| e + 1);
                MelFilter {
                    start,
                    weights: dense[start..end].to_vec(),
                }
            })
            .collect();
        Self {
            filters,
            corners,
            n_bins,
        }
    }

    pub fn band_edges(&self) -> Vec<(f64, f64)> {
        self.corners.windows(3).map(|c| (c[0], c[2])).collect()
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, filt) in out.iter_mut().zip(&self.filters) {
            *o = filt
                .weights
                .iter()
                .zip(&power[filt.start..])
                .map(|(w, p)| w * p)
                .sum();
        }
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

/// Mel spectrogram (STFT squared modulus projected on the filterbank).
pub struct MelSpectrogram {
    cfg: SpectrogramConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: MelFilterbank,
}

impl MelSpectrogram {
    pub fn new(cfg: SpectrogramConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_length);
        Ok(Self {
            window: hann(cfg.win_length),
            filterbank: MelFilterbank::new(&cfg),
            fft,
            cfg,
        })
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn compute(&self, w: &Waveform) -> Result<TimeFrequencyMatrix> {
        let cfg = &self.cfg;
        if w.sample_rate != cfg.sample_rate {
            return Err(Error::Config(format!(
                "waveform sample rate {} Hz does not match configured {} Hz",
                w.sample_rate, cfg.sample_rate
            )));
        }
        w.check_finite()?;
        if w.len() < cfg.win_length {
            return Err(Error::InputTooShort(format!(
                "{} samples, need at least {}",
                w.len(),
                cfg.win_length
            )));
        }
        let n_frames = cfg.n_frames(w.len());
        let n_mels = cfg.n_mels;
        let mut values = vec![0.0; n_frames * n_mels];
        const CHUNK: usize = 256;
        values
            .par_chunks_mut(CHUNK * n_mels)
            .enumerate()
            .for_each(|(c, out)| {
                let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_length];
                let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
                let mut power = vec![0.0; self.filterbank.n_bins];
                for (i, row) in out.chunks_mut(n_mels).enumerate() {
                    let start = (c * CHUNK + i) * cfg.hop_length;
                    let frame = &w.samples[start..start + cfg.win_length];
                    for (b, (&x, &h)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                        *b = Complex::new(x as f64 * h, 0.0);
                    }
                    for b in &mut buf[cfg.win_length..] {
                        *b = Complex::new(0.0, 0.0);
                    }
                    self.fft.process_with_scratch(&mut buf, &mut scratch);
                    for (p, b) in power.iter_mut().zip(&buf) {
                        *p = b.norm_sqr();
                    }
                    self.filterbank.apply(&power, row);
                }
            });
        Ok(TimeFrequencyMatrix {
            values,
            n_frames,
            n_bands: n_mels,
            sample_rate: cfg.sample_rate,
            hop_length: cfg.hop_length,
            band_edges: self.filterbank.band_edges(),
            kind: Kind::Energy,
        })
    }
}

pub fn melspectrogram(w: &Waveform, cfg: &SpectrogramConfig) -> Result<TimeFrequencyMatrix> {
    MelSpectrogram::new(*cfg)?.compute(w)
}

/// Elementwise `log10(E + 1e-10)`.
pub fn logmelspec(e: &TimeFrequencyMatrix) -> Result<TimeFrequencyMatrix> {
    e.expect_kind(Kind::Energy)?;
    Ok(e.with_values(
        e.values.iter().map(|&v| (v + LOG_FLOOR).log10()).collect(),
        Kind::Logmel,
    ))
}

pub const LOG_FLOOR: f64 = 1e-10;
