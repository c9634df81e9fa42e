//! Pitch shifting, time stretching and background-noise mixing of clips.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the sinc kernel on each side (at the output rate).
const SINC_ZEROS: f64 = 16.0;
pub const VOCODER_WINDOW: usize = 1024;
pub const VOCODER_HOP: usize = 256;
/// Finite stand-in for an infinite SNR.
pub const MAX_SNR_DB: f64 = 120.0;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Playback-speed change: output sample `j` reads the input at `j * ratio`.
/// Output length is `round(len / ratio)`, sample rate unchanged.
pub fn resample(w: &Waveform, ratio: f64) -> Result<Waveform> {
    if !(0.25..=4.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("resampling ratio {ratio} outside [0.25, 4]")));
    }
    let n_out = (w.len() as f64 / ratio).round() as usize;
    if ratio == 1.0 {
        return Ok(w.clone());
    }
    // Cutoff relative to the input Nyquist frequency.
    let cutoff = (1.0 / ratio).min(1.0);
    let half = (SINC_ZEROS / cutoff).ceil() as i64;
    let x = &w.samples;
    let out: Vec<f32> = (0..n_out)
        .into_par_iter()
        .map(|j| {
            let pos = j as f64 * ratio;
            let centre = pos.floor() as i64;
            let mut acc = 0.0;
            for k in centre - half..=centre + half + 1 {
                let d = pos - k as f64;
                let u = d * cutoff / SINC_ZEROS;
                if u.abs() >= 1.0 {
                    continue;
                }
                let win = 0.5 + 0.5 * (PI * u).cos();
                let h = cutoff * sinc(cutoff * d) * win;
                if k >= 0 && (k as usize) < x.len() {
                    acc += h * x[k as usize] as f64;
                }
            }
            acc as f32
        })
        .collect();
    Waveform::new(out, w.sample_rate)
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn wrap(phase: f64) -> f64 {
    phase - 2.0 * PI * (phase / (2.0 * PI)).round()
}

/// Phase-vocoder time stretch with identity phase locking. `rate > 1`
/// shortens the signal; output length is `round(len / rate)`.
pub fn time_stretch(w: &Waveform, rate: f64) -> Result<Waveform> {
    if !(0.5..=2.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("stretch rate {rate} outside [0.5, 2]")));
    }
    let n = VOCODER_WINDOW;
    let hop = VOCODER_HOP;
    let bins = n / 2 + 1;
    let pad = n / 2;
    let target = (w.len() as f64 / rate).round() as usize;
    let mut padded = vec![0.0f64; w.len() + 2 * pad];
    for (p, &s) in padded[pad..].iter_mut().zip(&w.samples) {
        *p = s as f64;
    }
    let window = hann(n);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let n_frames = 1 + (padded.len().saturating_sub(n)) / hop;
    let mut spec: Vec<Vec<Complex64>> = (0..n_frames)
        .map(|f| {
            let mut buf: Vec<Complex64> =
                (0..n).map(|i| Complex64::new(padded[f * hop + i] * window[i], 0.0)).collect();
            fwd.process(&mut buf);
            buf.truncate(bins);
            buf
        })
        .collect();
    spec.push(vec![Complex64::new(0.0, 0.0); bins]);

    let expected: Vec<f64> = (0..bins).map(|k| 2.0 * PI * k as f64 * hop as f64 / n as f64).collect();
    let n_out_frames = ((n_frames as f64) / rate).ceil() as usize;
    let out_len = n + hop * n_out_frames.saturating_sub(1);
    let mut out = vec![0.0f64; out_len];
    let mut norm = vec![0.0f64; out_len];
    let mut acc: Vec<f64> = spec[0].iter().map(|c| c.arg()).collect();
    let mut mag = vec![0.0; bins];
    let mut out_phase = vec![0.0; bins];
    let mut frame = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..n_out_frames {
        let s = t as f64 * rate;
        let i = (s.floor() as usize).min(n_frames - 1);
        let a = s - i as f64;
        let (x0, x1) = (&spec[i], &spec[i + 1]);
        for k in 0..bins {
            mag[k] = (1.0 - a) * x0[k].norm() + a * x1[k].norm();
        }
        // Peaks and their regions of influence.
        let peaks: Vec<usize> = (0..bins)
            .filter(|&k| (k == 0 || mag[k] > mag[k - 1]) && (k + 1 == bins || mag[k] >= mag[k + 1]))
            .collect();
        if peaks.is_empty() {
            out_phase.iter_mut().zip(x0).for_each(|(o, c)| *o = c.arg());
        } else {
            let mut pi = 0;
            for k in 0..bins {
                while pi + 1 < peaks.len() && (peaks[pi + 1] as f64 - k as f64) < (k as f64 - peaks[pi] as f64) {
                    pi += 1;
                }
                let p = peaks[pi];
                out_phase[k] = acc[p] + x0[k].arg() - x0[p].arg();
            }
        }
        for k in 0..bins {
            let c = Complex64::from_polar(mag[k], out_phase[k]);
            frame[k] = c;
            if k > 0 && k < n - k {
                frame[n - k] = c.conj();
            }
        }
        inv.process(&mut frame);
        let off = t * hop;
        for j in 0..n {
            out[off + j] += frame[j].re / n as f64 * window[j];
            norm[off + j] += window[j] * window[j];
        }
        // Advance the phase of the peaks by their instantaneous frequency.
        for &p in &peaks {
            let dphi = wrap(x1[p].arg() - x0[p].arg() - expected[p]);
            acc[p] += expected[p] + dphi;
        }
        // Non-peak accumulators follow their analysis phase so later peaks start coherent.
        for k in 0..bins {
            if !peaks.contains(&k) {
                acc[k] = out_phase[k] + expected[k] + wrap(x1[k].arg() - x0[k].arg() - expected[k]);
            }
        }
    }
    let floor = 1e-3 * norm.iter().cloned().fold(0.0, f64::max);
    let samples: Vec<f32> = (0..target)
        .map(|j| {
            let idx = j + pad;
            if idx < out.len() && norm[idx] > floor {
                (out[idx] / norm[idx]) as f32
            } else {
                0.0
            }
        })
        .collect();
    Waveform::new(samples, w.sample_rate)
}

/// Shift pitch by `semitones`, preserving length exactly.
pub fn pitch_shift(w: &Waveform, semitones: f64) -> Result<Waveform> {
    if semitones.abs() > 12.0 {
        return Err(Error::InvalidArgument(format!("pitch shift {semitones} beyond one octave")));
    }
    if semitones == 0.0 {
        return Ok(w.clone());
    }
    let ratio = 2f64.powf(semitones / 12.0);
    let resampled = resample(w, ratio)?;
    let rate = resampled.len() as f64 / w.len() as f64;
    let stretched = time_stretch(&resampled, rate.clamp(0.5, 2.0))?;
    Ok(stretched.excerpt_padded(0, w.len()))
}

#[derive(Debug, Clone)]
pub struct NoiseMix {
    pub waveform: Waveform,
    pub gain: f64,
    pub offset: usize,
}

/// Adds `noise[offset..offset + clip.len()]` scaled to the target SNR.
pub fn mix_noise_at(clip: &Waveform, noise: &Waveform, offset: usize, snr_db: f64) -> Result<NoiseMix> {
    if offset + clip.len() > noise.len() {
        return Err(Error::InvalidArgument(format!(
            "noise excerpt [{offset}, {}) exceeds {} samples",
            offset + clip.len(),
            noise.len()
        )));
    }
    let excerpt = &noise.samples[offset..offset + clip.len()];
    let p_clip = clip.power();
    let p_noise = crate::audio::mean_square(excerpt);
    if p_clip == 0.0 || p_noise == 0.0 {
        return Err(Error::UndefinedSnr);
    }
    let snr = snr_db.min(MAX_SNR_DB);
    let gain = (p_clip / (p_noise * 10f64.powf(snr / 10.0))).sqrt();
    let samples = clip
        .samples
        .iter()
        .zip(excerpt)
        .map(|(&c, &n)| (c as f64 + gain * n as f64) as f32)
        .collect();
    Ok(NoiseMix { waveform: Waveform::new(samples, clip.sample_rate)?, gain, offset })
}

/// As [`mix_noise_at`] with a uniformly drawn excerpt offset.
pub fn mix_noise<R: Rng>(clip: &Waveform, noise: &Waveform, snr_db: f64, rng: &mut R) -> Result<NoiseMix> {
    if noise.len() < clip.len() {
        return Err(Error::InvalidArgument("noise shorter than clip".into()));
    }
    let offset = rng.random_range(0..=noise.len() - clip.len());
    mix_noise_at(clip, noise, offset, snr_db)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub n_pitch: usize,
    /// Semitones.
    pub pitch_range: (f64, f64),
    pub n_stretch: usize,
    pub stretch_range: (f64, f64),
    /// Per noise source.
    pub n_noise: usize,
    pub snr_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            n_pitch: 4,
            pitch_range: (-1.0, 1.0),
            n_stretch: 4,
            stretch_range: (0.8, 1.25),
            n_noise: 4,
            snr_range: (0.0, 30.0),
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        Self { n_pitch: 0, n_stretch: 0, n_noise: 0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !(ok(self.pitch_range) && ok(self.stretch_range) && ok(self.snr_range)) {
            return Err(Error::Config("augmentation ranges must be finite with lo <= hi".into()));
        }
        if self.stretch_range.0 <= 0.0 {
            return Err(Error::Config("stretch rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    PitchShift,
    TimeStretch,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_clip: String,
    pub effect: Effect,
    pub parameter: f64,
    pub noise_source: Option<String>,
    pub noise_offset: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct NoiseSource {
    pub id: String,
    pub waveform: Waveform,
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub waveform: Waveform,
    pub provenance: Provenance,
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// One-effect variants of a clip: pitch shifts, time stretches, then
/// `n_noise` noise mixes per pool source.
pub fn augment_set(clip_id: &str, clip: &Waveform, spec: &AugmentationSpec, pool: &[NoiseSource]) -> Result<Vec<Variant>> {
    spec.validate()?;
    if spec.n_noise > 0 && pool.is_empty() {
        return Err(Error::InvalidArgument("noise augmentation requested with an empty noise pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut plan = Vec::new();
    for _ in 0..spec.n_pitch {
        plan.push((Effect::PitchShift, uniform(&mut rng, spec.pitch_range), None, None));
    }
    for _ in 0..spec.n_stretch {
        plan.push((Effect::TimeStretch, uniform(&mut rng, spec.stretch_range), None, None));
    }
    if spec.n_noise > 0 {
        for (si, src) in pool.iter().enumerate() {
            if src.waveform.len() < clip.len() {
                return Err(Error::InvalidArgument(format!("noise source {} shorter than clip", src.id)));
            }
            for _ in 0..spec.n_noise {
                let snr = uniform(&mut rng, spec.snr_range);
                let offset = rng.random_range(0..=src.waveform.len() - clip.len());
                plan.push((Effect::Noise, snr, Some(si), Some(offset)));
            }
        }
    }
    plan.into_par_iter()
        .map(|(effect, parameter, source, offset)| {
            let waveform = match effect {
                Effect::PitchShift => pitch_shift(clip, parameter)?,
                Effect::TimeStretch => time_stretch(clip, parameter)?,
                Effect::Noise => mix_noise_at(clip, &pool[source.unwrap()].waveform, offset.unwrap(), parameter)?.waveform,
            };
            Ok(Variant {
                waveform,
                provenance: Provenance {
                    source_clip: clip_id.to_string(),
                    effect,
                    parameter,
                    noise_source: source.map(|s| pool[s].id.clone()),
                    noise_offset: offset,
                    seed: spec.seed,
                },
            })
        })
        .collect()
}
