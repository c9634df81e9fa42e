//! Synthetic multi-sensor night recordings with known call positions.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::detector::{Event, EventList, FeatureTrack, CLIP_DURATION};
use crate::error::{Error, Result};
use crate::network::{Example, Geometry};

const SYNTH_FRAME: usize = 1024;
const SYNTH_HOP: usize = SYNTH_FRAME / 2;
/// Relative offsets of the tones in an insect cluster.
const CLUSTER: [f64; 3] = [0.985, 1.0, 1.012];
const HARMONIC_AMPLITUDE: f64 = 0.5;
/// Minimum distance of a negative clip from any event.
pub const NEGATIVE_CLEARANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeciesBand {
    Low,
    High,
}

impl SpeciesBand {
    pub fn range(self) -> (f64, f64) {
        match self {
            SpeciesBand::Low => (2000.0, 5000.0),
            SpeciesBand::High => (5000.0, 10000.0),
        }
    }

    /// Sweep endpoints stay inside the band by this fraction of its width.
    fn inset(self) -> (f64, f64) {
        let (lo, hi) = self.range();
        let m = 0.12 * (hi - lo);
        (lo + m, hi - m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorProfile {
    pub id: String,
    /// Noise gains in dB at equally spaced anchors from 0 Hz to Nyquist.
    pub band_gains_db: Vec<f64>,
    pub insect_center_hz: f64,
    /// Frequency multiplier of the harmonic partial.
    pub insect_harmonic: f64,
    /// Insect power relative to the broadband noise power.
    pub insect_level_db: f64,
    /// Insect pulse rate (Hz).
    pub insect_pulse_hz: f64,
    /// Broadband noise level at the start, dB re full scale.
    pub initial_spl_db: f64,
    /// Level drop over the whole recording.
    pub decay_db: f64,
    /// Mean number of wind gusts per second.
    #[serde(default)]
    pub gust_rate: f64,
    /// Peak level boost of the strongest gusts.
    #[serde(default)]
    pub gust_depth_db: f64,
    pub seed: u64,
}

impl SensorProfile {
    /// A randomized profile; distinct seeds give distinct sites.
    pub fn random(id: impl Into<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tilt = rng.random_range(-24.0..6.0);
        let rumble = rng.random_range(0.0..20.0);
        let bump_at = rng.random_range(0.1..0.9);
        let bump = rng.random_range(-6.0..12.0);
        let band_gains_db = (0..17)
            .map(|i| {
                let x = i as f64 / 16.0;
                tilt * x + rumble * (-x * 12.0).exp() + bump * (-((x - bump_at) / 0.1).powi(2)).exp()
                    + rng.random_range(-2.0..2.0)
            })
            .collect();
        Self {
            id: id.into(),
            band_gains_db,
            insect_center_hz: rng.random_range(2500.0..4800.0),
            insect_harmonic: 2.0,
            insect_level_db: rng.random_range(-12.0..0.0),
            insect_pulse_hz: rng.random_range(20.0..60.0),
            initial_spl_db: rng.random_range(-50.0..-30.0),
            decay_db: rng.random_range(6.0..14.0),
            gust_rate: rng.random_range(0.02..0.08),
            gust_depth_db: rng.random_range(10.0..25.0),
            seed: rng.random(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.band_gains_db.len() < 2 || self.band_gains_db.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config(format!("sensor {}: need >= 2 finite band gains", self.id)));
        }
        if !(self.insect_center_hz > 0.0 && self.decay_db.is_finite() && self.initial_spl_db.is_finite()) {
            return Err(Error::Config(format!("sensor {}: invalid profile", self.id)));
        }
        Ok(())
    }

    /// Linear amplitude gain of synthesis bin `k` (of `SYNTH_FRAME`).
    fn bin_gain(&self, k: usize) -> f64 {
        let g = &self.band_gains_db;
        let x = k as f64 / (SYNTH_FRAME / 2) as f64 * (g.len() - 1) as f64;
        let i = (x.floor() as usize).min(g.len() - 2);
        let a = x - i as f64;
        let db = (1.0 - a) * g[i] + a * g[i + 1];
        10f64.powf(db / 20.0)
    }

    /// Broadband noise level (dB) at time `t` of a recording of `duration`.
    pub fn level_db(&self, t: f64, duration: f64) -> f64 {
        self.initial_spl_db - self.decay_db * (t / duration).clamp(0.0, 1.0)
    }

    fn tones(&self, sample_rate: u32) -> Vec<(f64, f64)> {
        let nyq = sample_rate as f64 / 2.0;
        let mut t: Vec<(f64, f64)> = CLUSTER.iter().map(|&o| (self.insect_center_hz * o, 1.0)).collect();
        t.extend(CLUSTER.iter().map(|&o| (self.insect_center_hz * self.insect_harmonic * o, HARMONIC_AMPLITUDE)));
        t.retain(|&(f, _)| f < nyq);
        t
    }

    /// Background power in `[lo, hi)` Hz at time `t`, excluding gusts.
    pub fn band_power(&self, lo: f64, hi: f64, t: f64, duration: f64, sample_rate: u32) -> f64 {
        let bin_hz = sample_rate as f64 / SYNTH_FRAME as f64;
        let (mut inside, mut total) = (0.0, 0.0);
        for k in 1..SYNTH_FRAME / 2 {
            let g2 = self.bin_gain(k).powi(2);
            total += g2;
            let f = k as f64 * bin_hz;
            if f >= lo && f < hi {
                inside += g2;
            }
        }
        let tones = self.tones(sample_rate);
        let tone_total: f64 = tones.iter().map(|(_, a)| a * a).sum();
        let tone_in: f64 = tones.iter().filter(|(f, _)| *f >= lo && *f < hi).map(|(_, a)| a * a).sum();
        let insect = 10f64.powf(self.insect_level_db / 10.0);
        let tonal = if tone_total > 0.0 { insect * tone_in / tone_total } else { 0.0 };
        10f64.powf(self.level_db(t, duration) / 10.0) * (inside / total + tonal)
    }
}

/// Intermittent broadband level boosts (dB) as a sum of raised-cosine bumps.
struct Gusts {
    bumps: Vec<(f64, f64, f64)>,
}

impl Gusts {
    fn new<R: Rng>(profile: &SensorProfile, duration: f64, rng: &mut R) -> Self {
        let mut bumps = Vec::new();
        if profile.gust_rate > 0.0 && profile.gust_depth_db > 0.0 {
            let mut t = 0.0;
            loop {
                t += -rng.random::<f64>().max(1e-12).ln() / profile.gust_rate;
                if t >= duration {
                    break;
                }
                let half = rng.random_range(0.5..2.0);
                let height = profile.gust_depth_db * rng.random_range(0.3..1.0);
                bumps.push((t, half, height));
            }
        }
        Self { bumps }
    }

    fn gain_db(&self, t: f64) -> f64 {
        self.bumps
            .iter()
            .filter(|(c, h, _)| (t - c).abs() < *h)
            .map(|(c, h, a)| a * (0.5 + 0.5 * (PI * (t - c) / h).cos()))
            .sum()
    }
}

fn pulse_envelope(t: f64, rate: f64, phase: f64) -> f64 {
    (0.5 + 0.5 * (2.0 * PI * rate * t + phase).sin()).powi(2)
}

/// Shaped noise with intermittent gusts plus pulsed tonal insect clusters,
/// decaying linearly in dB.
pub fn synth_background(profile: &SensorProfile, duration: f64, sample_rate: u32) -> Result<Waveform> {
    profile.validate()?;
    if !(duration > 0.0) {
        return Err(Error::InvalidArgument(format!("duration {duration}")));
    }
    let n = (duration * sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let gusts = Gusts::new(profile, duration, &mut rng);
    let gains: Vec<f64> = (0..=SYNTH_FRAME / 2).map(|k| profile.bin_gain(k)).collect();
    let sum_g2: f64 = gains[1..SYNTH_FRAME / 2].iter().map(|g| g * g).sum();
    // Unit-power frames: E[x^2] = 2 * sum(g^2) * c^2 / N^2.
    let unit = SYNTH_FRAME as f64 / (2.0 * sum_g2).sqrt();
    let window: Vec<f64> = (0..SYNTH_FRAME)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / SYNTH_FRAME as f64).cos()).sqrt())
        .collect();
    let ifft = FftPlanner::new().plan_fft_inverse(SYNTH_FRAME);
    let mut out = vec![0.0f32; n];
    let n_frames = n / SYNTH_HOP + 2;
    let mut buf = vec![Complex64::new(0.0, 0.0); SYNTH_FRAME];
    for f in 0..n_frames {
        let start = f as i64 * SYNTH_HOP as i64 - SYNTH_HOP as i64;
        let centre = (start as f64 + SYNTH_FRAME as f64 / 2.0) / sample_rate as f64;
        let amp = 10f64.powf((profile.level_db(centre, duration) + gusts.gain_db(centre)) / 20.0) * unit;
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for k in 1..SYNTH_FRAME / 2 {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            let c = Complex64::new(re, im) * (gains[k] * amp / 2f64.sqrt());
            buf[k] = c;
            buf[SYNTH_FRAME - k] = c.conj();
        }
        ifft.process(&mut buf);
        for i in 0..SYNTH_FRAME {
            let j = start + i as i64;
            if j >= 0 && (j as usize) < n {
                out[j as usize] += (buf[i].re / SYNTH_FRAME as f64 * window[i]) as f32;
            }
        }
    }
    // Tonal clusters with a pulsed envelope, normalized to the insect level.
    let tones = profile.tones(sample_rate);
    if !tones.is_empty() {
        let phase0: f64 = rng.random_range(0.0..2.0 * PI);
        let phases: Vec<f64> = tones.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let env_ms: f64 = (0..1000).map(|i| pulse_envelope(i as f64 / 1000.0, 1.0, 0.0).powi(2)).sum::<f64>() / 1000.0;
        let tone_power: f64 = tones.iter().map(|(_, a)| a * a / 2.0).sum::<f64>() * env_ms;
        let scale = (10f64.powf(profile.insect_level_db / 10.0) / tone_power).sqrt();
        let sr = sample_rate as f64;
        out.par_chunks_mut(4096).enumerate().for_each(|(c, chunk)| {
            for (i, o) in chunk.iter_mut().enumerate() {
                let t = (c * 4096 + i) as f64 / sr;
                let lvl = 10f64.powf(profile.level_db(t, duration) / 20.0) * scale;
                let env = pulse_envelope(t, profile.insect_pulse_hz, phase0);
                let s: f64 = tones
                    .iter()
                    .zip(&phases)
                    .map(|(&(f, a), &p)| a * (2.0 * PI * f * t + p).sin())
                    .sum();
                *o += (lvl * env * s) as f32;
            }
        });
    }
    Waveform::new(out, sample_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallSpec {
    pub band: SpeciesBand,
    pub f_start: f64,
    pub f_end: f64,
    pub duration: f64,
}

impl CallSpec {
    pub fn random<R: Rng>(band: SpeciesBand, rng: &mut R) -> Self {
        let (lo, hi) = band.inset();
        let a = rng.random_range(lo..hi);
        let b = rng.random_range(lo..hi);
        let duration = rng.random_range(0.05..0.15);
        Self { band, f_start: a, f_end: b, duration }
    }

    pub fn mean_freq(&self) -> f64 {
        0.5 * (self.f_start + self.f_end)
    }
}

/// Hann-windowed linear FM sweep of unit peak amplitude.
pub fn render_call(call: &CallSpec, sample_rate: u32) -> Waveform {
    let sr = sample_rate as f64;
    let n = (call.duration * sr).round() as usize;
    let k = (call.f_end - call.f_start) / call.duration;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let w = 0.5 - 0.5 * (2.0 * PI * (i as f64 + 0.5) / n as f64).cos();
            (w * (2.0 * PI * (call.f_start * t + 0.5 * k * t * t)).sin()) as f32
        })
        .collect();
    Waveform { samples, sample_rate }
}

/// A random call in `band` (50–150 ms), fully determined by `seed`.
pub fn synth_call(band: SpeciesBand, seed: u64, sample_rate: u32) -> (CallSpec, Waveform) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = CallSpec::random(band, &mut rng);
    (spec, render_call(&spec, sample_rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NightSpec {
    pub duration: f64,
    pub sample_rate: u32,
    pub sensors: Vec<SensorProfile>,
    pub calls_per_sensor: usize,
    /// Call density grows as `1 + density_slope * t / duration`.
    pub density_slope: f64,
    /// Minimum distance between call centers.
    pub min_gap: f64,
    pub snr_range: (f64, f64),
    /// Probability of a call being in the low band.
    pub low_band_fraction: f64,
    pub seed: u64,
}

impl NightSpec {
    /// Six sensors, 20 minutes and 200 calls each.
    pub fn desk(seed: u64) -> Self {
        Self::with_size(6, 1200.0, 200, seed)
    }

    pub fn with_size(n_sensors: usize, duration: f64, calls: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sensors = (0..n_sensors)
            .map(|i| SensorProfile::random(format!("S{}", i + 1), rng.random()))
            .collect();
        Self {
            duration,
            sample_rate: DEFAULT_SAMPLE_RATE,
            sensors,
            calls_per_sensor: calls,
            density_slope: 2.0,
            min_gap: 1.0,
            snr_range: (-5.0, 15.0),
            low_band_fraction: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config("night duration and sample rate must be positive".into()));
        }
        if self.density_slope < 0.0 || self.min_gap < 0.0 || self.snr_range.0 > self.snr_range.1 {
            return Err(Error::Config("invalid density slope, gap or SNR range".into()));
        }
        let mut ids: Vec<&str> = self.sensors.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.sensors.len() {
            return Err(Error::Config("sensor ids must be unique".into()));
        }
        self.sensors.iter().try_for_each(|s| s.validate())
    }
}

#[derive(Debug, Clone)]
pub struct SensorNight {
    pub id: String,
    pub waveform: Waveform,
    pub reference: EventList,
    pub calls: Vec<(f64, CallSpec, f64)>,
}

/// Inverse CDF of the density `1 + s u` on `[0, 1]`.
fn density_quantile(p: f64, s: f64) -> f64 {
    if s == 0.0 {
        p
    } else {
        ((1.0 + 2.0 * s * p * (1.0 + s / 2.0)).sqrt() - 1.0) / s
    }
}

/// Call centers drawn from the increasing density, at least `min_gap` apart.
pub fn sample_call_times<R: Rng>(spec: &NightSpec, rng: &mut R) -> Result<Vec<f64>> {
    let margin = 0.5f64.max(spec.min_gap / 2.0);
    let span = spec.duration - 2.0 * margin;
    if spec.calls_per_sensor == 0 {
        return Ok(Vec::new());
    }
    if span <= 0.0 || spec.calls_per_sensor as f64 * spec.min_gap > span {
        return Err(Error::Placement(format!(
            "{} calls with {} s gaps do not fit in {} s",
            spec.calls_per_sensor, spec.min_gap, spec.duration
        )));
    }
    let mut times: Vec<f64> = Vec::with_capacity(spec.calls_per_sensor);
    let budget = 1000 * spec.calls_per_sensor;
    let mut attempts = 0;
    while times.len() < spec.calls_per_sensor {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Placement(format!(
                "placed only {} of {} calls",
                times.len(),
                spec.calls_per_sensor
            )));
        }
        let t = margin + span * density_quantile(rng.random::<f64>(), spec.density_slope);
        let pos = times.partition_point(|&x| x < t);
        let clear = |i: usize| (times[i] - t).abs() >= spec.min_gap;
        if (pos == 0 || clear(pos - 1)) && (pos == times.len() || clear(pos)) {
            times.insert(pos, t);
        }
    }
    Ok(times)
}

fn synth_sensor(spec: &NightSpec, index: usize) -> Result<SensorNight> {
    let profile = &spec.sensors[index];
    let sr = spec.sample_rate;
    let mut waveform = synth_background(profile, spec.duration, sr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ profile.seed.rotate_left(17) ^ (index as u64 + 1));
    let times = sample_call_times(spec, &mut rng)?;
    let mut calls = Vec::with_capacity(times.len());
    let mut events = Vec::with_capacity(times.len());
    for &t in &times {
        let band = if rng.random::<f64>() < spec.low_band_fraction { SpeciesBand::Low } else { SpeciesBand::High };
        let call = CallSpec::random(band, &mut rng);
        let snr = if spec.snr_range.0 == spec.snr_range.1 {
            spec.snr_range.0
        } else {
            rng.random_range(spec.snr_range.0..spec.snr_range.1)
        };
        let (lo, hi) = band.range();
        let p_bg = profile.band_power(lo, hi, t, spec.duration, sr);
        let shape = render_call(&call, sr);
        let gain = (p_bg * 10f64.powf(snr / 10.0) / shape.power()).sqrt();
        let start = (t * sr as f64).round() as i64 - shape.len() as i64 / 2;
        for (i, &s) in shape.samples.iter().enumerate() {
            let j = start + i as i64;
            if j >= 0 && (j as usize) < waveform.len() {
                waveform.samples[j as usize] += (gain * s as f64) as f32;
            }
        }
        calls.push((t, call, snr));
        events.push(Event { time: t, confidence: 1.0, freq_hz: Some(call.mean_freq()) });
    }
    Ok(SensorNight {
        id: profile.id.clone(),
        waveform,
        reference: EventList::new(events)?.with_sensor(profile.id.clone()),
        calls,
    })
}

/// Every sensor's recording and reference list.
pub fn synth_night(spec: &NightSpec) -> Result<Vec<SensorNight>> {
    spec.validate()?;
    (0..spec.sensors.len()).into_par_iter().map(|i| synth_sensor(spec, i)).collect()
}

/// One sensor of the night, for callers that stream sensors one at a time.
pub fn synth_night_sensor(spec: &NightSpec, index: usize) -> Result<SensorNight> {
    spec.validate()?;
    if index >= spec.sensors.len() {
        return Err(Error::InvalidArgument(format!("sensor index {index} of {}", spec.sensors.len())));
    }
    synth_sensor(spec, index)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipLabel {
    pub time: f64,
    pub label: bool,
    pub freq_hz: Option<f64>,
}

/// Positives at every reference event and `negatives_per_positive` random
/// negatives per positive, each at least 500 ms from any event.
pub fn sample_clips<R: Rng>(
    reference: &EventList,
    duration: f64,
    negatives_per_positive: usize,
    rng: &mut R,
) -> Result<Vec<ClipLabel>> {
    let half = CLIP_DURATION / 2.0;
    let times = reference.times();
    let mut clips: Vec<ClipLabel> =
        reference.events.iter().map(|e| ClipLabel { time: e.time, label: true, freq_hz: e.freq_hz }).collect();
    let wanted = negatives_per_positive * reference.len();
    let (lo, hi) = (half, duration - half);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < wanted {
        attempts += 1;
        if attempts > 1000 * wanted.max(1) || hi <= lo {
            return Err(Error::Placement(format!("found only {placed} of {wanted} negative clips")));
        }
        let t = rng.random_range(lo..hi);
        let pos = times.partition_point(|&x| x < t);
        let far = |i: usize| (times[i] - t).abs() >= NEGATIVE_CLEARANCE;
        if (pos == 0 || far(pos - 1)) && (pos == times.len() || far(pos)) {
            clips.push(ClipLabel { time: t, label: false, freq_hz: None });
            placed += 1;
        }
    }
    Ok(clips)
}

#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub sensor: String,
    pub time: f64,
    pub freq_hz: Option<f64>,
    pub example: Example,
}

/// Feature patches and context slices for sampled clips of one sensor.
pub fn build_clip_dataset(
    sensor: &str,
    track: &FeatureTrack,
    reference: &EventList,
    geometry: &Geometry,
    negatives_per_positive: usize,
    seed: u64,
) -> Result<Vec<LabeledClip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clips = sample_clips(reference, track.duration, negatives_per_positive, &mut rng)?;
    Ok(clips
        .into_par_iter()
        .map(|c| LabeledClip {
            sensor: sensor.to_string(),
            time: c.time,
            freq_hz: c.freq_hz,
            example: Example {
                patch: track.patch(c.time, geometry.frames),
                context: track.context_at(c.time),
                label: c.label,
            },
        })
        .collect())
}
