//! Sliding-window detection over continuous recordings.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform};
use crate::context::{context_tensor, ContextConfig, ContextSlice, ContextTensor};
use crate::error::{Error, Result};
use crate::frontend::{FrontendConfig, TimeFrequencyMatrix};
use crate::network::{predict, ClipPatch, DetectorParams};

pub const CLIP_DURATION: f64 = 0.150;
pub const EDF_HOP: f64 = 0.050;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub confidence: f64,
    /// Dominant frequency, for reference annotations that carry one.
    #[serde(default)]
    pub freq_hz: Option<f64>,
}

impl Event {
    pub fn at(time: f64) -> Self {
        Self { time, confidence: 1.0, freq_hz: None }
    }
}

/// Events sorted by strictly increasing time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventList {
    pub events: Vec<Event>,
    #[serde(default)]
    pub sensor: Option<String>,
}

impl EventList {
    /// Sorts by time; rejects duplicate times and confidences outside (0, 1].
    pub fn new(mut events: Vec<Event>) -> Result<Self> {
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        for w in events.windows(2) {
            if w[1].time <= w[0].time {
                return Err(Error::InvalidArgument(format!("duplicate event time {}", w[0].time)));
            }
        }
        if let Some(e) = events.iter().find(|e| !(e.confidence > 0.0 && e.confidence <= 1.0) || !e.time.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid event {e:?}")));
        }
        Ok(Self { events, sensor: None })
    }

    pub fn from_times(times: &[f64]) -> Result<Self> {
        Self::new(times.iter().map(|&t| Event::at(t)).collect())
    }

    pub fn with_sensor(mut self, sensor: impl Into<String>) -> Self {
        self.sensor = Some(sensor.into());
        self
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.time).collect()
    }
}

/// Probability of presence sampled every `hop` seconds; value `i` belongs
/// to time `start_time + hop * i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventDetectionFunction {
    pub values: Vec<f64>,
    pub hop: f64,
    pub start_time: f64,
}

impl EventDetectionFunction {
    pub fn frame_rate(&self) -> f64 {
        1.0 / self.hop
    }

    pub fn time(&self, i: usize) -> f64 {
        self.start_time + self.hop * i as f64
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Number of 150 ms windows at a 50 ms hop that fit in `duration`.
pub fn edf_len(duration: f64) -> usize {
    if duration + 1e-9 < CLIP_DURATION {
        0
    } else {
        ((duration - CLIP_DURATION) / EDF_HOP + 1e-9).floor() as usize + 1
    }
}

/// First feature frame of a `frames`-long patch centered on `center` seconds.
pub fn patch_start(features: &TimeFrequencyMatrix, win_length: usize, frames: usize, center: f64) -> i64 {
    let hop = features.hop_length as f64;
    let c = center * features.sample_rate as f64;
    ((c - win_length as f64 / 2.0) / hop - (frames as f64 - 1.0) / 2.0).round() as i64
}

/// Extracts a patch of `frames` frames; frames outside the matrix take
/// `pad` in every band.
pub fn extract_patch(features: &TimeFrequencyMatrix, start: i64, frames: usize, pad: f64) -> ClipPatch {
    let nb = features.n_bands;
    let mut values = vec![pad; frames * nb];
    for i in 0..frames {
        let t = start + i as i64;
        if t >= 0 && (t as usize) < features.n_frames {
            values[i * nb..(i + 1) * nb].copy_from_slice(features.frame(t as usize));
        }
    }
    ClipPatch { values, frames, bands: nb }
}

/// Features and context of one recording, ready for clip extraction.
#[derive(Debug, Clone)]
pub struct FeatureTrack {
    pub features: TimeFrequencyMatrix,
    pub context: ContextTensor,
    pub duration: f64,
    pub win_length: usize,
    pub pad: f64,
}

impl FeatureTrack {
    pub fn compute(w: &Waveform, frontend: &FrontendConfig, context: &ContextConfig) -> Result<Self> {
        let features = frontend.features(w)?;
        let context = context_tensor(&features, context)?;
        Ok(Self {
            features,
            context,
            duration: w.duration(),
            win_length: frontend.spectrogram.win_length,
            pad: frontend.compression.silence_value(),
        })
    }

    pub fn patch(&self, center: f64, frames: usize) -> ClipPatch {
        let start = patch_start(&self.features, self.win_length, frames, center);
        extract_patch(&self.features, start, frames, self.pad)
    }

    pub fn context_at(&self, t: f64) -> ContextSlice {
        self.context.context_at(t)
    }

    fn check(&self, params: &DetectorParams) -> Result<()> {
        let g = &params.geometry;
        if self.features.n_bands != g.bands {
            return Err(Error::DimensionMismatch {
                expected: format!("{} bands x {} frames (checkpoint geometry)", g.bands, g.frames),
                actual: format!("{} bands (features)", self.features.n_bands),
            });
        }
        if params.formulation.uses_context()
            && (self.context.n_quantiles, self.context.n_bands) != (g.context_quantiles, g.context_bands)
        {
            return Err(Error::mismatch(
                (g.context_quantiles, g.context_bands),
                (self.context.n_quantiles, self.context.n_bands),
            ));
        }
        Ok(())
    }

    /// Detection function over the whole track.
    pub fn edf(&self, params: &DetectorParams) -> Result<EventDetectionFunction> {
        params.validate()?;
        self.check(params)?;
        let n = edf_len(self.duration);
        if n == 0 {
            return Err(Error::InputTooShort(format!(
                "{:.3} s recording, need at least {CLIP_DURATION} s",
                self.duration
            )));
        }
        let start_time = CLIP_DURATION / 2.0;
        let values = (0..n)
            .into_par_iter()
            .map(|i| {
                let t = start_time + EDF_HOP * i as f64;
                let patch = self.patch(t, params.geometry.frames);
                predict(&patch, &self.context_at(t), params)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(EventDetectionFunction { values, hop: EDF_HOP, start_time })
    }
}

/// Runs the frontend, the context summary and the detector over a recording.
pub fn compute_edf(
    recording: &Waveform,
    params: &DetectorParams,
    frontend: &FrontendConfig,
    context: &ContextConfig,
) -> Result<EventDetectionFunction> {
    if recording.duration() + 1e-9 < CLIP_DURATION {
        return Err(Error::InputTooShort(format!(
            "{:.3} s recording, need at least {CLIP_DURATION} s",
            recording.duration()
        )));
    }
    FeatureTrack::compute(recording, frontend, context)?.edf(params)
}

/// Local maxima above `tau`. A plateau of equal maximal values yields one
/// peak at its first frame. With `min_lag > 0`, peaks are accepted in
/// order of decreasing height (ties: earlier first) unless closer than
/// `min_lag` to an accepted peak.
pub fn peak_pick(edf: &EventDetectionFunction, tau: f64, min_lag: f64) -> Result<EventList> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {tau} outside (0,1)")));
    }
    let v = &edf.values;
    let n = v.len();
    let mut peaks = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[j + 1] == v[i] {
            j += 1;
        }
        let left_ok = i == 0 || v[i - 1] < v[i];
        let right_ok = j + 1 == n || v[j + 1] < v[i];
        if left_ok && right_ok && v[i] > tau {
            peaks.push(i);
        }
        i = j + 1;
    }
    if min_lag > 0.0 {
        let lag_frames = (min_lag / edf.hop - 1e-9).ceil() as usize;
        let mut order = peaks.clone();
        order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        let mut kept: Vec<usize> = Vec::new();
        for p in order {
            if kept.iter().all(|&k| k.abs_diff(p) >= lag_frames) {
                kept.push(p);
            }
        }
        kept.sort_unstable();
        peaks = kept;
    }
    EventList::new(
        peaks
            .into_iter()
            .map(|i| Event { time: edf.time(i), confidence: v[i], freq_hz: None })
            .collect(),
    )
}

/// File name encoding an event's timestamp and confidence.
pub fn clip_file_name(e: &Event) -> String {
    format!("event_t{:010.3}_c{:.6}.wav", e.time, e.confidence)
}

/// Writes one WAV per event covering `[t - half_width, t + half_width)`,
/// zero-padded beyond the recording.
pub fn export_clips(
    recording: &Waveform,
    events: &EventList,
    half_width: f64,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if !events.is_empty() {
        std::fs::create_dir_all(dir)?;
    }
    let sr = recording.sample_rate as f64;
    let len = (2.0 * half_width * sr).floor() as usize;
    events
        .events
        .iter()
        .map(|e| {
            let start = ((e.time - half_width) * sr).floor() as i64;
            let clip = recording.excerpt_padded(start, len);
            let path = dir.join(clip_file_name(e));
            write_wav(&path, &clip)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{Compression, PcenParams};
    use crate::network::{Formulation, Geometry};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn edf(values: Vec<f64>) -> EventDetectionFunction {
        EventDetectionFunction { values, hop: EDF_HOP, start_time: 0.075 }
    }

    #[test]
    fn edf_length_formula() {
        assert_eq!(edf_len(10.0), 198);
        assert_eq!(edf_len(0.15), 1);
        assert_eq!(edf_len(0.149), 0);
    }

    #[test]
    fn silent_recording_with_zero_static_params() {
        let fe = FrontendConfig::desk(Compression::pcen(PcenParams::OUTDOOR));
        let params = DetectorParams::zeros(Geometry::desk(), Formulation::Static).unwrap();
        let w = Waveform::silence(22050 * 2, 22050);
        let ctx = ContextConfig::default();
        let e = compute_edf(&w, &params, &fe, &ctx).unwrap();
        assert_eq!(e.len(), edf_len(2.0));
        assert!(e.values.iter().all(|&v| v == 0.5));
        for i in 0..e.len() {
            assert_eq!(e.time(i), 0.075 + 0.05 * i as f64);
        }
    }

    #[test]
    fn too_short_recording() {
        let fe = FrontendConfig::desk(Compression::Logmel);
        let params = DetectorParams::zeros(Geometry::desk(), Formulation::Static).unwrap();
        let err = compute_edf(&Waveform::silence(3000, 22050), &params, &fe, &ContextConfig::default()).unwrap_err();
        assert!(err.to_string().contains("input too short"));
    }

    #[test]
    fn edf_frames_equal_clip_predictions() {
        let fe = FrontendConfig::desk(Compression::pcen(PcenParams::OUTDOOR));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = DetectorParams::init(Geometry::desk(), Formulation::At, &mut rng).unwrap();
        let samples: Vec<f32> = (0..22050 * 3).map(|i| ((i as f32) * 0.37).sin() * 0.1 * ((i % 97) as f32 / 97.0)).collect();
        let w = Waveform::new(samples, 22050).unwrap();
        let ctx = ContextConfig { window: 2.0, period: 1.0, ..Default::default() };
        let e = compute_edf(&w, &params, &fe, &ctx).unwrap();
        // Manual slicing of an independently computed feature matrix.
        let feats = fe.features(&w).unwrap();
        let ct = context_tensor(&feats, &ctx).unwrap();
        for i in [0usize, 7, e.len() - 1] {
            let t = 0.075 + 0.05 * i as f64;
            let start = ((t * 22050.0 - 128.0) / 64.0 - 25.5).round() as i64;
            let mut vals = Vec::new();
            for f in 0..52 {
                let fr = start + f;
                for b in 0..64 {
                    vals.push(if fr < 0 || fr as usize >= feats.n_frames { 0.0 } else { feats.get(fr as usize, b) });
                }
            }
            let patch = ClipPatch::new(vals, 52, 64).unwrap();
            let y = predict(&patch, &ct.context_at(t), &params).unwrap();
            assert!((y - e.values[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn geometry_mismatch_is_reported() {
        let fe = FrontendConfig::default();
        let params = DetectorParams::zeros(Geometry::desk(), Formulation::Static).unwrap();
        let err = compute_edf(&Waveform::silence(22050, 22050), &params, &fe, &ContextConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("64 bands") && msg.contains("128 bands"), "{msg}");
    }

    #[test]
    fn triangular_bump_single_event() {
        let e = edf(vec![0.1, 0.3, 0.6, 0.9, 0.6, 0.3, 0.1]);
        let ev = peak_pick(&e, 0.5, 0.0).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev.events[0].time, e.time(3));
        assert_eq!(ev.events[0].confidence, 0.9);
    }

    #[test]
    fn suppression_keeps_higher_peak() {
        // Peaks 100 ms apart.
        let e = edf(vec![0.1, 0.8, 0.2, 0.9, 0.1]);
        let all = peak_pick(&e, 0.5, 0.0).unwrap();
        assert_eq!(all.len(), 2);
        let kept = peak_pick(&e, 0.5, 0.150).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.events[0].confidence, 0.9);
    }

    #[test]
    fn high_threshold_empty_and_plateau_rule() {
        let e = edf(vec![0.2, 0.9, 0.9, 0.9, 0.2, 0.7, 0.7]);
        assert!(peak_pick(&e, 0.99, 0.0).unwrap().is_empty());
        let ev = peak_pick(&e, 0.5, 0.0).unwrap();
        assert_eq!(ev.times(), vec![e.time(1), e.time(5)]);
        assert!(peak_pick(&e, 1.0, 0.0).is_err());
    }

    #[test]
    fn export_clip_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<f32> = (0..22050 * 2).map(|i| i as f32 / 44100.0).collect();
        let w = Waveform::new(samples, 22050).unwrap();
        assert!(export_clips(&w, &EventList::default(), 0.075, dir.path().join("none")).unwrap().is_empty());
        let events = EventList::new(vec![
            Event { time: 0.010, confidence: 0.5, freq_hz: None },
            Event { time: 1.0, confidence: 0.95, freq_hz: None },
        ])
        .unwrap();
        let paths = export_clips(&w, &events, 0.075, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let early = crate::audio::read_wav(&paths[0]).unwrap();
        let one = crate::audio::read_wav(&paths[1]).unwrap();
        assert_eq!(one.len(), 3307);
        assert_eq!(early.len(), 3307);
        // [0.925 s, 1.075 s) starts at sample floor(0.925 * 22050) = 20396.
        assert_eq!(one.samples[0], w.samples[20396]);
        let lead = (0.065f64 * 22050.0).ceil() as usize;
        assert!(early.samples[..lead].iter().all(|&s| s == 0.0));
        assert!(paths[1].file_name().unwrap().to_str().unwrap().ends_with("event_t000001.000_c0.950000.wav"));
    }

    proptest! {
        #[test]
        fn threshold_subsets_and_min_lag(values in prop::collection::vec(0.001f64..0.999, 3..300), t1 in 0.01f64..0.5, dt in 0.0f64..0.49) {
            let e = edf(values);
            let t2 = t1 + dt;
            let a = peak_pick(&e, t1, 0.0).unwrap().times();
            let b = peak_pick(&e, t2, 0.0).unwrap().times();
            prop_assert!(b.len() <= a.len());
            prop_assert!(b.iter().all(|t| a.contains(t)));
            let lagged = peak_pick(&e, t1, 0.150).unwrap().times();
            for w in lagged.windows(2) {
                prop_assert!(w[1] - w[0] >= 0.150 - 1e-9);
            }
        }
    }
}
