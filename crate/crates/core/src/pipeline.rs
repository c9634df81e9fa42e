//! Run configuration and end-to-end workflows: dataset synthesis, fold
//! training, detection, evaluation and the cross-sensor study.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::{read_wav, write_wav, Waveform};
use crate::context::ContextConfig;
use crate::detector::{peak_pick, EventDetectionFunction, EventList, FeatureTrack};
use crate::error::{Error, Result};
use crate::evaluator::{
    default_thresholds, make_folds, pr_curve, FoldSpec, PrCurve, DEFAULT_BAND_SPLIT, DEFAULT_SEGMENT,
    DEFAULT_TOLERANCE,
};
use crate::frontend::{Compression, FrontendConfig, PcenParams};
use crate::io::{read_events, write_references, Checkpoint};
use crate::network::{train, DetectorParams, Example, Formulation, Geometry, TrainConfig, TrainingHistory};
use crate::synthdata::{build_clip_dataset, synth_night_sensor, NightSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub threshold: f64,
    pub min_lag: f64,
    pub clip_half_width: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self { threshold: 0.5, min_lag: 0.150, clip_half_width: 0.075 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tolerance: f64,
    pub n_thresholds: usize,
    /// Peak-picking minimum lag used while sweeping thresholds.
    pub min_lag: f64,
    pub segment: f64,
    pub band_split: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            n_thresholds: 100,
            min_lag: 0.150,
            segment: DEFAULT_SEGMENT,
            band_split: DEFAULT_BAND_SPLIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub frontend: FrontendConfig,
    pub context: ContextConfig,
    pub geometry: Geometry,
    pub formulation: Formulation,
    pub train: TrainConfig,
    pub detection: DetectionConfig,
    pub evaluation: EvalConfig,
    pub negatives_per_positive: usize,
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
}

impl Default for PipelineConfig {
    /// Full-resolution network and frontend.
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            context: ContextConfig::default(),
            geometry: Geometry::full(),
            formulation: Formulation::At,
            train: TrainConfig::default(),
            detection: DetectionConfig::default(),
            evaluation: EvalConfig::default(),
            negatives_per_positive: 1,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Reduced geometry with a context window scaled to short recordings.
    pub fn desk() -> Self {
        Self {
            frontend: FrontendConfig::desk(Compression::pcen(PcenParams::OUTDOOR)),
            context: ContextConfig { window: 120.0, period: 30.0, ..ContextConfig::default() },
            geometry: Geometry::desk(),
            train: TrainConfig { max_epochs: 30, patience: 6, ..TrainConfig::default() },
            evaluation: EvalConfig { segment: 300.0, ..EvalConfig::default() },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected full or desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.frontend.spectrogram.validate()?;
        if let Compression::Pcen { params, .. } = &self.frontend.compression {
            params.validate()?;
        }
        if self.frontend.spectrogram.n_mels != self.geometry.bands {
            return Err(Error::Config(format!(
                "frontend has {} mel bands but the network expects {}",
                self.frontend.spectrogram.n_mels, self.geometry.bands
            )));
        }
        if self.context.levels.len() != self.geometry.context_quantiles || self.context.bands != self.geometry.context_bands {
            return Err(Error::Config(format!(
                "context summary is {}x{} but the network expects {}x{}",
                self.context.levels.len(),
                self.context.bands,
                self.geometry.context_quantiles,
                self.geometry.context_bands
            )));
        }
        let d = &self.detection;
        if !(d.threshold > 0.0 && d.threshold < 1.0) || d.min_lag < 0.0 || d.clip_half_width <= 0.0 {
            return Err(Error::Config("detection threshold must be in (0,1), lags non-negative".into()));
        }
        if self.evaluation.tolerance < 0.0 || self.evaluation.n_thresholds == 0 {
            return Err(Error::Config("evaluation tolerance must be >= 0 with at least one threshold".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `dotted.key=value` overrides; values parse as JSON when
    /// possible and as plain strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut doc;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("{key}: {part} is not inside an object")))?;
                if !obj.contains_key(*part) {
                    return Err(Error::Config(format!("unknown config key {key}")));
                }
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                node = obj.get_mut(*part).unwrap();
            }
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Deterministic child seed for a stage identified by `tags`.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut x = root ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        x = x.wrapping_add(t.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFiles {
    pub id: String,
    pub audio: String,
    pub reference: String,
    pub n_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub spec: NightSpec,
    pub sensors: Vec<SensorFiles>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

/// Writes one WAV and one reference CSV per sensor plus a manifest.
pub fn write_dataset(spec: &NightSpec, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut sensors = Vec::new();
    for i in 0..spec.sensors.len() {
        let night = synth_night_sensor(spec, i)?;
        let audio = format!("{}.wav", night.id);
        let reference = format!("{}_reference.csv", night.id);
        write_wav(dir.join(&audio), &night.waveform)?;
        write_references(dir.join(&reference), &night.reference)?;
        sensors.push(SensorFiles { id: night.id, audio, reference, n_events: night.reference.len() });
    }
    let manifest = DatasetManifest { seed: spec.seed, spec: spec.clone(), sensors };
    std::fs::write(dir.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(dir.as_ref().join(DATASET_MANIFEST))?;
    serde_json::from_str(&text).map_err(|e| Error::UnsupportedFormat(format!("dataset manifest: {e}")))
}

/// Training clips of one sensor, seeded by the root seed and sensor index.
pub fn sensor_examples(
    sensor: &str,
    index: usize,
    waveform: &Waveform,
    reference: &EventList,
    cfg: &PipelineConfig,
) -> Result<Vec<Example>> {
    let track = FeatureTrack::compute(waveform, &cfg.frontend, &cfg.context)?;
    let clips = build_clip_dataset(
        sensor,
        &track,
        reference,
        &cfg.geometry,
        cfg.negatives_per_positive,
        derive_seed(cfg.seed, &[1, index as u64]),
    )?;
    Ok(clips.into_iter().map(|c| c.example).collect())
}

fn dataset_examples(dir: &Path, manifest: &DatasetManifest, ids: &[String], cfg: &PipelineConfig) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for id in ids {
        let (index, files) = manifest
            .sensors
            .iter()
            .enumerate()
            .find(|(_, s)| &s.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("sensor {id} not in dataset")))?;
        let w = read_wav(dir.join(&files.audio))?;
        let reference = read_events(dir.join(&files.reference))?;
        out.extend(sensor_examples(id, index, &w, &reference, cfg)?);
    }
    Ok(out)
}

/// Trains the configured detector on one leave-one-sensor-out fold.
pub fn train_fold(dir: impl AsRef<Path>, cfg: &PipelineConfig, fold: usize) -> Result<(Checkpoint, FoldSpec)> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let manifest = read_dataset(dir)?;
    let ids: Vec<String> = manifest.sensors.iter().map(|s| s.id.clone()).collect();
    let folds = make_folds(&ids)?;
    let spec = folds
        .get(fold)
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} of {}", folds.len())))?;
    let train_set = dataset_examples(dir, &manifest, &spec.train, cfg)?;
    let validation = dataset_examples(dir, &manifest, &spec.validation, cfg)?;
    let tc = TrainConfig { seed: derive_seed(cfg.seed, &[2, fold as u64]), ..cfg.train.clone() };
    let (params, history) = train(&train_set, &validation, cfg.geometry, cfg.formulation, &tc)?;
    Ok((
        Checkpoint { params, frontend: cfg.frontend, context: cfg.context.clone(), seed: cfg.seed, history },
        spec,
    ))
}

/// Detection function and peak-picked events for one recording.
pub fn detect(w: &Waveform, ck: &Checkpoint, det: &DetectionConfig) -> Result<(EventDetectionFunction, EventList)> {
    let track = FeatureTrack::compute(w, &ck.frontend, &ck.context)?;
    let edf = track.edf(&ck.params)?;
    let events = peak_pick(&edf, det.threshold, det.min_lag)?;
    Ok((edf, events))
}

pub fn evaluate_edf(edf: &EventDetectionFunction, reference: &EventList, cfg: &EvalConfig) -> Result<PrCurve> {
    pr_curve(edf, reference, cfg.min_lag, &default_thresholds(cfg.n_thresholds), cfg.tolerance)
}

/// One detector variant compared in a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub label: String,
    pub compression: Compression,
    pub formulation: Formulation,
}

impl ModelSpec {
    pub fn new(label: &str, compression: Compression, formulation: Formulation) -> Self {
        Self { label: label.into(), compression, formulation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub night: NightSpec,
    pub models: Vec<ModelSpec>,
    /// Geometry, context, training and evaluation settings shared by all models.
    pub base: PipelineConfig,
    pub seeds: Vec<u64>,
}

impl StudyConfig {
    /// logmel-STATIC, PCEN-STATIC and PCEN-AT on the six-sensor desk night.
    pub fn desk() -> Self {
        let pcen = Compression::pcen(PcenParams::OUTDOOR);
        Self {
            night: NightSpec::desk(0),
            models: vec![
                ModelSpec::new("logmel-STATIC", Compression::Logmel, Formulation::Static),
                ModelSpec::new("pcen-STATIC", pcen, Formulation::Static),
                ModelSpec::new("pcen-AT", pcen, Formulation::At),
            ],
            base: PipelineConfig { negatives_per_positive: 2, ..PipelineConfig::desk() },
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub model: String,
    pub seed: u64,
    pub fold: usize,
    pub test_sensor: String,
    pub auprc: f64,
    pub best_f: f64,
    pub recall_at_best_f: f64,
    pub threshold_at_best_f: f64,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub outcomes: Vec<FoldOutcome>,
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Interquartile range with linearly interpolated quartiles.
pub fn iqr(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    crate::context::quantile_sorted(&s, 0.75) - crate::context::quantile_sorted(&s, 0.25)
}

impl StudyReport {
    fn select(&self, model: &str) -> impl Iterator<Item = &FoldOutcome> {
        let model = model.to_string();
        self.outcomes.iter().filter(move |o| o.model == model)
    }

    pub fn folds(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.outcomes.iter().map(|o| o.fold).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Median test AUPRC over seeds for one fold.
    pub fn median_auprc(&self, model: &str, fold: usize) -> f64 {
        median(&mut self.select(model).filter(|o| o.fold == fold).map(|o| o.auprc).collect::<Vec<_>>())
    }

    /// Median over seeds of the inter-sensor IQR of recall at the max-F threshold.
    pub fn median_recall_iqr(&self, model: &str) -> f64 {
        let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for o in self.select(model) {
            by_seed.entry(o.seed).or_default().push(o.recall_at_best_f);
        }
        median(&mut by_seed.values().map(|r| iqr(r)).collect::<Vec<_>>())
    }
}

/// Trains every model on every fold and seed and scores each on its
/// held-out sensor. Recordings are regenerated on demand so that only one
/// sensor's features are held in memory at a time.
pub fn run_study(cfg: &StudyConfig, log: &mut dyn FnMut(&str)) -> Result<StudyReport> {
    cfg.night.validate()?;
    let ids: Vec<String> = cfg.night.sensors.iter().map(|s| s.id.clone()).collect();
    let folds = make_folds(&ids)?;
    let mut report = StudyReport::default();
    let mut compressions: Vec<Compression> = Vec::new();
    for m in &cfg.models {
        if !compressions.contains(&m.compression) {
            compressions.push(m.compression);
        }
    }
    for compression in compressions {
        let base = PipelineConfig {
            frontend: FrontendConfig { compression, ..cfg.base.frontend },
            ..cfg.base.clone()
        };
        base.validate()?;
        let models: Vec<&ModelSpec> = cfg.models.iter().filter(|m| m.compression == compression).collect();
        let mut examples: Vec<Vec<Example>> = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let night = synth_night_sensor(&cfg.night, i)?;
            examples.push(sensor_examples(id, i, &night.waveform, &night.reference, &base)?);
            log(&format!("[{:?}] clips for {id}: {}", compression.kind(), examples[i].len()));
        }
        let gather = |names: &[String]| -> Vec<Example> {
            names
                .iter()
                .flat_map(|n| examples[ids.iter().position(|x| x == n).unwrap()].iter().cloned())
                .collect()
        };
        let mut trained: Vec<(usize, &ModelSpec, u64, DetectorParams, TrainingHistory)> = Vec::new();
        for (f, fold) in folds.iter().enumerate() {
            let train_set = gather(&fold.train);
            let validation = gather(&fold.validation);
            for m in &models {
                for &seed in &cfg.seeds {
                    let tc = TrainConfig { seed: derive_seed(seed, &[2, f as u64]), ..base.train.clone() };
                    let t0 = std::time::Instant::now();
                    let (params, history) = train(&train_set, &validation, base.geometry, m.formulation, &tc)?;
                    log(&format!(
                        "{} seed {seed} fold {f}: {} epochs (best {:?}) in {:.0} s",
                        m.label,
                        history.epochs.len(),
                        history.best_epoch,
                        t0.elapsed().as_secs_f64()
                    ));
                    trained.push((f, m, seed, params, history));
                }
            }
        }
        drop(examples);
        for (f, fold) in folds.iter().enumerate() {
            let i = ids.iter().position(|x| *x == fold.test).unwrap();
            let night = synth_night_sensor(&cfg.night, i)?;
            let track = FeatureTrack::compute(&night.waveform, &base.frontend, &base.context)?;
            drop(night.waveform);
            for (_, m, seed, params, history) in trained.iter().filter(|t| t.0 == f) {
                let edf = track.edf(params)?;
                let curve = evaluate_edf(&edf, &night.reference, &base.evaluation)?;
                let best = curve.best_f().copied();
                let outcome = FoldOutcome {
                    model: m.label.clone(),
                    seed: *seed,
                    fold: f,
                    test_sensor: fold.test.clone(),
                    auprc: curve.auprc,
                    best_f: best.map(|b| b.f_score()).unwrap_or(0.0),
                    recall_at_best_f: best.map(|b| b.recall).unwrap_or(0.0),
                    threshold_at_best_f: best.map(|b| b.threshold).unwrap_or(f64::NAN),
                    epochs: history.epochs.len(),
                    best_epoch: history.best_epoch,
                };
                log(&format!(
                    "{} seed {seed} fold {f} ({}): AUPRC {:.4}, recall@maxF {:.3}",
                    m.label, fold.test, outcome.auprc, outcome.recall_at_best_f
                ));
                report.outcomes.push(outcome);
            }
        }
    }
    Ok(report)
}

/// Featurization timing on a single worker thread.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub audio_seconds: f64,
    pub featurize_seconds: f64,
    pub realtime_factor: f64,
}

/// Times `frontend.features` on `w` inside a one-thread pool.
pub fn bench_featurize(frontend: &FrontendConfig, w: &Waveform) -> Result<BenchReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let start = std::time::Instant::now();
    pool.install(|| frontend.features(w))?;
    let elapsed = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        audio_seconds: w.duration(),
        featurize_seconds: elapsed,
        realtime_factor: w.duration() / elapsed,
    })
}

/// White noise at -30 dBFS; featurization cost does not depend on content.
pub fn bench_signal(seconds: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * sample_rate as f64).round() as usize;
    let a = 10f32.powf(-30.0 / 20.0) * 3f32.sqrt();
    Waveform::new((0..n).map(|_| a * rng.random_range(-1.0f32..1.0)).collect(), sample_rate)
}

/// Paths written by [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutputs {
    pub checkpoint: PathBuf,
    pub detections: PathBuf,
    pub pr_curve: PathBuf,
    pub auprc: f64,
}

/// synth → train (fold 0) → detect on the fold's test sensor → eval.
pub fn run_pipeline(spec: &NightSpec, cfg: &PipelineConfig, dir: impl AsRef<Path>) -> Result<PipelineOutputs> {
    let dir = dir.as_ref();
    let data = dir.join("data");
    let manifest = write_dataset(spec, &data)?;
    let (ck, fold) = train_fold(&data, cfg, 0)?;
    let checkpoint = dir.join("fold0.ckpt.zip");
    crate::io::save_checkpoint(&checkpoint, &ck)?;
    let ck = crate::io::load_checkpoint(&checkpoint)?;
    let test = manifest.sensors.iter().find(|s| s.id == fold.test).unwrap();
    let w = read_wav(data.join(&test.audio))?;
    let (edf, events) = detect(&w, &ck, &cfg.detection)?;
    let detections = dir.join("detections.csv");
    crate::io::write_detections(&detections, &events)?;
    let reference = read_events(data.join(&test.reference))?;
    let curve = evaluate_edf(&edf, &reference, &cfg.evaluation)?;
    let pr = dir.join("pr.csv");
    crate::io::write_pr_curve(&pr, &curve)?;
    Ok(PipelineOutputs { checkpoint, detections, pr_curve: pr, auprc: curve.auprc })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_overrides() {
        for cfg in [PipelineConfig::default(), PipelineConfig::desk()] {
            cfg.validate().unwrap();
            let back = PipelineConfig::from_json(&cfg.to_json().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
        let d = PipelineConfig::desk();
        let o = d
            .with_overrides(&["train.max_epochs=3", "formulation=\"MOE\"", "detection.threshold=0.7", "seed=9"])
            .unwrap();
        assert_eq!(o.train.max_epochs, 3);
        assert_eq!(o.formulation, Formulation::Moe);
        assert_eq!(o.detection.threshold, 0.7);
        assert_eq!(o.seed, 9);
        assert_eq!(d.with_overrides(&["formulation=AW"]).unwrap().formulation, Formulation::Aw);
        assert!(d.with_overrides(&["train.nope=1"]).is_err());
        assert!(d.with_overrides(&["geometry.bands=128"]).is_err());
        assert!(d.with_overrides(&["detection.threshold=1.5"]).is_err());
        assert!(PipelineConfig::preset("huge").is_err());
    }

    #[test]
    fn seeds_are_distinct() {
        let a = derive_seed(0, &[1, 0]);
        assert_ne!(a, derive_seed(0, &[1, 1]));
        assert_ne!(a, derive_seed(1, &[1, 0]));
        assert_eq!(a, derive_seed(0, &[1, 0]));
    }

    #[test]
    fn quartile_helpers() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(iqr(&[1.0, 2.0, 3.0, 4.0, 5.0]), 2.0);
    }
}
