//! Cross-module workflows: dataset files, checkpoints, augmentation pools.

use robust_sed::audio::read_wav;
use robust_sed::augment::{augment_set, AugmentationSpec, Effect, NoiseSource};
use robust_sed::evaluator::make_folds;
use robust_sed::frontend::{Compression, FrontendConfig, PcenParams};
use robust_sed::io::{load_checkpoint, read_events, save_checkpoint, Checkpoint};
use robust_sed::network::{DetectorParams, Formulation, Geometry};
use robust_sed::pipeline::{detect, read_dataset, write_dataset, DetectionConfig, PipelineConfig};
use robust_sed::synthdata::{synth_night_sensor, NightSpec};
use robust_sed::Error;

#[test]
fn dataset_files_match_generator() {
    let dir = tempfile::tempdir().unwrap();
    let spec = NightSpec::with_size(3, 30.0, 8, 3);
    let written = write_dataset(&spec, dir.path()).unwrap();
    let read = read_dataset(dir.path()).unwrap();
    assert_eq!(read.seed, 3);
    assert_eq!(read.sensors.len(), 3);
    for (i, files) in written.sensors.iter().enumerate() {
        let night = synth_night_sensor(&spec, i).unwrap();
        let w = read_wav(dir.path().join(&files.audio)).unwrap();
        assert_eq!(w.len(), night.waveform.len());
        let refs = read_events(dir.path().join(&files.reference)).unwrap();
        assert_eq!(refs.len(), 8);
        assert_eq!(refs.sensor.as_deref(), Some(files.id.as_str()));
        for (a, b) in refs.times().iter().zip(night.reference.times()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn checkpoint_from_other_geometry_is_rejected_with_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("full.ckpt.zip");
    let desk = PipelineConfig::desk();
    // Full-size network paired with the desk frontend.
    let ck = Checkpoint {
        params: DetectorParams::zeros(Geometry::full(), Formulation::At).unwrap(),
        frontend: FrontendConfig::desk(Compression::pcen(PcenParams::OUTDOOR)),
        context: desk.context.clone(),
        seed: 0,
        history: Default::default(),
    };
    save_checkpoint(&path, &ck).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let night = synth_night_sensor(&NightSpec::with_size(3, 5.0, 1, 0), 0).unwrap();
    let err = detect(&night.waveform, &ck, &DetectionConfig::default()).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { .. }));
    let msg = err.to_string();
    assert!(msg.contains("128 bands") && msg.contains("64 bands"), "{msg}");
}

#[test]
fn noise_augmentation_draws_only_from_training_sensors() {
    let spec = NightSpec::with_size(6, 10.0, 2, 4);
    let ids: Vec<String> = spec.sensors.iter().map(|s| s.id.clone()).collect();
    let fold = &make_folds(&ids).unwrap()[2];
    let pool: Vec<NoiseSource> = fold
        .train
        .iter()
        .map(|id| {
            let i = ids.iter().position(|x| x == id).unwrap();
            NoiseSource { id: id.clone(), waveform: synth_night_sensor(&spec, i).unwrap().waveform }
        })
        .collect();
    let clip = synth_night_sensor(&spec, 3).unwrap().waveform.excerpt_padded(22050, 3307);
    let aug = AugmentationSpec { seed: 1, ..Default::default() };
    let variants = augment_set("clip", &clip, &aug, &pool).unwrap();
    let noisy: Vec<_> = variants.iter().filter(|v| v.provenance.effect == Effect::Noise).collect();
    assert_eq!(noisy.len(), aug.n_noise * pool.len());
    for v in noisy {
        let src = v.provenance.noise_source.as_ref().unwrap();
        assert!(fold.train.contains(src), "{src} not in {:?}", fold.train);
        assert_eq!(v.waveform.len(), clip.len());
    }
}
