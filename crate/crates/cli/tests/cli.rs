use std::path::Path;
use std::process::{Command, Output};

use robust_sed::audio::{write_wav, Waveform};
use robust_sed::io::{save_checkpoint, Checkpoint};
use robust_sed::network::{DetectorParams, Formulation};
use robust_sed::pipeline::PipelineConfig;

fn cli(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robust-sed"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn eval_identical_lists_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ref.csv"), "time_sec\n1.0\n2.5\n7.25\n").unwrap();
    let o = cli(&["eval", "--detections", "ref.csv", "--reference", "ref.csv", "--out", "pr.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("AUPRC: 1.000000"), "{}", stdout(&o));
    let pr = std::fs::read_to_string(dir.path().join("pr.csv")).unwrap();
    assert!(pr.starts_with("threshold,precision,recall"));
}

#[test]
fn detect_rejects_short_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::desk();
    write_wav(dir.path().join("short.wav"), &Waveform::silence(2000, 22050)).unwrap();
    let ck = Checkpoint {
        params: DetectorParams::zeros(cfg.geometry, Formulation::At).unwrap(),
        frontend: cfg.frontend,
        context: cfg.context.clone(),
        seed: 0,
        history: Default::default(),
    };
    save_checkpoint(dir.path().join("ck.zip"), &ck).unwrap();
    let o = cli(&["detect", "--input", "short.wav", "--checkpoint", "ck.zip", "--out", "det.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("input too short"), "{}", stderr(&o));
    assert!(!dir.path().join("det.csv").exists());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["eval", "--bogus"], &["eval"], &[]] {
        let o = cli(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn domain_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["eval", "--detections", "missing.csv", "--reference", "missing.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: "));
    let o = cli(&["--set", "train.nope=1", "bench", "--seconds", "1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = cli(&["--preset", "huge", "bench", "--seconds", "1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_robust-sed"))
        .args(["bench", "--seconds", "1"])
        .env("ROBUST_SED_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["gradcheck", "--instances", "1", "--per-tensor", "1"], dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).matches(" ok ").count(), 4, "{}", stdout(&o));
}

#[test]
fn featurize_and_bench_report_sizes() {
    let dir = tempfile::tempdir().unwrap();
    write_wav(dir.path().join("a.wav"), &Waveform::silence(22050, 22050)).unwrap();
    let o = cli(&["featurize", "--input", "a.wav", "--out", "f.bvtf"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    // Desk frontend: window 256, hop 64, no padding -> (22050 - 256) / 64 + 1.
    assert!(stdout(&o).contains("341 frames x 64 bands"), "{}", stdout(&o));
    let o = cli(&["bench", "--seconds", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("real time"));
}

/// Prints of the same seeded run must agree to every digit.
fn pipeline_auprc(dir: &Path) -> String {
    let set = ["--set", "train.max_epochs=1", "--set", "seed=11"];
    let run = |args: &[&str]| {
        let all: Vec<&str> = set.iter().chain(args).copied().collect();
        let o = cli(&all, dir);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        stdout(&o)
    };
    run(&["synth", "--out", "data", "--sensors", "3", "--duration", "60", "--calls", "12"]);
    run(&["train", "--data", "data", "--fold", "0", "--out", "ck.zip"]);
    run(&["detect", "--input", "data/S1.wav", "--checkpoint", "ck.zip", "--out", "det.csv", "--edf", "edf.bvtf"]);
    let out = run(&["eval", "--edf", "edf.bvtf", "--reference", "data/S1_reference.csv"]);
    out.lines().find(|l| l.starts_with("AUPRC")).unwrap().to_string()
}

#[test]
fn pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline_auprc(a.path());
    assert_eq!(first, pipeline_auprc(b.path()));
    let det_a = std::fs::read(a.path().join("det.csv")).unwrap();
    assert_eq!(det_a, std::fs::read(b.path().join("det.csv")).unwrap());
}
