use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use robust_sed::audio::read_wav;
use robust_sed::context::context_tensor;
use robust_sed::detector::export_clips;
use robust_sed::evaluator::{default_thresholds, pr_curve, pr_curve_events, recall_timeline};
use robust_sed::io::{
    context_to_tensor, edf_to_tensor, features_to_tensor, load_checkpoint, read_events, read_tensor,
    save_checkpoint, tensor_to_edf, write_detections, write_pr_curve, write_tensor, write_timeline,
};
use robust_sed::network::gradcheck::{check_gradients, random_instance, GradCheckReport};
use robust_sed::network::{Formulation, DEFAULT_L2};
use robust_sed::pipeline::{
    bench_featurize, bench_signal, detect, read_dataset, run_study, train_fold, write_dataset, PipelineConfig,
    StudyConfig,
};
use robust_sed::synthdata::NightSpec;

const THREADS_ENV: &str = "ROBUST_SED_THREADS";

/// Sound event detection with context-adaptive neural networks.
#[derive(Debug, Parser)]
#[command(name = "robust-sed", version)]
struct Cli {
    /// JSON pipeline configuration; defaults to the selected preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in configuration: `desk` (small, CPU-friendly) or `full`.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,

    /// Override a configuration field, e.g. `--set train.max_epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-sensor dataset.
    Synth(SynthArgs),
    /// Compute features (and optionally context) of a recording.
    Featurize(FeaturizeArgs),
    /// Train on a leave-one-sensor-out fold.
    Train(TrainArgs),
    /// Run a trained detector over a recording.
    Detect(DetectArgs),
    /// Precision-recall curve and AUPRC against a reference list.
    Eval(EvalArgs),
    /// Recall per time segment and frequency band.
    Timeline(TimelineArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Featurization throughput on one core.
    Bench(BenchArgs),
    /// Cross-sensor comparison of several detectors on a synthetic night.
    Study(StudyArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    sensors: usize,
    /// Recording length in seconds.
    #[arg(long, default_value_t = 1200.0)]
    duration: f64,
    #[arg(long, default_value_t = 200)]
    calls: usize,
    /// Defaults to the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct FeaturizeArgs {
    #[arg(long)]
    input: PathBuf,
    /// BVTF features (frame x band).
    #[arg(long)]
    out: PathBuf,
    /// Also write the context tensor here.
    #[arg(long)]
    context: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Fold index; all folds when omitted.
    #[arg(long)]
    fold: Option<usize>,
    /// Checkpoint path for a single fold, or a directory for all folds.
    #[arg(long)]
    out: PathBuf,
    /// Folds trained concurrently as separate processes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Detections CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also write the detection function (BVTF).
    #[arg(long)]
    edf: Option<PathBuf>,
    /// Write one WAV per detection into this directory.
    #[arg(long)]
    export_clips: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Minimum spacing between detections in seconds.
    #[arg(long)]
    min_lag: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    reference: PathBuf,
    /// Detections CSV; thresholds sweep the confidence column.
    #[arg(long, conflicts_with = "edf", required_unless_present = "edf")]
    detections: Option<PathBuf>,
    /// Detection function (BVTF); thresholds sweep peak picking.
    #[arg(long)]
    edf: Option<PathBuf>,
    /// PR curve CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TimelineArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only detections with confidence above this count.
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 3)]
    per_tensor: usize,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Recording to featurize; white noise when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Length of the generated signal in seconds.
    #[arg(long, default_value_t = 600.0)]
    seconds: f64,
}

#[derive(Debug, Args)]
struct StudyArgs {
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v:?}"))?;
            if n == 0 {
                bail!("{THREADS_ENV} must be positive");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn init_threads() -> Result<()> {
    if let Some(n) = thread_cap()? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let base = match &cli.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => PipelineConfig::preset(&cli.preset)?,
    };
    let cfg = base.with_overrides(&cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Cmd::Synth(a) => synth(&cfg, a),
        Cmd::Featurize(a) => featurize(&cfg, a),
        Cmd::Train(a) => train(&cli, &cfg, a),
        Cmd::Detect(a) => detect_cmd(&cfg, a),
        Cmd::Eval(a) => eval(&cfg, a),
        Cmd::Timeline(a) => timeline(&cfg, a),
        Cmd::Gradcheck(a) => gradcheck(&cfg, a),
        Cmd::Bench(a) => bench(&cfg, a),
        Cmd::Study(a) => study(&cli, &cfg, a),
    }
}

fn synth(cfg: &PipelineConfig, a: &SynthArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(cfg.seed);
    let spec = NightSpec::with_size(a.sensors, a.duration, a.calls, seed);
    let manifest = write_dataset(&spec, &a.out)?;
    println!("wrote {} sensors to {} (seed {seed})", manifest.sensors.len(), a.out.display());
    Ok(())
}

fn featurize(cfg: &PipelineConfig, a: &FeaturizeArgs) -> Result<()> {
    let w = read_wav(&a.input)?;
    let features = cfg.frontend.features(&w)?;
    write_tensor(&a.out, &features_to_tensor(&features))?;
    if let Some(path) = &a.context {
        write_tensor(path, &context_to_tensor(&context_tensor(&features, &cfg.context)?))?;
    }
    println!("{} frames x {} bands", features.n_frames, features.n_bands);
    Ok(())
}

fn train(cli: &Cli, cfg: &PipelineConfig, a: &TrainArgs) -> Result<()> {
    if let Some(fold) = a.fold {
        return train_one(cfg, &a.data, fold, &a.out);
    }
    let n = read_dataset(&a.data)?.sensors.len();
    std::fs::create_dir_all(&a.out)?;
    let jobs = a.jobs.max(1).min(thread_cap()?.unwrap_or(usize::MAX));
    if jobs == 1 {
        for fold in 0..n {
            train_one(cfg, &a.data, fold, &fold_path(&a.out, fold))?;
        }
        return Ok(());
    }
    let exe = std::env::current_exe()?;
    let folds: Vec<usize> = (0..n).collect();
    for chunk in folds.chunks(jobs) {
        let children = chunk
            .iter()
            .map(|&fold| {
                let mut cmd = Command::new(&exe);
                if let Some(c) = &cli.config {
                    cmd.arg("--config").arg(c);
                }
                cmd.arg("--preset").arg(&cli.preset);
                for o in &cli.overrides {
                    cmd.arg("--set").arg(o);
                }
                cmd.arg("train")
                    .arg("--data")
                    .arg(&a.data)
                    .arg("--fold")
                    .arg(fold.to_string())
                    .arg("--out")
                    .arg(fold_path(&a.out, fold));
                Ok((fold, cmd.spawn()?))
            })
            .collect::<Result<Vec<_>>>()?;
        for (fold, mut child) in children {
            let status = child.wait()?;
            if !status.success() {
                bail!("fold {fold} failed ({status})");
            }
        }
    }
    Ok(())
}

fn fold_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold{fold}.ckpt.zip"))
}

fn train_one(cfg: &PipelineConfig, data: &Path, fold: usize, out: &Path) -> Result<()> {
    let start = Instant::now();
    let (ck, spec) = train_fold(data, cfg, fold)?;
    save_checkpoint(out, &ck)?;
    let best = ck.history.best_epoch.map_or("none".into(), |e| e.to_string());
    println!(
        "fold {fold} (test {}): {} epochs, best {best}, {:.0} s -> {}",
        spec.test,
        ck.history.epochs.len(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn detect_cmd(cfg: &PipelineConfig, a: &DetectArgs) -> Result<()> {
    let w = read_wav(&a.input)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut det = cfg.detection.clone();
    det.threshold = a.threshold.unwrap_or(det.threshold);
    det.min_lag = a.min_lag.unwrap_or(det.min_lag);
    let (edf, events) = detect(&w, &ck, &det)?;
    write_detections(&a.out, &events)?;
    if let Some(path) = &a.edf {
        write_tensor(path, &edf_to_tensor(&edf))?;
    }
    if let Some(dir) = &a.export_clips {
        export_clips(&w, &events, det.clip_half_width, dir)?;
    }
    println!("{} detections", events.len());
    Ok(())
}

fn eval(cfg: &PipelineConfig, a: &EvalArgs) -> Result<()> {
    let reference = read_events(&a.reference)?;
    let ev = &cfg.evaluation;
    let thresholds = default_thresholds(ev.n_thresholds);
    let curve = match (&a.detections, &a.edf) {
        (Some(path), _) => pr_curve_events(&read_events(path)?, &reference, &thresholds, ev.tolerance)?,
        (None, Some(path)) => {
            let edf = tensor_to_edf(&read_tensor(path)?)?;
            pr_curve(&edf, &reference, ev.min_lag, &thresholds, ev.tolerance)?
        }
        (None, None) => bail!("either --detections or --edf is required"),
    };
    if let Some(out) = &a.out {
        write_pr_curve(out, &curve)?;
    }
    println!("AUPRC: {:.6}", curve.auprc);
    Ok(())
}

fn timeline(cfg: &PipelineConfig, a: &TimelineArgs) -> Result<()> {
    let mut det = read_events(&a.detections)?;
    det.events.retain(|e| e.confidence > a.threshold);
    let reference = read_events(&a.reference)?;
    let ev = &cfg.evaluation;
    let cells = recall_timeline(&det, &reference, ev.segment, ev.band_split, ev.tolerance)?;
    write_timeline(&a.out, &cells)?;
    println!("{} cells", cells.len());
    Ok(())
}

fn gradcheck(cfg: &PipelineConfig, a: &GradcheckArgs) -> Result<()> {
    let mut failed = Vec::new();
    for f in [Formulation::Static, Formulation::Aw, Formulation::At, Formulation::Moe] {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let mut report = GradCheckReport::default();
        for _ in 0..a.instances {
            let (params, batch) = random_instance(cfg.geometry, f, 2, &mut rng)?;
            let r = check_gradients(&batch, &params, DEFAULT_L2, a.step, a.per_tensor, &mut rng)?;
            report.merge(r);
        }
        let ok = report.max_rel_error <= a.tolerance;
        println!(
            "{:<6} {} max rel error {:.2e} over {} coordinates ({} skipped at kinks), {:.1} s",
            f.name(),
            if ok { "ok  " } else { "FAIL" },
            report.max_rel_error,
            report.checked,
            report.skipped,
            start.elapsed().as_secs_f64()
        );
        if !ok {
            failed.push(f.name());
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn bench(cfg: &PipelineConfig, a: &BenchArgs) -> Result<()> {
    let w = match &a.input {
        Some(path) => read_wav(path)?,
        None => bench_signal(a.seconds, cfg.frontend.spectrogram.sample_rate, cfg.seed)?,
    };
    let r = bench_featurize(&cfg.frontend, &w)?;
    println!(
        "featurized {:.1} s of audio in {:.2} s on one core ({:.1}x real time)",
        r.audio_seconds, r.featurize_seconds, r.realtime_factor
    );
    Ok(())
}

fn study(cli: &Cli, cfg: &PipelineConfig, a: &StudyArgs) -> Result<()> {
    let mut sc = StudyConfig::desk();
    // The study's own base (more negatives per positive) unless a config
    // file or another preset was asked for.
    sc.base = if cli.config.is_none() && cli.preset == "desk" {
        sc.base.with_overrides(&cli.overrides)?
    } else {
        cfg.clone()
    };
    if let Some(seeds) = &a.seeds {
        sc.seeds = seeds.clone();
    }
    let report = run_study(&sc, &mut |line| eprintln!("{line}"))?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)?)?;
    for m in &sc.models {
        let auprc: Vec<String> =
            report.folds().iter().map(|&k| format!("{:.3}", report.median_auprc(&m.label, k))).collect();
        println!(
            "{:<14} AUPRC by fold [{}]  recall IQR {:.3}",
            m.label,
            auprc.join(", "),
            report.median_recall_iqr(&m.label)
        );
    }
    Ok(())
}
