mod config;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pmbnn::experiment::{
    evaluate_prediction, generate_synthetic_subject, random_synthetic_spec, reconstruct_pmbnn_r,
    split_by_activity, SplitRecord, SyntheticSpec, PREDICTIONS_HEADER,
};
use pmbnn::nn::{seeded_gradient_check, Checkpoint};
use pmbnn::physio::{LambdaBounds, LambdaParams};
use pmbnn::report::{build_report, emit_report, ModelMetrics, SubjectMetrics};
use pmbnn::signal::{
    parse_recording_csv, preprocess_subject, resample_linear_1hz, write_subject_csv_with_times,
    SubjectRecord,
};
use pmbnn::training::{fit_pm_with, train_fcnn, train_pmbnn, ModelKind, RunManifest};

use crate::config::{extract_dotted, ConfigError, RunConfig};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "pmbnn",
    version,
    about = "Heart rate from oxygen uptake with a physiology-constrained neural network",
    after_help = "Every configuration key can also be given as a flag, e.g. `--train.lr 0.005` \
                  or `--filter.clamp_vo2=false`; flags win over --config. Set PMBNN_LOG=debug \
                  for progress output."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON file of dotted configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Resample a raw recording to 1 Hz and apply the standard filters.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic subject whose HR follows the physiological model.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth specification; drawn from the seed when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Split a recording into per-activity train and test parts.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model per input recording.
    Train {
        #[arg(long, value_parser = parse_model)]
        model: ModelKind,
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Subjects trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate the physiological model on the test part with trained lambdas.
    Reconstruct {
        #[arg(long)]
        input: PathBuf,
        /// A training manifest carrying `run.lambda`.
        #[arg(long)]
        lambda: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Join per-model predictions and score them per subject.
    Evaluate {
        /// Directory produced by `train` / `reconstruct`.
        #[arg(long)]
        runs: PathBuf,
        /// Defaults to the runs directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-subject tables, paired tests and plot data.
    Report {
        /// Directory produced by `evaluate`.
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
    },
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    match s.parse::<ModelKind>() {
        Ok(ModelKind::PmbnnR) => Err("pmbnn_r is produced by `reconstruct`".into()),
        other => other.map_err(|e| e.to_string()),
    }
}

/// Domain failure that should exit with status 1 after printing `message`.
#[derive(Debug)]
struct Failed(String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PMBNN_LOG", "warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let (args, overrides) = match extract_dotted(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<ConfigError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn resolve(common: &Common, overrides: &[(String, String)]) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::resolve(common.config.as_deref(), overrides, common.seed)?)
}

fn subject_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| "subject".into(), |s| s.to_string_lossy().into_owned())
}

fn load_subject(path: &Path, cfg: &RunConfig) -> anyhow::Result<SubjectRecord> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let raw = parse_recording_csv(f, &subject_id(path)).with_context(|| path.display().to_string())?;
    let rec = resample_linear_1hz(&raw)?;
    Ok(preprocess_subject(&rec, &cfg.filter)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'a str,
    inputs: Vec<String>,
    config: &'a RunConfig,
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    split_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    run: Option<T>,
}

impl<'a, T: Serialize> Manifest<'a, T> {
    fn new(command: &'a str, inputs: &[&Path], config: &'a RunConfig) -> Self {
        Self {
            command,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            config,
            config_hash: config.hash(),
            split_hash: None,
            run: None,
        }
    }
}

fn test_times(rec: &SubjectRecord, split: &SplitRecord) -> Vec<f64> {
    split.test_provenance.iter().map(|p| rec.vo2.time(p.index)).collect()
}

fn write_model_predictions(path: &Path, times: &[f64], test: &SubjectRecord, pred: &[f64]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["t_s", "hr_true", "hr_pred", "activity"])?;
    for i in 0..pred.len() {
        w.write_record([
            times[i].to_string(),
            test.hr.values[i].to_string(),
            pred[i].to_string(),
            test.activity_labels[i].clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run(command: Command, overrides: &[(String, String)]) -> anyhow::Result<()> {
    match command {
        Command::Preprocess { input, out, common } => {
            let cfg = resolve(&common, overrides)?;
            let rec = load_subject(&input, &cfg)?;
            let times: Vec<f64> = (0..rec.len()).map(|i| rec.vo2.time(i)).collect();
            write_subject_csv_with_times(&rec, Some(&times), create(&out)?)?;
            write_json(&out.with_extension("manifest.json"), &Manifest::<()>::new("preprocess", &[&input], &cfg))?;
            log::info!("{}: {} samples, {} segments", rec.subject_id, rec.len(), rec.vo2.segment_bounds.len());
        }
        Command::Synth { out, spec, common } => {
            let cfg = resolve(&common, overrides)?;
            let spec: SyntheticSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p).with_context(|| p.display().to_string())?)?,
                None => SyntheticSpec {
                    subject_id: subject_id(&out),
                    ..random_synthetic_spec(cfg.seed, cfg.synth.noise_sigma_hr, cfg.synth.noise_sigma_vo2)
                },
            };
            let rec = generate_synthetic_subject(&spec)?;
            write_subject_csv_with_times(&rec, None, create(&out)?)?;
            write_json(&out.with_extension("spec.json"), &spec)?;
        }
        Command::Split { input, out, common } => {
            let cfg = resolve(&common, overrides)?;
            let rec = load_subject(&input, &cfg)?;
            let split = split_by_activity(&rec, cfg.split.ratio)?;
            fs::create_dir_all(&out)?;
            let train_times: Vec<f64> = split.train_provenance.iter().map(|p| rec.vo2.time(p.index)).collect();
            write_subject_csv_with_times(&split.train, Some(&train_times), create(&out.join("train.csv"))?)?;
            write_subject_csv_with_times(&split.test, Some(&test_times(&rec, &split)), create(&out.join("test.csv"))?)?;
            let mut m: Manifest<()> = Manifest::new("split", &[&input], &cfg);
            m.split_hash = Some(split.provenance_hash());
            write_json(&out.join("manifest.json"), &m)?;
        }
        Command::Train { model, input, out, jobs, common } => {
            let cfg = resolve(&common, overrides)?;
            let failures = run_parallel(&input, jobs.max(1), |path| train_one(model, path, &out, &cfg));
            if !failures.is_empty() {
                bail!(Failed(failures.join("\n")));
            }
        }
        Command::Reconstruct { input, lambda, out, common } => {
            let cfg = resolve(&common, overrides)?;
            let lambda = read_manifest_lambda(&lambda)?;
            let rec = load_subject(&input, &cfg)?;
            let split = split_by_activity(&rec, cfg.split.ratio)?;
            let hr = reconstruct_pmbnn_r(&split.test, &lambda)?;
            let dir = out.join(&rec.subject_id).join(ModelKind::PmbnnR.slug());
            fs::create_dir_all(&dir)?;
            write_model_predictions(&dir.join("predictions.csv"), &test_times(&rec, &split), &split.test, &hr.values)?;
            let mut m = Manifest::new("reconstruct", &[&input], &cfg);
            m.split_hash = Some(split.provenance_hash());
            m.run = Some(lambda);
            write_json(&dir.join("manifest.json"), &m)?;
        }
        Command::Evaluate { runs, out } => evaluate(&runs, out.as_deref().unwrap_or(&runs))?,
        Command::Report { metrics, out } => {
            let subjects = read_subject_metrics(&metrics)?;
            if subjects.is_empty() {
                bail!(Failed(format!("no metrics.json under {}", metrics.display())));
            }
            emit_report(&build_report(&subjects)?, &out)?;
        }
        Command::Gradcheck { seed, h } => {
            let err = seeded_gradient_check(seed, h)?;
            println!("max relative gradient error: {err:.3e}");
            if !(err <= GRADCHECK_TOLERANCE) {
                bail!(Failed(format!("gradient check failed: {err:.3e} > {GRADCHECK_TOLERANCE:e}")));
            }
        }
    }
    Ok(())
}

/// Runs `job` on every input with up to `jobs` threads; returns the error
/// messages, in input order.
fn run_parallel<F>(inputs: &[PathBuf], jobs: usize, job: F) -> Vec<String>
where
    F: Fn(&Path) -> anyhow::Result<()> + Sync,
{
    let next = AtomicUsize::new(0);
    let errors: Mutex<Vec<(usize, String)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(inputs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(path) = inputs.get(i) else { break };
                if let Err(e) = job(path) {
                    errors.lock().expect("poisoned").push((i, format!("{}: {e:#}", path.display())));
                }
            });
        }
    });
    let mut errors = errors.into_inner().expect("poisoned");
    errors.sort();
    errors.into_iter().map(|(_, e)| e).collect()
}

fn train_one(model: ModelKind, path: &Path, out: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    let rec = load_subject(path, cfg)?;
    let split = split_by_activity(&rec, cfg.split.ratio)?;
    let started = Instant::now();
    let dir = out.join(&rec.subject_id).join(model.slug());
    fs::create_dir_all(&dir)?;
    let (pred, manifest) = match model {
        ModelKind::Pmbnn | ModelKind::Fcnn => {
            let m = if model == ModelKind::Pmbnn { train_pmbnn(&split.train, &cfg.train)? } else { train_fcnn(&split.train, &cfg.train)? };
            let ck = Checkpoint::from_params(&m.mlp, m.bounds, m.input_shift, m.input_scale, cfg.seed, cfg.hash());
            write_json(&dir.join("checkpoint.json"), &ck)?;
            let run = RunManifest {
                subject_id: rec.subject_id.clone(),
                model,
                train_config: cfg.train.clone(),
                lambda: m.lambda,
                final_losses: m.final_loss().copied(),
                stopped_reason: Some(m.stopped_reason),
                epochs_run: m.loss_history.len(),
                wall_time_s: started.elapsed().as_secs_f64(),
            };
            (m.predict(&split.test.vo2).values, run)
        }
        ModelKind::Pm => {
            let fit = fit_pm_with(&split.train, &LambdaBounds::default(), &LambdaParams::initial(), &cfg.pm)?;
            let pred = reconstruct_pmbnn_r(&split.test, &fit.lambda)?;
            let run = RunManifest {
                subject_id: rec.subject_id.clone(),
                model,
                train_config: cfg.train.clone(),
                lambda: fit.lambda,
                final_losses: None,
                stopped_reason: None,
                epochs_run: fit.iterations,
                wall_time_s: started.elapsed().as_secs_f64(),
            };
            (pred.values, run)
        }
        ModelKind::PmbnnR => unreachable!("rejected by the argument parser"),
    };
    write_model_predictions(&dir.join("predictions.csv"), &test_times(&rec, &split), &split.test, &pred)?;
    let mut m = Manifest::new("train", &[path], cfg);
    m.split_hash = Some(split.provenance_hash());
    m.run = Some(manifest);
    write_json(&dir.join("manifest.json"), &m)?;
    log::info!("{} {}: done in {:.1}s", rec.subject_id, model, started.elapsed().as_secs_f64());
    Ok(())
}

fn read_manifest_lambda(path: &Path) -> anyhow::Result<LambdaParams> {
    #[derive(Deserialize)]
    struct Run {
        lambda: LambdaParams,
    }
    #[derive(Deserialize)]
    struct Partial {
        run: Run,
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let m: Partial = serde_json::from_str(&text).with_context(|| format!("{}: no run.lambda", path.display()))?;
    Ok(m.run.lambda)
}

struct Predictions {
    times: Vec<f64>,
    hr_true: Vec<f64>,
    hr_pred: Vec<f64>,
    labels: Vec<String>,
}

fn read_predictions(path: &Path) -> anyhow::Result<Predictions> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut p = Predictions { times: vec![], hr_true: vec![], hr_pred: vec![], labels: vec![] };
    for row in r.records() {
        let row = row?;
        let num = |i: usize| -> anyhow::Result<f64> {
            row.get(i).context("short row")?.parse().with_context(|| format!("{}: bad number", path.display()))
        };
        p.times.push(num(0)?);
        p.hr_true.push(num(1)?);
        p.hr_pred.push(num(2)?);
        p.labels.push(row.get(3).context("short row")?.to_string());
    }
    Ok(p)
}

fn sorted_subdirs(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn evaluate(runs: &Path, out: &Path) -> anyhow::Result<()> {
    let mut any = false;
    for subject_dir in sorted_subdirs(runs)? {
        let participant = subject_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut reference: Option<Predictions> = None;
        let mut models = Vec::new();
        let mut columns: Vec<(ModelKind, Vec<f64>)> = Vec::new();
        for kind in ModelKind::ALL {
            let path = subject_dir.join(kind.slug()).join("predictions.csv");
            if !path.exists() {
                continue;
            }
            let p = read_predictions(&path)?;
            if let Some(r) = &reference {
                if r.times != p.times || r.hr_true != p.hr_true {
                    bail!(Failed(format!("{}: predictions use a different test split", path.display())));
                }
            }
            let lambda = read_manifest_lambda(&subject_dir.join(kind.slug()).join("manifest.json")).ok();
            let test = test_record(&participant, &p)?;
            let (overall, per_activity) = evaluate_prediction(&test, &p.hr_pred);
            models.push(ModelMetrics {
                model: kind,
                overall,
                per_activity,
                lambda: if kind == ModelKind::Fcnn { None } else { lambda },
            });
            columns.push((kind, p.hr_pred.clone()));
            reference.get_or_insert(p);
        }
        let Some(reference) = reference else { continue };
        any = true;
        let dest = out.join(&participant);
        fs::create_dir_all(&dest)?;
        let mut w = csv::Writer::from_writer(create(&dest.join("predictions.csv"))?);
        w.write_record(PREDICTIONS_HEADER)?;
        for i in 0..reference.times.len() {
            let mut row = vec![reference.times[i].to_string(), reference.hr_true[i].to_string()];
            for kind in [ModelKind::Pmbnn, ModelKind::Fcnn, ModelKind::Pm, ModelKind::PmbnnR] {
                row.push(columns.iter().find(|(k, _)| *k == kind).map_or_else(|| "NA".into(), |(_, v)| v[i].to_string()));
            }
            row.push(reference.labels[i].clone());
            w.write_record(&row)?;
        }
        w.flush()?;
        write_json(&dest.join("metrics.json"), &SubjectMetrics { participant, models })?;
    }
    if !any {
        bail!(Failed(format!("no model predictions under {}", runs.display())));
    }
    Ok(())
}

/// Rebuilds a test record from a predictions file; only HR and labels matter
/// for scoring.
fn test_record(id: &str, p: &Predictions) -> anyhow::Result<SubjectRecord> {
    let bounds = pmbnn::signal::label_runs(&p.labels);
    let hr = pmbnn::signal::UniformSeries::with_segments(0.0, 1.0, p.hr_true.clone(), bounds.clone(), "bpm")?;
    let vo2 = hr.with_values(vec![1.0; p.hr_true.len()], "L/min");
    Ok(SubjectRecord::new(id, vo2, hr, p.labels.clone())?)
}

fn read_subject_metrics(dir: &Path) -> anyhow::Result<Vec<SubjectMetrics>> {
    let mut out = Vec::new();
    for sub in sorted_subdirs(dir)? {
        let path = sub.join("metrics.json");
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            out.push(serde_json::from_str(&text).with_context(|| path.display().to_string())?);
        }
    }
    Ok(out)
}
