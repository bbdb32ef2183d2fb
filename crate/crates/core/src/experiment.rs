//! Train/test splitting, synthetic subjects and per-subject orchestration.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::physio::{coupling_g, simulate_hr, LambdaBounds, LambdaParams, SINGULARITY_EPS};
use crate::report::{ActivityMetrics, ModelMetrics, SubjectMetrics};
use crate::signal::{label_runs, SubjectRecord, UniformSeries};
use crate::stats::MetricPair;
use crate::training::{
    fit_pm_with, segment_initial_hr, train_fcnn, train_pmbnn, LossBreakdown, ModelKind,
    PmFitConfig, StopReason, TrainConfig,
};

/// Where a split sample came from in the unsplit record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub segment: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRecord {
    pub train: SubjectRecord,
    pub test: SubjectRecord,
    pub train_provenance: Vec<Provenance>,
    pub test_provenance: Vec<Provenance>,
}

impl SplitRecord {
    /// Hex SHA-256 over the provenance of both parts.
    pub fn provenance_hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, part) in [(b'T', &self.train_provenance), (b'E', &self.test_provenance)] {
            h.update([tag]);
            for p in part {
                h.update((p.segment as u64).to_le_bytes());
                h.update((p.index as u64).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn gather(rec: &SubjectRecord, idx: &[Provenance], bounds: Vec<std::ops::Range<usize>>) -> Result<SubjectRecord> {
    let pick = |s: &UniformSeries| -> Vec<f64> { idx.iter().map(|p| s.values[p.index]).collect() };
    let vo2 = UniformSeries::with_segments(rec.vo2.t0, rec.vo2.dt, pick(&rec.vo2), bounds.clone(), &rec.vo2.unit)?;
    let hr = UniformSeries::with_segments(rec.hr.t0, rec.hr.dt, pick(&rec.hr), bounds, &rec.hr.unit)?;
    let labels = idx.iter().map(|p| rec.activity_labels[p.index].clone()).collect();
    SubjectRecord::new(&rec.subject_id, vo2, hr, labels)
}

/// Contiguous-prefix split: the first `floor(ratio * n)` samples of every
/// segment train, the rest test. Parts keep segment order and segmentation.
pub fn split_by_activity(rec: &SubjectRecord, ratio: f64) -> Result<SplitRecord> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio {ratio} not in (0, 1)")));
    }
    if rec.vo2.segment_bounds.is_empty() {
        return Err(Error::SegmentTooShort { len: 0, min: 5 });
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let mut train_bounds = Vec::new();
    let mut test_bounds = Vec::new();
    for (seg, r) in rec.vo2.segment_bounds.iter().enumerate() {
        let n = r.len();
        if n < 5 {
            return Err(Error::SegmentTooShort { len: n, min: 5 });
        }
        // Guard the floor against ratios like 0.7 whose products land a hair low.
        let n_train = ((ratio * n as f64) + 1e-9).floor() as usize;
        let start = train_idx.len();
        train_idx.extend(r.clone().take(n_train).map(|index| Provenance { segment: seg, index }));
        train_bounds.push(start..train_idx.len());
        let start = test_idx.len();
        test_idx.extend(r.clone().skip(n_train).map(|index| Provenance { segment: seg, index }));
        test_bounds.push(start..test_idx.len());
    }
    Ok(SplitRecord {
        train: gather(rec, &train_idx, train_bounds)?,
        test: gather(rec, &test_idx, test_bounds)?,
        train_provenance: train_idx,
        test_provenance: test_idx,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityPhase {
    pub label: String,
    pub duration_s: usize,
    pub target_vo2: f64,
    /// Time constant of the exponential approach to `target_vo2`, seconds.
    pub tau_s: f64,
}

impl ActivityPhase {
    pub fn new(label: &str, duration_s: usize, target_vo2: f64) -> Self {
        Self { label: label.into(), duration_s, target_vo2, tau_s: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub subject_id: String,
    pub plan: Vec<ActivityPhase>,
    pub lambda_true: LambdaParams,
    pub hr0: f64,
    pub noise_sigma_hr: f64,
    pub noise_sigma_vo2: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Sit, stand, two cycling and two running levels of five minutes each.
    pub fn standard_protocol() -> Vec<ActivityPhase> {
        vec![
            ActivityPhase::new("rest", 300, 0.35),
            ActivityPhase::new("rest", 300, 0.45),
            ActivityPhase::new("cycle", 300, 1.2),
            ActivityPhase::new("cycle", 300, 1.7),
            ActivityPhase::new("run", 300, 2.3),
            ActivityPhase::new("run", 300, 2.8),
        ]
    }

    pub fn validate(&self, bounds: &LambdaBounds) -> Result<()> {
        if self.plan.is_empty() {
            return Err(Error::InvalidConfig("empty activity plan".into()));
        }
        for p in &self.plan {
            if !(p.target_vo2 > 0.0) || p.duration_s < 60 || !(p.tau_s > 0.0) {
                return Err(Error::InvalidConfig(format!("bad activity phase {p:?}")));
            }
        }
        if !bounds.contains(&self.lambda_true) {
            return Err(Error::InvalidConfig(format!(
                "lambda_true {:?} outside bounds",
                self.lambda_true
            )));
        }
        if !(self.hr0 > 0.0) || self.noise_sigma_hr < 0.0 || self.noise_sigma_vo2 < 0.0 {
            return Err(Error::InvalidConfig("hr0 and noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// Piecewise exponential VO2 profile, one sample per second.
pub fn synthetic_vo2(plan: &[ActivityPhase]) -> (Vec<f64>, Vec<String>) {
    let mut v = Vec::new();
    let mut labels = Vec::new();
    let mut current = plan.first().map_or(1.0, |p| p.target_vo2);
    for phase in plan {
        let start = current;
        for k in 0..phase.duration_s {
            let decay = (-(k as f64) / phase.tau_s).exp();
            v.push(phase.target_vo2 + (start - phase.target_vo2) * decay);
            labels.push(phase.label.clone());
        }
        current = *v.last().unwrap_or(&start);
    }
    (v, labels)
}

/// Ground-truth subject: HR is the model's own response to the VO2 profile,
/// integrated continuously across activity changes, plus Gaussian noise.
pub fn generate_synthetic_subject(spec: &SyntheticSpec) -> Result<SubjectRecord> {
    spec.validate(&LambdaBounds::default())?;
    let (clean_vo2, labels) = synthetic_vo2(&spec.plan);
    for (i, &v) in clean_vo2.iter().enumerate() {
        let den = 1.0 - spec.lambda_true.l5 * coupling_g(&spec.lambda_true, v)?;
        if den <= SINGULARITY_EPS {
            return Err(Error::Singularity { index: i, denominator: den });
        }
    }
    let whole = UniformSeries::new(0.0, 1.0, clean_vo2.clone(), "L/min");
    let clean_hr = simulate_hr(&whole, &spec.lambda_true, &[spec.hr0])?.values;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let hr_noise = Normal::new(0.0, spec.noise_sigma_hr).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let vo2_noise = Normal::new(0.0, spec.noise_sigma_vo2).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut hr = Vec::with_capacity(clean_hr.len());
    let mut vo2 = Vec::with_capacity(clean_vo2.len());
    for (h, v) in clean_hr.iter().zip(&clean_vo2) {
        let nh = if spec.noise_sigma_hr > 0.0 { hr_noise.sample(&mut rng) } else { 0.0 };
        let nv = if spec.noise_sigma_vo2 > 0.0 { vo2_noise.sample(&mut rng) } else { 0.0 };
        hr.push(h + nh);
        // Noise must not push VO2 out of the logarithm's domain.
        vo2.push((v + nv).max(0.01));
    }
    let bounds = label_runs(&labels);
    let vo2 = UniformSeries::with_segments(0.0, 1.0, vo2, bounds.clone(), "L/min")?;
    let hr = UniformSeries::with_segments(0.0, 1.0, hr, bounds, "bpm")?;
    SubjectRecord::new(&spec.subject_id, vo2, hr, labels)
}

/// Largest |l6| drawn for synthetic subjects, bpm/min. Larger drifts move HR
/// over a session in a way no VO2-only regressor can follow.
pub const SYNTH_MAX_DRIFT: f64 = 0.03;

/// Draws a ground-truth lambda with a physiologically sensible response to
/// `plan`: l1..l5 from the middle 80% of their boxes, |l6| at most
/// [`SYNTH_MAX_DRIFT`], the denominator `1 - l5 g` above 0.05 throughout and
/// a peak-to-rest HR ratio in `[1.6, 2.6]`.
pub fn sample_plausible_lambda<R: Rng>(
    rng: &mut R,
    bounds: &LambdaBounds,
    plan: &[ActivityPhase],
) -> LambdaParams {
    let targets: Vec<f64> = plan.iter().map(|p| p.target_vo2).collect();
    let (v_min, v_max) = targets
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(a, b), &v| (a.min(v), b.max(v)));
    loop {
        let mut l = [0.0; 6];
        for k in 0..5 {
            let u: f64 = rng.random_range(0.1..0.9);
            l[k] = bounds.lo[k] + (bounds.hi[k] - bounds.lo[k]) * u;
        }
        l[5] = rng.random_range(-SYNTH_MAX_DRIFT..SYNTH_MAX_DRIFT);
        let lambda = LambdaParams::from_array(l);
        let den = |v: f64| 1.0 - lambda.l5 * coupling_g(&lambda, v).unwrap_or(f64::NAN);
        let dens: Vec<f64> = targets.iter().map(|&v| den(v)).collect();
        if dens.iter().any(|d| !(*d > 0.05)) {
            continue;
        }
        let ratio = den(v_min) / den(v_max);
        if (1.6..=2.6).contains(&ratio) {
            return lambda;
        }
    }
}

/// Random but reproducible synthetic subject on the standard protocol.
pub fn random_synthetic_spec(seed: u64, noise_sigma_hr: f64, noise_sigma_vo2: f64) -> SyntheticSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let plan = SyntheticSpec::standard_protocol();
    let lambda_true = sample_plausible_lambda(&mut rng, &LambdaBounds::default(), &plan);
    let hr0 = rng.random_range(60.0..80.0);
    SyntheticSpec {
        subject_id: format!("synth{seed:02}"),
        plan,
        lambda_true,
        hr0,
        noise_sigma_hr,
        noise_sigma_vo2,
        seed,
    }
}

/// PM response on the test part with per-segment seeding from the first
/// measured HR. Also serves as the PM's own test-time predictor.
pub fn reconstruct_pmbnn_r(test: &SubjectRecord, lambda: &LambdaParams) -> Result<UniformSeries> {
    LambdaBounds::default().check(lambda)?;
    for r in &test.vo2.segment_bounds {
        if r.len() < 2 {
            return Err(Error::SegmentTooShort { len: r.len(), min: 2 });
        }
    }
    simulate_hr(&test.vo2, lambda, &segment_initial_hr(test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub split_ratio: f64,
    pub pmbnn: TrainConfig,
    pub fcnn: TrainConfig,
    pub pm: PmFitConfig,
    pub bounds: LambdaBounds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let pmbnn = TrainConfig::default();
        let fcnn = TrainConfig { de_weight: 0.0, ..TrainConfig::default() };
        Self { split_ratio: 0.8, pmbnn, fcnn, pm: PmFitConfig::default(), bounds: LambdaBounds::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub model: ModelKind,
    pub lambda: Option<LambdaParams>,
    /// Test-part predictions; empty when the model failed.
    pub predictions: Vec<f64>,
    pub overall: Option<MetricPair>,
    pub per_activity: Vec<ActivityMetrics>,
    pub final_loss: Option<LossBreakdown>,
    pub stopped_reason: Option<StopReason>,
    pub epochs_run: usize,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub subject_id: String,
    pub split_hash: String,
    pub test_times: Vec<f64>,
    pub test_labels: Vec<String>,
    pub hr_true: Vec<f64>,
    pub models: Vec<ModelOutcome>,
}

impl SubjectResult {
    pub fn model(&self, kind: ModelKind) -> Option<&ModelOutcome> {
        self.models.iter().find(|m| m.model == kind)
    }

    pub fn metrics(&self) -> SubjectMetrics {
        SubjectMetrics {
            participant: self.subject_id.clone(),
            models: self
                .models
                .iter()
                .map(|m| ModelMetrics {
                    model: m.model,
                    overall: m.overall,
                    per_activity: m.per_activity.clone(),
                    lambda: m.lambda,
                })
                .collect(),
        }
    }
}

/// Overall and per-activity metrics of `pred` on the test part. Activity
/// metrics use only that activity's samples, so short flat segments can
/// legitimately give strongly negative R².
pub fn evaluate_prediction(test: &SubjectRecord, pred: &[f64]) -> (Option<MetricPair>, Vec<ActivityMetrics>) {
    let overall = MetricPair::compute(&test.hr.values, pred).ok();
    let mut activities: Vec<&str> = Vec::new();
    for l in &test.activity_labels {
        if !activities.contains(&l.as_str()) {
            activities.push(l);
        }
    }
    let per_activity = activities
        .into_iter()
        .map(|a| {
            let (r, p): (Vec<f64>, Vec<f64>) = test
                .activity_labels
                .iter()
                .zip(test.hr.values.iter().zip(pred))
                .filter(|(l, _)| l.as_str() == a)
                .map(|(_, (r, p))| (*r, *p))
                .unzip();
            ActivityMetrics { activity: a.to_string(), metrics: MetricPair::compute(&r, &p).ok() }
        })
        .collect();
    (overall, per_activity)
}

fn outcome(
    model: ModelKind,
    test: &SubjectRecord,
    started: Instant,
    run: Result<(Vec<f64>, Option<LambdaParams>, Option<LossBreakdown>, Option<StopReason>, usize)>,
) -> ModelOutcome {
    let wall_time_s = started.elapsed().as_secs_f64();
    match run {
        Ok((predictions, lambda, final_loss, stopped_reason, epochs_run)) => {
            let (overall, per_activity) = evaluate_prediction(test, &predictions);
            ModelOutcome {
                model,
                lambda,
                predictions,
                overall,
                per_activity,
                final_loss,
                stopped_reason,
                epochs_run,
                error: None,
                wall_time_s,
            }
        }
        Err(e) => ModelOutcome {
            model,
            lambda: None,
            predictions: Vec::new(),
            overall: None,
            per_activity: Vec::new(),
            final_loss: None,
            stopped_reason: None,
            epochs_run: 0,
            error: Some(e.to_string()),
            wall_time_s,
        },
    }
}

/// Splits once, trains PMB-NN, FCNN and PM on the same training part,
/// evaluates all of them and the PMB-NN-R reconstruction on the same test
/// part. A model that fails is reported with its error; the others proceed.
pub fn run_subject_experiment(rec: &SubjectRecord, cfg: &ExperimentConfig) -> Result<SubjectResult> {
    let split = split_by_activity(rec, cfg.split_ratio)?;
    let (train, test) = (&split.train, &split.test);
    let mut models = Vec::with_capacity(4);

    let t = Instant::now();
    let pmbnn = train_pmbnn(train, &cfg.pmbnn);
    let pmbnn_lambda = pmbnn.as_ref().ok().map(|m| m.lambda);
    models.push(outcome(
        ModelKind::Pmbnn,
        test,
        t,
        pmbnn.map(|m| {
            (m.predict(&test.vo2).values, Some(m.lambda), m.final_loss().copied(), Some(m.stopped_reason), m.loss_history.len())
        }),
    ));

    let t = Instant::now();
    let fcnn = train_fcnn(train, &cfg.fcnn).map(|m| {
        (m.predict(&test.vo2).values, None, m.final_loss().copied(), Some(m.stopped_reason), m.loss_history.len())
    });
    models.push(outcome(ModelKind::Fcnn, test, t, fcnn));

    let t = Instant::now();
    let pm = fit_pm_with(train, &cfg.bounds, &LambdaParams::initial(), &cfg.pm).and_then(|fit| {
        let pred = reconstruct_pmbnn_r(test, &fit.lambda)?;
        Ok((pred.values, Some(fit.lambda), None, None, fit.iterations))
    });
    models.push(outcome(ModelKind::Pm, test, t, pm));

    let t = Instant::now();
    let recon = match pmbnn_lambda {
        Some(l) => reconstruct_pmbnn_r(test, &l).map(|p| (p.values, Some(l), None, None, 0)),
        None => Err(Error::InvalidConfig("PMB-NN training failed; nothing to reconstruct".into())),
    };
    models.push(outcome(ModelKind::PmbnnR, test, t, recon));

    Ok(SubjectResult {
        subject_id: rec.subject_id.clone(),
        split_hash: split.provenance_hash(),
        test_times: split.test_provenance.iter().map(|p| rec.vo2.time(p.index)).collect(),
        test_labels: test.activity_labels.clone(),
        hr_true: test.hr.values.clone(),
        models,
    })
}

pub const PREDICTIONS_HEADER: [&str; 7] =
    ["t_s", "hr_true", "hr_pmbnn", "hr_fcnn", "hr_pm", "hr_pmbnn_r", "activity"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Test-part predictions of every model, one row per test sample.
pub fn write_predictions_csv<W: Write>(result: &SubjectResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PREDICTIONS_HEADER)?;
    let col = |kind: ModelKind, i: usize| {
        fmt_opt(result.model(kind).and_then(|m| m.predictions.get(i).copied()))
    };
    for i in 0..result.hr_true.len() {
        w.write_record([
            result.test_times[i].to_string(),
            result.hr_true[i].to_string(),
            col(ModelKind::Pmbnn, i),
            col(ModelKind::Fcnn, i),
            col(ModelKind::Pm, i),
            col(ModelKind::PmbnnR, i),
            result.test_labels[i].clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub subject_id: String,
    pub split_hash: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub models: Vec<ModelManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub model: ModelKind,
    pub lambda: Option<LambdaParams>,
    pub final_loss: Option<LossBreakdown>,
    pub stopped_reason: Option<StopReason>,
    pub epochs_run: usize,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

/// Writes `manifest.json`, `metrics.json` and `predictions.csv` under `dir`.
/// Only the manifest carries wall-clock times.
pub fn write_subject_outputs(result: &SubjectResult, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = ExperimentManifest {
        subject_id: result.subject_id.clone(),
        split_hash: result.split_hash.clone(),
        config: cfg.clone(),
        config_hash: crate::training::config_hash(cfg),
        models: result
            .models
            .iter()
            .map(|m| ModelManifest {
                model: m.model,
                lambda: m.lambda,
                final_loss: m.final_loss,
                stopped_reason: m.stopped_reason,
                epochs_run: m.epochs_run,
                error: m.error.clone(),
                wall_time_s: m.wall_time_s,
            })
            .collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&result.metrics())?)?;
    let f = fs::File::create(dir.join("predictions.csv"))?;
    write_predictions_csv(result, std::io::BufWriter::new(f))
}
