//! Loss terms, the PMB-NN and FCNN training loops, and the PM fitter.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lbfgs::{central_difference_gradient, lbfgs_minimize, LbfgsConfig, LbfgsStatus};
use crate::nn::{
    lambda_from_theta, mlp_backward, mlp_forward_batch, theta_from_lambda, xavier_init_with, Batch,
    MlpParams, RmspropState,
};
use crate::physio::{de_residual_series, simulate_hr, LambdaBounds, LambdaParams};
use crate::signal::{SubjectRecord, UniformSeries};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_data: f64,
    pub l_de: f64,
    pub l_tot: f64,
    pub epoch: usize,
}

/// Mean squared error between prediction and measurement.
pub fn loss_data(hr_pred: &[f64], hr_data: &[f64]) -> Result<f64> {
    if hr_pred.len() != hr_data.len() {
        return Err(Error::LengthMismatch { left: hr_pred.len(), right: hr_data.len() });
    }
    if hr_pred.is_empty() {
        return Err(Error::EmptySeries);
    }
    let sse: f64 = hr_pred.iter().zip(hr_data).map(|(p, d)| (d - p) * (d - p)).sum();
    Ok(sse / hr_pred.len() as f64)
}

/// Mean squared ODE residual over interior samples of every segment.
pub fn loss_de(hr_pred: &UniformSeries, vo2: &UniformSeries, lambda: &LambdaParams) -> Result<f64> {
    let f = de_residual_series(hr_pred, vo2, lambda)?;
    if f.is_empty() {
        return Err(Error::EmptySeries);
    }
    Ok(f.values.iter().map(|r| r * r).sum::<f64>() / f.len() as f64)
}

pub fn loss_total(l_data: f64, l_de: f64, w: f64) -> f64 {
    l_data + w * l_de
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Training stops once the total loss drops below this value.
    pub stop_threshold: f64,
    pub de_weight: f64,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    pub standardize_input: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 5000,
            stop_threshold: 10.0,
            de_weight: 1e5,
            lr: 0.01,
            rho: 0.99,
            eps: 1e-8,
            seed: 0,
            standardize_input: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if !(self.de_weight >= 0.0) {
            return Err(Error::InvalidConfig("de_weight must be >= 0".into()));
        }
        if !(self.stop_threshold > 0.0) {
            return Err(Error::InvalidConfig("stop_threshold must be > 0".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("optimizer settings out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Threshold,
    EpochCap,
    /// The loss went non-finite; parameters are the last finite ones.
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub mlp: MlpParams,
    pub lambda: LambdaParams,
    pub bounds: LambdaBounds,
    pub loss_history: Vec<LossBreakdown>,
    pub stopped_reason: StopReason,
    pub input_shift: f64,
    pub input_scale: f64,
}

impl TrainedModel {
    pub fn predict(&self, vo2: &UniformSeries) -> UniformSeries {
        let x: Vec<f64> =
            vo2.values.iter().map(|v| (v - self.input_shift) / self.input_scale).collect();
        vo2.with_values(mlp_forward_batch(&self.mlp, &x), "bpm")
    }

    pub fn final_loss(&self) -> Option<&LossBreakdown> {
        self.loss_history.last()
    }
}

/// The full-batch RMSprop loop shared by PMB-NN and FCNN. `observe` sees the
/// parameters after every update.
pub fn train_with_observer<O>(
    train: &SubjectRecord,
    cfg: &TrainConfig,
    de_weight: f64,
    mut observe: O,
) -> Result<TrainedModel>
where
    O: FnMut(usize, &MlpParams),
{
    cfg.validate()?;
    if let Some(v) = train.vo2.values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NonPositiveVo2(*v));
    }
    let bounds = LambdaBounds::default();
    let (input_shift, input_scale) = if cfg.standardize_input {
        let n = train.vo2.len() as f64;
        let mean = train.vo2.values.iter().sum::<f64>() / n;
        let var = train.vo2.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt().max(1e-12))
    } else {
        (0.0, 1.0)
    };
    let batch = Batch { bounds, de_weight, input_shift, input_scale, ..Batch::new(&train.vo2, &train.hr, de_weight) };

    let mut params = xavier_init_with(cfg.seed, &LambdaParams::initial(), &bounds)?;
    let mut opt = RmspropState::new(cfg.lr, cfg.rho, cfg.eps);
    let mut history = Vec::new();
    let mut reason = StopReason::EpochCap;
    let mut last_finite = params.clone();

    for epoch in 0..cfg.max_epochs {
        let (mut loss, grads) = match mlp_backward(&params, &batch) {
            Ok(v) => v,
            Err(Error::NonFiniteLoss) => {
                log::warn!("loss diverged at epoch {epoch}; keeping last finite parameters");
                params = last_finite;
                reason = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        loss.epoch = epoch;
        history.push(loss);
        if loss.l_tot < cfg.stop_threshold {
            reason = StopReason::Threshold;
            break;
        }
        last_finite.clone_from(&params);
        if let Err(e) = opt.step(&mut params, &grads) {
            log::warn!("optimizer rejected step at epoch {epoch}: {e}");
            params = last_finite;
            reason = StopReason::Diverged;
            break;
        }
        observe(epoch, &params);
    }

    let lambda = params.lambda(&bounds)?;
    Ok(TrainedModel {
        mlp: params,
        lambda,
        bounds,
        loss_history: history,
        stopped_reason: reason,
        input_shift,
        input_scale,
    })
}

/// Algorithm: forward pass, weighted data + ODE loss, backprop, RMSprop.
pub fn train_pmbnn(train: &SubjectRecord, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_with_observer(train, cfg, cfg.de_weight, |_, _| {})
}

/// Same loop with the ODE term switched off.
pub fn train_fcnn(train: &SubjectRecord, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_with_observer(train, cfg, 0.0, |_, _| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PmObjective {
    /// MSE between forward-simulated and measured HR.
    #[default]
    Trajectory,
    /// Mean squared ODE residual of the measured HR.
    Collocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PmFitConfig {
    pub max_iters: usize,
    pub memory: usize,
    pub fd_step: f64,
    pub objective: PmObjective,
}

impl Default for PmFitConfig {
    fn default() -> Self {
        Self { max_iters: 200, memory: 10, fd_step: 1e-6, objective: PmObjective::Trajectory }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmFit {
    pub lambda: LambdaParams,
    pub objective: f64,
    pub iterations: usize,
    pub status: LbfgsStatus,
    pub objective_history: Vec<f64>,
}

/// First measured HR of each segment.
pub fn segment_initial_hr(rec: &SubjectRecord) -> Vec<f64> {
    rec.hr.segment_bounds.iter().map(|r| rec.hr.values[r.start]).collect()
}

/// Trajectory MSE of the PM at `lambda`; singular configurations score +inf.
pub fn pm_trajectory_mse(rec: &SubjectRecord, lambda: &LambdaParams) -> Result<f64> {
    match simulate_hr(&rec.vo2, lambda, &segment_initial_hr(rec)) {
        Ok(sim) => loss_data(&sim.values, &rec.hr.values),
        Err(Error::Singularity { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

pub fn fit_pm(
    train: &SubjectRecord,
    bounds: &LambdaBounds,
    init: &LambdaParams,
) -> Result<LambdaParams> {
    fit_pm_with(train, bounds, init, &PmFitConfig::default()).map(|f| f.lambda)
}

/// L-BFGS over the sigmoid pre-images of lambda with a finite-difference
/// gradient.
pub fn fit_pm_with(
    train: &SubjectRecord,
    bounds: &LambdaBounds,
    init: &LambdaParams,
    cfg: &PmFitConfig,
) -> Result<PmFit> {
    bounds.validate()?;
    if let Some(v) = train.vo2.values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NonPositiveVo2(*v));
    }
    for r in &train.vo2.segment_bounds {
        if r.len() < 3 {
            return Err(Error::SegmentTooShort { len: r.len(), min: 3 });
        }
    }
    let theta0 = theta_from_lambda(init, bounds)?;

    let score = |theta: &[f64]| -> f64 {
        let Ok(lambda) = lambda_from_theta(theta, bounds) else {
            return f64::INFINITY;
        };
        let v = match cfg.objective {
            PmObjective::Trajectory => pm_trajectory_mse(train, &lambda),
            PmObjective::Collocation => loss_de(&train.hr, &train.vo2, &lambda),
        };
        v.unwrap_or(f64::INFINITY)
    };
    let mut score_fd = score;
    let objective = |theta: &[f64]| {
        let f = score(theta);
        let g = if f.is_finite() {
            central_difference_gradient(&mut score_fd, theta, cfg.fd_step)
        } else {
            vec![0.0; theta.len()]
        };
        (f, g)
    };
    let lcfg = LbfgsConfig { max_iters: cfg.max_iters, memory: cfg.memory, ..Default::default() };
    let res = lbfgs_minimize(objective, &theta0, &lcfg);
    if !res.f.is_finite() {
        return Err(Error::Singularity { index: 0, denominator: f64::NAN });
    }
    Ok(PmFit {
        lambda: lambda_from_theta(&res.x, bounds)?,
        objective: res.f,
        iterations: res.iterations,
        status: res.status,
        objective_history: res.f_history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Pmbnn,
    Fcnn,
    Pm,
    PmbnnR,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Pmbnn, ModelKind::Fcnn, ModelKind::Pm, ModelKind::PmbnnR];

    /// Column label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Pmbnn => "PMB-NN",
            ModelKind::Fcnn => "FCNN",
            ModelKind::Pm => "PM",
            ModelKind::PmbnnR => "PMB-NN-R",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            ModelKind::Pmbnn => "pmbnn",
            ModelKind::Fcnn => "fcnn",
            ModelKind::Pm => "pm",
            ModelKind::PmbnnR => "pmbnn_r",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "pmbnn" | "pmb-nn" => Ok(ModelKind::Pmbnn),
            "fcnn" => Ok(ModelKind::Fcnn),
            "pm" => Ok(ModelKind::Pm),
            "pmbnn-r" | "pmb-nn-r" => Ok(ModelKind::PmbnnR),
            other => Err(Error::InvalidConfig(format!("unknown model '{other}'"))),
        }
    }
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-run record written next to every trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subject_id: String,
    pub model: ModelKind,
    pub train_config: TrainConfig,
    pub lambda: LambdaParams,
    pub final_losses: Option<LossBreakdown>,
    pub stopped_reason: Option<StopReason>,
    pub epochs_run: usize,
    pub wall_time_s: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SubjectRecord;

    fn record(vo2: Vec<f64>, hr: Vec<f64>, bounds: Vec<std::ops::Range<usize>>) -> SubjectRecord {
        let n = vo2.len();
        let v = UniformSeries::with_segments(0.0, 1.0, vo2, bounds.clone(), "L/min").unwrap();
        let h = UniformSeries::with_segments(0.0, 1.0, hr, bounds, "bpm").unwrap();
        SubjectRecord::new("t", v, h, vec!["rest".into(); n]).unwrap()
    }

    #[test]
    fn data_loss_values() {
        assert_eq!(loss_data(&[60.0, 70.0], &[60.0, 70.0]).unwrap(), 0.0);
        assert_eq!(loss_data(&[63.0, 73.0], &[60.0, 70.0]).unwrap(), 9.0);
        assert_eq!(loss_data(&[61.0, 68.0], &[60.0, 70.0]).unwrap(), 2.5);
        assert!(matches!(loss_data(&[], &[]), Err(Error::EmptySeries)));
        assert!(matches!(loss_data(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn de_loss_values() {
        let vo2 = UniformSeries::new(0.0, 1.0, vec![1.4; 9], "L/min");
        let hr = UniformSeries::new(0.0, 1.0, vec![88.0; 9], "bpm");
        let l = LambdaParams::initial();
        assert!((loss_de(&hr, &vo2, &l).unwrap() - 0.09).abs() < 1e-12);

        let vals: Vec<f64> = (0..40).map(|i| 70.0 + ((i * 17) % 7) as f64).collect();
        let vo2v: Vec<f64> = (0..40).map(|i| 0.9 + 0.01 * i as f64).collect();
        let vo2 = UniformSeries::with_segments(0.0, 1.0, vo2v, vec![0..15, 15..40], "L/min").unwrap();
        let hr = vo2.with_values(vals, "bpm");
        let f = de_residual_series(&hr, &vo2, &l).unwrap();
        let expect = f.values.iter().map(|x| x * x).sum::<f64>() / f.len() as f64;
        assert!((loss_de(&hr, &vo2, &l).unwrap() - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn total_loss() {
        assert!((loss_total(4.0, 3e-5, 1e5) - 7.0).abs() < 1e-12);
        assert_eq!(loss_total(4.0, 3e-5, 0.0), 4.0);
        assert_eq!(loss_total(0.0, 0.0, 1e5), 0.0);
    }

    fn ramp_record() -> SubjectRecord {
        let vo2: Vec<f64> = (0..60).map(|i| 0.5 + 0.03 * i as f64).collect();
        let hr: Vec<f64> = vo2.iter().map(|v| 55.0 + 40.0 * v).collect();
        record(vo2, hr, vec![0..30, 30..60])
    }

    #[test]
    fn single_epoch_hits_cap() {
        let cfg = TrainConfig { max_epochs: 1, ..Default::default() };
        let m = train_pmbnn(&ramp_record(), &cfg).unwrap();
        assert_eq!(m.loss_history.len(), 1);
        assert_eq!(m.stopped_reason, StopReason::EpochCap);
        assert!(m.bounds.contains(&m.lambda));
    }

    #[test]
    fn threshold_stop_is_recorded() {
        let cfg = TrainConfig { max_epochs: 3000, stop_threshold: 50.0, de_weight: 0.0, ..Default::default() };
        let m = train_fcnn(&ramp_record(), &cfg).unwrap();
        assert_eq!(m.stopped_reason, StopReason::Threshold);
        assert!(m.final_loss().unwrap().l_tot < 50.0);
        assert!(m.loss_history.len() <= 3000);
    }

    #[test]
    fn fcnn_fits_representable_data_and_ignores_de_weight() {
        let cfg = TrainConfig { max_epochs: 1500, stop_threshold: 1e-9, de_weight: 1e5, ..Default::default() };
        let rec = ramp_record();
        let m = train_fcnn(&rec, &cfg).unwrap();
        let h = &m.loss_history;
        assert!(h.iter().all(|l| l.l_tot == l.l_data));
        let early: f64 = h[..50].iter().map(|l| l.l_data).sum::<f64>() / 50.0;
        let late: f64 = h[h.len() - 50..].iter().map(|l| l.l_data).sum::<f64>() / 50.0;
        assert!(late < 0.01 * early, "{early} -> {late}");
        let init = crate::nn::xavier_init(cfg.seed);
        assert_eq!(m.mlp.theta, init.theta);
    }

    #[test]
    fn fcnn_and_pmbnn_share_initialization() {
        let rec = ramp_record();
        let cfg = TrainConfig { max_epochs: 1, seed: 4, ..Default::default() };
        let a = train_pmbnn(&rec, &cfg).unwrap();
        let b = train_fcnn(&rec, &cfg).unwrap();
        assert_eq!(a.loss_history[0].l_data, b.loss_history[0].l_data);
    }

    #[test]
    fn zero_weight_pmbnn_equals_fcnn() {
        let rec = ramp_record();
        let cfg = TrainConfig { max_epochs: 30, seed: 8, de_weight: 0.0, ..Default::default() };
        let a = train_pmbnn(&rec, &cfg).unwrap();
        let b = train_fcnn(&rec, &TrainConfig { de_weight: 1e5, ..cfg.clone() }).unwrap();
        assert_eq!(a.mlp, b.mlp);
    }

    #[test]
    fn config_validation() {
        let rec = ramp_record();
        for cfg in [
            TrainConfig { max_epochs: 0, ..Default::default() },
            TrainConfig { de_weight: -1.0, ..Default::default() },
            TrainConfig { stop_threshold: 0.0, ..Default::default() },
        ] {
            assert!(matches!(train_pmbnn(&rec, &cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn fit_pm_keeps_exact_initial_solution() {
        let vo2: Vec<f64> = (0..90).map(|i| 0.6 + 0.5 * (i as f64 / 20.0).sin().abs()).collect();
        let v = UniformSeries::with_segments(0.0, 1.0, vo2, vec![0..45, 45..90], "L/min").unwrap();
        let init = LambdaParams::initial();
        let hr = simulate_hr(&v, &init, &[70.0, 95.0]).unwrap();
        let rec = SubjectRecord::new("t", v, hr, vec!["rest".into(); 90]).unwrap();
        let bounds = LambdaBounds::default();
        let fit = fit_pm(&rec, &bounds, &init).unwrap();
        for (a, b) in fit.to_array().iter().zip(init.to_array()) {
            assert!((a - b).abs() <= 1e-9 * b.abs(), "{a} vs {b}");
        }
        assert!(bounds.contains(&fit));
    }

    #[test]
    fn fit_pm_objective_never_increases() {
        let vo2: Vec<f64> = (0..120).map(|i| 0.5 + 0.02 * i as f64).collect();
        let v = UniformSeries::with_segments(0.0, 1.0, vo2, vec![0..60, 60..120], "L/min").unwrap();
        let truth = LambdaParams::new(0.015, 0.12, -2.5, 15.0, 0.3, 0.1);
        let hr = simulate_hr(&v, &truth, &[70.0, 90.0]).unwrap();
        let rec = SubjectRecord::new("t", v, hr, vec!["rest".into(); 120]).unwrap();
        let bounds = LambdaBounds::default();
        let fit = fit_pm_with(&rec, &bounds, &LambdaParams::initial(), &PmFitConfig::default()).unwrap();
        assert!(fit.objective_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(bounds.contains(&fit.lambda));
        assert!(fit.objective < fit.objective_history[0]);
    }

    #[test]
    fn fit_pm_rejects_nonpositive_vo2() {
        let rec = record(vec![1.0, 0.0, 1.0, 1.0], vec![70.0; 4], vec![0..4]);
        let err = fit_pm(&rec, &LambdaBounds::default(), &LambdaParams::initial()).unwrap_err();
        assert!(matches!(err, Error::NonPositiveVo2(_)));
    }

    #[test]
    fn model_kind_parsing() {
        assert_eq!("pmbnn".parse::<ModelKind>().unwrap(), ModelKind::Pmbnn);
        assert_eq!("PMB-NN-R".parse::<ModelKind>().unwrap(), ModelKind::PmbnnR);
        assert!("svm".parse::<ModelKind>().is_err());
    }
}
