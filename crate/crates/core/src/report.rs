//! Cross-subject evaluation report: tables, paired comparisons and plot data.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physio::LambdaParams;
use crate::stats::{summary_stats, wilcoxon_signed_rank, Alternative, MetricPair};
use crate::training::ModelKind;

pub const SCHEMA_VERSION: u32 = 1;

/// Placed in the value cells of a comparison that could not be computed.
pub const INSUFFICIENT_PAIRS: &str = "insufficient pairs";

/// Models in the main tables, in column order.
pub const TABLE_MODELS: [ModelKind; 3] = [ModelKind::Pmbnn, ModelKind::Fcnn, ModelKind::Pm];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityMetrics {
    pub activity: String,
    /// `None` when the metric is undefined, e.g. a constant reference.
    pub metrics: Option<MetricPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: ModelKind,
    pub overall: Option<MetricPair>,
    pub per_activity: Vec<ActivityMetrics>,
    pub lambda: Option<LambdaParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub participant: String,
    pub models: Vec<ModelMetrics>,
}

impl SubjectMetrics {
    pub fn model(&self, kind: ModelKind) -> Option<&ModelMetrics> {
        self.models.iter().find(|m| m.model == kind)
    }

    fn metric(&self, kind: ModelKind, activity: Option<&str>) -> Option<MetricPair> {
        let m = self.model(kind)?;
        match activity {
            None => m.overall,
            Some(a) => m.per_activity.iter().find(|x| x.activity == a)?.metrics,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    R2,
    Rmse,
}

impl Metric {
    pub const BOTH: [Metric; 2] = [Metric::R2, Metric::Rmse];

    pub fn name(self) -> &'static str {
        match self {
            Metric::R2 => "r2",
            Metric::Rmse => "rmse",
        }
    }

    pub fn of(self, m: &MetricPair) -> f64 {
        match self {
            Metric::R2 => m.r2,
            Metric::Rmse => m.rmse,
        }
    }

    /// "Baseline better" direction: higher R², lower RMSE.
    pub fn better(self) -> Alternative {
        match self {
            Metric::R2 => Alternative::Greater,
            Metric::Rmse => Alternative::Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: ModelKind,
    pub activity: Option<String>,
    pub metric: Metric,
    pub n: usize,
    pub median: f64,
    pub max: f64,
    pub min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: ModelKind,
    pub comparator: ModelKind,
    pub activity: Option<String>,
    pub metric: Metric,
    pub alternative: Alternative,
    /// Subjects with both metrics defined.
    pub n_subjects: usize,
    pub p_one_tailed: Option<f64>,
    /// `mean(comparator - baseline) / sd`.
    pub cohens_d: Option<f64>,
    pub exact: Option<bool>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub activities: Vec<String>,
    pub subjects: Vec<SubjectMetrics>,
    pub summaries: Vec<SummaryRow>,
    pub comparisons: Vec<Comparison>,
}

/// Pairs compared in every report, baseline first.
pub const COMPARISONS: [(ModelKind, ModelKind); 3] = [
    (ModelKind::Pmbnn, ModelKind::Fcnn),
    (ModelKind::Pmbnn, ModelKind::Pm),
    (ModelKind::PmbnnR, ModelKind::Pm),
];

fn compare(
    subjects: &[SubjectMetrics],
    baseline: ModelKind,
    comparator: ModelKind,
    activity: Option<&str>,
    metric: Metric,
) -> Comparison {
    let (x, y): (Vec<f64>, Vec<f64>) = subjects
        .iter()
        .filter_map(|s| {
            let a = s.metric(baseline, activity)?;
            let b = s.metric(comparator, activity)?;
            Some((metric.of(&a), metric.of(&b)))
        })
        .unzip();
    let alternative = metric.better();
    let mut c = Comparison {
        baseline,
        comparator,
        activity: activity.map(str::to_string),
        metric,
        alternative,
        n_subjects: x.len(),
        p_one_tailed: None,
        cohens_d: None,
        exact: None,
        note: None,
    };
    if x.len() < 2 {
        c.note = Some(INSUFFICIENT_PAIRS.to_string());
        return c;
    }
    match wilcoxon_signed_rank(&x, &y, alternative) {
        Ok(t) => {
            c.p_one_tailed = Some(t.p_one_tailed);
            c.cohens_d = t.cohens_d.is_finite().then_some(t.cohens_d);
            c.exact = Some(t.exact);
        }
        Err(Error::AllZeroDifferences) => c.note = Some("all differences zero".to_string()),
        Err(e) => c.note = Some(e.to_string()),
    }
    c
}

/// Assembles summaries and paired comparisons from per-subject metrics.
pub fn build_report(subjects: &[SubjectMetrics]) -> Result<EvalReport> {
    if subjects.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut activities: Vec<String> = Vec::new();
    for s in subjects {
        for m in &s.models {
            for a in &m.per_activity {
                if !activities.contains(&a.activity) {
                    activities.push(a.activity.clone());
                }
            }
        }
    }
    let strata: Vec<Option<&str>> =
        std::iter::once(None).chain(activities.iter().map(|a| Some(a.as_str()))).collect();

    let mut summaries = Vec::new();
    for &act in &strata {
        for model in ModelKind::ALL {
            for metric in Metric::BOTH {
                let vals: Vec<f64> =
                    subjects.iter().filter_map(|s| s.metric(model, act)).map(|m| metric.of(&m)).collect();
                if let Ok(s) = summary_stats(&vals) {
                    summaries.push(SummaryRow {
                        model,
                        activity: act.map(str::to_string),
                        metric,
                        n: vals.len(),
                        median: s.median,
                        max: s.max,
                        min: s.min,
                    });
                }
            }
        }
    }

    let mut comparisons = Vec::new();
    for &act in &strata {
        for (baseline, comparator) in COMPARISONS {
            // The reconstruction is judged on the whole test part only.
            if act.is_some() && baseline == ModelKind::PmbnnR {
                continue;
            }
            for metric in Metric::BOTH {
                comparisons.push(compare(subjects, baseline, comparator, act, metric));
            }
        }
    }
    Ok(EvalReport { schema_version: SCHEMA_VERSION, activities, subjects: subjects.to_vec(), summaries, comparisons })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl EvalReport {
    pub fn comparison(
        &self,
        baseline: ModelKind,
        comparator: ModelKind,
        activity: Option<&str>,
        metric: Metric,
    ) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| {
            c.baseline == baseline
                && c.comparator == comparator
                && c.activity.as_deref() == activity
                && c.metric == metric
        })
    }

    fn footer<W: Write>(&self, w: &mut csv::Writer<W>, activity: Option<&str>) -> Result<()> {
        for (label, pick) in [
            ("p_value", (|c: &Comparison| c.p_one_tailed) as fn(&Comparison) -> Option<f64>),
            ("d_value", |c: &Comparison| c.cohens_d),
        ] {
            for (baseline, comparator) in &COMPARISONS[..2] {
                let mut row = vec![label.to_string(), comparator.label().to_string()];
                for metric in Metric::BOTH {
                    let c = self.comparison(*baseline, *comparator, activity, metric);
                    row.push(match c {
                        Some(c) if c.note.is_some() => c.note.clone().unwrap_or_default(),
                        Some(c) => cell(pick(c)),
                        None => INSUFFICIENT_PAIRS.to_string(),
                    });
                }
                if let Some(a) = activity {
                    row.push(a.to_string());
                }
                w.write_record(&row)?;
            }
        }
        Ok(())
    }

    /// `participant,model,r2,rmse`: one row per subject and model, then
    /// `p_value` and `d_value` rows with the comparator in the model column.
    pub fn write_metrics_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["participant", "model", "r2", "rmse"])?;
        for s in &self.subjects {
            for model in TABLE_MODELS {
                let m = s.metric(model, None);
                w.write_record([
                    s.participant.clone(),
                    model.label().to_string(),
                    cell(m.map(|m| m.r2)),
                    cell(m.map(|m| m.rmse)),
                ])?;
            }
        }
        self.footer(&mut w, None)?;
        w.flush()?;
        Ok(())
    }

    /// Same layout stratified by activity, with a trailing `activity` column.
    pub fn write_activity_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["participant", "model", "r2", "rmse", "activity"])?;
        for a in &self.activities {
            for s in &self.subjects {
                for model in TABLE_MODELS {
                    let m = s.metric(model, Some(a));
                    w.write_record([
                        s.participant.clone(),
                        model.label().to_string(),
                        cell(m.map(|m| m.r2)),
                        cell(m.map(|m| m.rmse)),
                        a.clone(),
                    ])?;
                }
            }
            self.footer(&mut w, Some(a))?;
        }
        w.flush()?;
        Ok(())
    }

    /// `model,activity,metric,n,median,max,min`; `all` marks the unstratified rows.
    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["model", "activity", "metric", "n", "median", "max", "min"])?;
        for r in &self.summaries {
            w.write_record([
                r.model.label().to_string(),
                r.activity.clone().unwrap_or_else(|| "all".into()),
                r.metric.name().to_string(),
                r.n.to_string(),
                r.median.to_string(),
                r.max.to_string(),
                r.min.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long format for box plots: `model,metric,value`.
    pub fn write_boxplot_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["model", "metric", "value"])?;
        for model in TABLE_MODELS {
            for metric in Metric::BOTH {
                for s in &self.subjects {
                    if let Some(m) = s.metric(model, None) {
                        w.write_record([model.label(), metric.name(), &metric.of(&m).to_string()])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `participant,l1..l6[,r2,rmse]` for the lambdas carried by `model`; the
    /// metric columns are those of `scored_by`.
    pub fn write_lambda_csv<W: Write>(&self, model: ModelKind, scored_by: Option<ModelKind>, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["participant", "l1", "l2", "l3", "l4", "l5", "l6"];
        if scored_by.is_some() {
            header.extend(["r2", "rmse"]);
        }
        w.write_record(&header)?;
        for s in &self.subjects {
            let lambda = s.model(model).and_then(|m| m.lambda);
            let mut row = vec![s.participant.clone()];
            match lambda {
                Some(l) => row.extend(l.to_array().iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat("NA".to_string()).take(6)),
            }
            if let Some(k) = scored_by {
                let m = s.metric(k, None);
                row.push(cell(m.map(|m| m.r2)));
                row.push(cell(m.map(|m| m.rmse)));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::IoFailure(format!(
                "report schema {} not supported (expected {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

/// File names written by [`emit_report`].
pub const REPORT_FILES: [&str; 7] = [
    "report.json",
    "metrics.csv",
    "activity_metrics.csv",
    "summary.csv",
    "boxplot.csv",
    "lambda_pmbnn.csv",
    "lambda_pm.csv",
];

pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::IoFailure(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let open = |name: &str| -> Result<std::io::BufWriter<fs::File>> {
        Ok(std::io::BufWriter::new(fs::File::create(dir.join(name)).map_err(io)?))
    };
    fs::write(dir.join(REPORT_FILES[0]), report.to_json()?).map_err(io)?;
    report.write_metrics_csv(open(REPORT_FILES[1])?)?;
    report.write_activity_csv(open(REPORT_FILES[2])?)?;
    report.write_summary_csv(open(REPORT_FILES[3])?)?;
    report.write_boxplot_csv(open(REPORT_FILES[4])?)?;
    report.write_lambda_csv(ModelKind::Pmbnn, Some(ModelKind::PmbnnR), open(REPORT_FILES[5])?)?;
    report.write_lambda_csv(ModelKind::Pm, None, open(REPORT_FILES[6])?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: &str, k: f64) -> SubjectMetrics {
        let pair = |r2: f64, rmse: f64| Some(MetricPair { r2, rmse });
        let mk = |model, r2: f64, rmse: f64| ModelMetrics {
            model,
            overall: pair(r2, rmse),
            per_activity: vec![
                ActivityMetrics { activity: "rest".into(), metrics: pair(r2 - 1.0, rmse - 1.0) },
                ActivityMetrics { activity: "run".into(), metrics: pair(r2 - 2.0, rmse + 1.0) },
            ],
            lambda: None,
        };
        SubjectMetrics {
            participant: id.into(),
            models: vec![
                mk(ModelKind::Pmbnn, 0.9 - 0.01 * k, 5.0 + k),
                mk(ModelKind::Fcnn, 0.88 - 0.02 * k, 5.5 + 1.1 * k),
                mk(ModelKind::Pm, 0.5 - 0.03 * k, 10.0 + 2.0 * k),
            ],
        }
    }

    #[test]
    fn single_subject_marks_tests() {
        let r = build_report(&[subject("01", 1.0)]).unwrap();
        assert!(r.comparisons.iter().all(|c| c.note.as_deref() == Some(INSUFFICIENT_PAIRS)));
        let mut buf = Vec::new();
        r.write_metrics_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("p_value,FCNN,insufficient pairs,insufficient pairs"));
        assert_eq!(text.lines().count(), 1 + 3 + 4);
    }

    #[test]
    fn pmbnn_uniformly_better_gives_small_p() {
        let subs: Vec<_> = (0..6).map(|k| subject(&format!("{k:02}"), k as f64)).collect();
        let r = build_report(&subs).unwrap();
        let c = r.comparison(ModelKind::Pmbnn, ModelKind::Pm, None, Metric::R2).unwrap();
        assert_eq!(c.p_one_tailed, Some(1.0 / 64.0));
        assert!(c.cohens_d.unwrap() < 0.0);
        let c = r.comparison(ModelKind::Pmbnn, ModelKind::Pm, None, Metric::Rmse).unwrap();
        assert_eq!(c.p_one_tailed, Some(1.0 / 64.0));
        assert!(c.cohens_d.unwrap() > 0.0);
        // No reconstruction metrics: that comparison is explicitly unavailable.
        let c = r.comparison(ModelKind::PmbnnR, ModelKind::Pm, None, Metric::R2).unwrap();
        assert_eq!(c.n_subjects, 0);
    }

    #[test]
    fn json_round_trip() {
        let subs: Vec<_> = (0..4).map(|k| subject(&format!("{k:02}"), k as f64)).collect();
        let r = build_report(&subs).unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn summaries_use_true_median() {
        let subs: Vec<_> = (0..4).map(|k| subject(&format!("{k:02}"), k as f64)).collect();
        let r = build_report(&subs).unwrap();
        let s = r
            .summaries
            .iter()
            .find(|s| s.model == ModelKind::Pmbnn && s.activity.is_none() && s.metric == Metric::Rmse)
            .unwrap();
        assert_eq!((s.median, s.max, s.min, s.n), (6.5, 8.0, 5.0, 4));
    }
}
