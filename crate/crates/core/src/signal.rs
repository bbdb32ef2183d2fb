//! Recording ingest, 1 Hz resampling and the smoothing pipeline.
//!
//! Every filter works segment by segment: a segment is a maximal run of
//! samples sharing one activity label, and no output sample ever reads a
//! value from a neighbouring segment.

use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 4] = ["time_s", "vo2_lpm", "hr_bpm", "activity"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub time: f64,
    pub vo2: Option<f64>,
    pub hr: Option<f64>,
    pub activity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecording {
    pub subject_id: String,
    pub samples: Vec<RawSample>,
}

/// A signal on a fixed grid `t0 + i * dt`, partitioned into segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformSeries {
    pub t0: f64,
    pub dt: f64,
    pub values: Vec<f64>,
    pub segment_bounds: Vec<Range<usize>>,
    pub unit: String,
}

impl UniformSeries {
    /// A single-segment series.
    pub fn new(t0: f64, dt: f64, values: Vec<f64>, unit: &str) -> Self {
        let n = values.len();
        Self { t0, dt, values, segment_bounds: vec![0..n], unit: unit.to_string() }
    }

    pub fn with_segments(
        t0: f64,
        dt: f64,
        values: Vec<f64>,
        segment_bounds: Vec<Range<usize>>,
        unit: &str,
    ) -> Result<Self> {
        check_partition(&segment_bounds, values.len())?;
        Ok(Self { t0, dt, values, segment_bounds, unit: unit.to_string() })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.segment_bounds.iter().map(move |r| &self.values[r.clone()])
    }

    /// Same grid and segmentation, new values.
    pub fn with_values(&self, values: Vec<f64>, unit: &str) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            t0: self.t0,
            dt: self.dt,
            values,
            segment_bounds: self.segment_bounds.clone(),
            unit: unit.to_string(),
        }
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn same_grid(&self, other: &UniformSeries) -> bool {
        self.t0 == other.t0
            && self.dt == other.dt
            && self.values.len() == other.values.len()
            && self.segment_bounds == other.segment_bounds
    }
}

fn check_partition(bounds: &[Range<usize>], len: usize) -> Result<()> {
    let mut next = 0;
    for r in bounds {
        if r.start != next || r.end <= r.start {
            return Err(Error::InsufficientSamples(format!(
                "segment bounds {bounds:?} do not partition 0..{len}"
            )));
        }
        next = r.end;
    }
    if next != len {
        return Err(Error::InsufficientSamples(format!(
            "segment bounds {bounds:?} do not partition 0..{len}"
        )));
    }
    Ok(())
}

/// Aligned VO2 and HR for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub vo2: UniformSeries,
    pub hr: UniformSeries,
    pub activity_labels: Vec<String>,
}

impl SubjectRecord {
    pub fn new(
        subject_id: &str,
        vo2: UniformSeries,
        hr: UniformSeries,
        activity_labels: Vec<String>,
    ) -> Result<Self> {
        if !vo2.same_grid(&hr) {
            return Err(Error::LengthMismatch { left: vo2.len(), right: hr.len() });
        }
        if activity_labels.len() != vo2.len() {
            return Err(Error::LengthMismatch { left: vo2.len(), right: activity_labels.len() });
        }
        Ok(Self { subject_id: subject_id.to_string(), vo2, hr, activity_labels })
    }

    pub fn len(&self) -> usize {
        self.vo2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vo2.is_empty()
    }

    /// Label of each segment, in order.
    pub fn segment_labels(&self) -> Vec<&str> {
        self.vo2
            .segment_bounds
            .iter()
            .map(|r| self.activity_labels[r.start].as_str())
            .collect()
    }
}

/// Index ranges of maximal runs of equal labels.
pub fn label_runs(labels: &[String]) -> Vec<Range<usize>> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[start] {
            if i > start {
                runs.push(start..i);
            }
            start = i;
        }
    }
    runs
}

fn parse_opt(field: &str, row: usize, name: &str) -> Result<Option<f64>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|e| Error::MalformedRow { row, reason: format!("{name}: {e}") })
}

/// Parses `time_s,vo2_lpm,hr_bpm,activity`. Empty cells are missing values.
pub fn parse_recording_csv<R: Read>(reader: R, subject_id: &str) -> Result<RawRecording> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::MalformedHeader(e.to_string()))?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != CSV_HEADER {
        return Err(Error::MalformedHeader(format!(
            "expected {}, found {}",
            CSV_HEADER.join(","),
            got.join(",")
        )));
    }

    let mut samples: Vec<RawSample> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // 1-based data row number, header excluded
        let row = i + 1;
        let rec = rec.map_err(|e| Error::MalformedRow { row, reason: e.to_string() })?;
        let time = rec[0]
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::MalformedRow { row, reason: format!("time_s: {e}") })?;
        if !time.is_finite() {
            return Err(Error::MalformedRow { row, reason: "time_s is not finite".into() });
        }
        let vo2 = parse_opt(&rec[1], row, "vo2_lpm")?;
        let hr = parse_opt(&rec[2], row, "hr_bpm")?;
        if vo2.is_none() && hr.is_none() {
            return Err(Error::EmptySample { row });
        }
        for (signal, v) in [("vo2", vo2), ("hr", hr)] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::NonPositiveSignal { row, signal, value: v });
                }
            }
        }
        if let Some(prev) = samples.last() {
            if time <= prev.time {
                return Err(Error::NonMonotonicTime { row, prev: prev.time, next: time });
            }
        }
        samples.push(RawSample { time, vo2, hr, activity: rec[3].trim().to_string() });
    }
    Ok(RawRecording { subject_id: subject_id.to_string(), samples })
}

fn interp_at(points: &[(f64, f64)], t: f64) -> f64 {
    // Outside the observed span the nearest observation is held.
    if t <= points[0].0 {
        return points[0].1;
    }
    let last = points[points.len() - 1];
    if t >= last.0 {
        return last.1;
    }
    let k = points.partition_point(|p| p.0 <= t);
    let (t0, v0) = points[k - 1];
    let (t1, v1) = points[k];
    if t == t0 {
        return v0;
    }
    let w = (t - t0) / (t1 - t0);
    v0 + w * (v1 - v0)
}

/// Linear interpolation of both signals onto the integer-second grid.
pub fn resample_linear_1hz(rec: &RawRecording) -> Result<SubjectRecord> {
    let samples = &rec.samples;
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "recording has {} samples",
            samples.len()
        )));
    }
    let raw_labels: Vec<String> = samples.iter().map(|s| s.activity.clone()).collect();
    for run in label_runs(&raw_labels) {
        let part = &samples[run.clone()];
        let nv = part.iter().filter(|s| s.vo2.is_some()).count();
        let nh = part.iter().filter(|s| s.hr.is_some()).count();
        if nv < 2 || nh < 2 {
            return Err(Error::InsufficientSamples(format!(
                "activity '{}' has {nv} vo2 and {nh} hr samples (need 2 each)",
                part[0].activity
            )));
        }
    }

    let vo2_pts: Vec<(f64, f64)> =
        samples.iter().filter_map(|s| s.vo2.map(|v| (s.time, v))).collect();
    let hr_pts: Vec<(f64, f64)> =
        samples.iter().filter_map(|s| s.hr.map(|v| (s.time, v))).collect();

    let first = samples[0].time.ceil();
    let last = samples[samples.len() - 1].time.floor();
    if last < first {
        return Err(Error::InsufficientSamples("recording spans no whole second".into()));
    }
    let n = (last - first) as usize + 1;
    let mut vo2 = Vec::with_capacity(n);
    let mut hr = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = first + i as f64;
        vo2.push(interp_at(&vo2_pts, t));
        hr.push(interp_at(&hr_pts, t));
        let k = samples.partition_point(|s| s.time <= t);
        labels.push(samples[k.saturating_sub(1)].activity.clone());
    }
    let bounds = label_runs(&labels);
    let vo2 = UniformSeries::with_segments(first, 1.0, vo2, bounds.clone(), "L/min")?;
    let hr = UniformSeries::with_segments(first, 1.0, hr, bounds, "bpm")?;
    SubjectRecord::new(&rec.subject_id, vo2, hr, labels)
}

/// Center-point smoothing weights of a least-squares polynomial fit.
pub fn savitzky_golay_coefficients(window: usize, polyorder: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || window < polyorder + 2 {
        return Err(Error::BadWindow { window, polyorder });
    }
    let half = (window / 2) as i64;
    let m = polyorder + 1;
    // Normal matrix A^T A with A[k][j] = k^j.
    let mut ata = vec![vec![0.0; m]; m];
    for k in -half..=half {
        let x = k as f64;
        for r in 0..m {
            for c in 0..m {
                ata[r][c] += x.powi((r + c) as i32);
            }
        }
    }
    // Row 0 of (A^T A)^-1 from solving (A^T A) z = e0 (matrix is symmetric).
    let mut e0 = vec![0.0; m];
    e0[0] = 1.0;
    let z = solve_dense(ata, e0)?;
    Ok((-half..=half)
        .map(|k| {
            let x = k as f64;
            z.iter().enumerate().map(|(j, zj)| zj * x.powi(j as i32)).sum()
        })
        .collect())
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::DegenerateDesign("singular normal matrix".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

/// Point-symmetric extension about the end samples: `2 x[0] - x[k]`.
/// Keeps polynomials of degree one intact across the edge.
fn odd_reflect(seg: &[f64], i: i64) -> f64 {
    let n = seg.len() as i64;
    if i < 0 {
        2.0 * seg[0] - seg[(-i) as usize]
    } else if i >= n {
        2.0 * seg[(n - 1) as usize] - seg[(2 * (n - 1) - i) as usize]
    } else {
        seg[i as usize]
    }
}

/// Mirror extension excluding the edge sample (`d c b | a b c d | c b a`).
fn even_reflect(seg: &[f64], i: i64) -> f64 {
    let n = seg.len() as i64;
    if i < 0 {
        seg[(-i) as usize]
    } else if i >= n {
        seg[(2 * (n - 1) - i) as usize]
    } else {
        seg[i as usize]
    }
}

fn check_windows(s: &UniformSeries, window: usize) -> Result<()> {
    for r in &s.segment_bounds {
        if window > r.len() {
            return Err(Error::WindowTooLarge { window, segment_len: r.len() });
        }
    }
    Ok(())
}

/// Order-`polyorder` Savitzky-Golay smoothing, per segment.
pub fn savitzky_golay_smooth(
    s: &UniformSeries,
    window: usize,
    polyorder: usize,
) -> Result<UniformSeries> {
    let coeffs = savitzky_golay_coefficients(window, polyorder)?;
    check_windows(s, window)?;
    let half = (window / 2) as i64;
    let mut out = Vec::with_capacity(s.len());
    for seg in s.segments() {
        for i in 0..seg.len() as i64 {
            let v: f64 = coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c * odd_reflect(seg, i + k as i64 - half))
                .sum();
            out.push(v);
        }
    }
    Ok(s.with_values(out, &s.unit))
}

/// Boxcar FIR low-pass with `taps` equal weights `1/taps`, per segment.
///
/// The window for output `i` covers `i - taps/2 ..= i - taps/2 + taps - 1`.
pub fn fir_lowpass(s: &UniformSeries, taps: usize) -> Result<UniformSeries> {
    if taps == 0 {
        return Err(Error::BadWindow { window: 0, polyorder: 0 });
    }
    check_windows(s, taps)?;
    let w = 1.0 / taps as f64;
    let shift = (taps / 2) as i64;
    let mut out = Vec::with_capacity(s.len());
    for seg in s.segments() {
        for i in 0..seg.len() as i64 {
            let acc: f64 = (0..taps as i64).map(|k| even_reflect(seg, i - shift + k)).sum();
            out.push(acc * w);
        }
    }
    Ok(s.with_values(out, &s.unit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub sg_window: usize,
    pub sg_polyorder: usize,
    pub fir_taps: usize,
    pub vo2_floor: f64,
    pub clamp_vo2: bool,
    /// Also run the Savitzky-Golay stage on HR.
    pub sg_on_hr: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            sg_window: 15,
            sg_polyorder: 1,
            fir_taps: 10,
            vo2_floor: 0.05,
            clamp_vo2: true,
            sg_on_hr: false,
        }
    }
}

/// VO2: Savitzky-Golay then FIR, then the floor clamp. HR: FIR.
pub fn preprocess_subject(rec: &SubjectRecord, cfg: &FilterConfig) -> Result<SubjectRecord> {
    let vo2 = savitzky_golay_smooth(&rec.vo2, cfg.sg_window, cfg.sg_polyorder)?;
    let mut vo2 = fir_lowpass(&vo2, cfg.fir_taps)?;
    if cfg.clamp_vo2 {
        for v in &mut vo2.values {
            *v = v.max(cfg.vo2_floor);
        }
    }
    let hr = if cfg.sg_on_hr {
        savitzky_golay_smooth(&rec.hr, cfg.sg_window, cfg.sg_polyorder)?
    } else {
        rec.hr.clone()
    };
    let hr = fir_lowpass(&hr, cfg.fir_taps)?;
    SubjectRecord::new(&rec.subject_id, vo2, hr, rec.activity_labels.clone())
}

/// Writes a record in the input CSV schema, times taken from the grid.
pub fn write_subject_csv<W: Write>(rec: &SubjectRecord, writer: W) -> Result<()> {
    write_subject_csv_with_times(rec, None, writer)
}

pub fn write_subject_csv_with_times<W: Write>(
    rec: &SubjectRecord,
    times: Option<&[f64]>,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for i in 0..rec.len() {
        let t = times.map_or_else(|| rec.vo2.time(i), |ts| ts[i]);
        w.write_record([
            t.to_string(),
            rec.vo2.values[i].to_string(),
            rec.hr.values[i].to_string(),
            rec.activity_labels[i].clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(rows: &str) -> String {
        format!("time_s,vo2_lpm,hr_bpm,activity\n{rows}")
    }

    #[test]
    fn parses_two_rows() {
        let rec = parse_recording_csv(csv("0,1.0,70,rest\n1,1.1,,rest\n").as_bytes(), "s1").unwrap();
        assert_eq!(rec.samples.len(), 2);
        assert_eq!(rec.samples[1].hr, None);
        assert_eq!(rec.samples[1].vo2, Some(1.1));
    }

    #[test]
    fn rejects_bad_header_and_rows() {
        let err = parse_recording_csv("t,vo2,hr,act\n0,1,70,rest\n".as_bytes(), "s").unwrap_err();
        assert!(matches!(err, Error::MalformedHeader(_)));

        let err = parse_recording_csv(csv("5.0,1,70,rest\n4.0,1,70,rest\n").as_bytes(), "s")
            .unwrap_err();
        assert!(matches!(err, Error::NonMonotonicTime { row: 2, .. }));

        let err = parse_recording_csv(csv("0,-0.1,70,rest\n").as_bytes(), "s").unwrap_err();
        assert!(matches!(err, Error::NonPositiveSignal { signal: "vo2", .. }));

        let err = parse_recording_csv(csv("0,,,rest\n").as_bytes(), "s").unwrap_err();
        assert!(matches!(err, Error::EmptySample { row: 1 }));
    }

    #[test]
    fn resample_midpoint_and_identity() {
        let raw = parse_recording_csv(csv("0,1.0,60,rest\n2,2.0,80,rest\n").as_bytes(), "s").unwrap();
        let rec = resample_linear_1hz(&raw).unwrap();
        assert_eq!(rec.vo2.values, vec![1.0, 1.5, 2.0]);
        assert_eq!(rec.hr.values, vec![60.0, 70.0, 80.0]);

        let raw = parse_recording_csv(
            csv("0,1.0,60,rest\n1,1.3,61,rest\n2,1.7,65,rest\n3,1.2,64,rest\n").as_bytes(),
            "s",
        )
        .unwrap();
        let rec = resample_linear_1hz(&raw).unwrap();
        assert_eq!(rec.vo2.values, vec![1.0, 1.3, 1.7, 1.2]);
        assert_eq!(rec.hr.values, vec![60.0, 61.0, 65.0, 64.0]);
    }

    #[test]
    fn resample_three_activities() {
        let mut rows = String::new();
        for (i, label) in ["rest", "rest", "cycle", "cycle", "run", "run"].iter().enumerate() {
            rows.push_str(&format!("{i},1.0,70,{label}\n"));
        }
        let rec = resample_linear_1hz(&parse_recording_csv(csv(&rows).as_bytes(), "s").unwrap())
            .unwrap();
        assert_eq!(rec.vo2.segment_bounds, vec![0..2, 2..4, 4..6]);
        assert_eq!(rec.segment_labels(), vec!["rest", "cycle", "run"]);
    }

    #[test]
    fn resample_needs_two_samples_per_activity() {
        let raw =
            parse_recording_csv(csv("0,1,70,rest\n1,1,70,rest\n2,1,70,run\n").as_bytes(), "s")
                .unwrap();
        assert!(matches!(resample_linear_1hz(&raw), Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn sg_order_one_is_moving_average() {
        // 2x2 normal equations for k = -2..2: [[5, 0], [0, 10]]; row 0 of the
        // inverse is [1/5, 0], so every center weight equals 1/5.
        let c = savitzky_golay_coefficients(5, 1).unwrap();
        for w in &c {
            assert!((w - 0.2).abs() < 1e-15);
        }
        let xs: Vec<f64> = (0..20).map(|i| ((i * 7919) % 13) as f64 * 0.37).collect();
        let s = UniformSeries::new(0.0, 1.0, xs.clone(), "u");
        let out = savitzky_golay_smooth(&s, 5, 1).unwrap();
        let i = 9;
        let avg = xs[i - 2..=i + 2].iter().sum::<f64>() / 5.0;
        assert!((out.values[i] - avg).abs() < 1e-12);
    }

    #[test]
    fn sg_window_errors() {
        let s = UniformSeries::new(0.0, 1.0, vec![1.0; 10], "u");
        assert!(matches!(savitzky_golay_smooth(&s, 4, 1), Err(Error::BadWindow { .. })));
        assert!(matches!(savitzky_golay_smooth(&s, 3, 2), Err(Error::BadWindow { .. })));
        assert!(matches!(
            savitzky_golay_smooth(&s, 11, 1),
            Err(Error::WindowTooLarge { window: 11, segment_len: 10 })
        ));
        assert!(matches!(fir_lowpass(&s, 11), Err(Error::WindowTooLarge { .. })));
    }

    #[test]
    fn sg_preserves_lines_and_constants() {
        let line: Vec<f64> = (0..40).map(|i| 0.3 * i as f64 - 2.0).collect();
        let s = UniformSeries::new(0.0, 1.0, line.clone(), "u");
        let out = savitzky_golay_smooth(&s, 15, 1).unwrap();
        for (a, b) in out.values.iter().zip(&line) {
            assert!((a - b).abs() <= 1e-12);
        }
        let c = UniformSeries::new(0.0, 1.0, vec![4.2; 30], "u");
        let out = savitzky_golay_smooth(&c, 15, 1).unwrap();
        assert!(out.values.iter().all(|v| (v - 4.2).abs() < 1e-12));
    }

    #[test]
    fn fir_impulse_and_dc() {
        let mut x = vec![0.0; 30];
        x[15] = 1.0;
        let out = fir_lowpass(&UniformSeries::new(0.0, 1.0, x, "u"), 10).unwrap();
        let nz: Vec<usize> = (0..30).filter(|&i| out.values[i] != 0.0).collect();
        assert_eq!(nz, (11..=20).collect::<Vec<_>>());
        assert!(nz.iter().all(|&i| (out.values[i] - 0.1).abs() < 1e-15));

        let out = fir_lowpass(&UniformSeries::new(0.0, 1.0, vec![3.3; 25], "u"), 10).unwrap();
        assert!(out.values.iter().all(|v| (v - 3.3).abs() <= 1e-12));
    }

    #[test]
    fn filters_stay_inside_segments() {
        let vals: Vec<f64> = (0..40).map(|i| if i < 20 { 1.0 } else { 100.0 }).collect();
        let s = UniformSeries::with_segments(0.0, 1.0, vals, vec![0..20, 20..40], "u").unwrap();
        let sg = savitzky_golay_smooth(&s, 15, 1).unwrap();
        let fir = fir_lowpass(&s, 10).unwrap();
        for out in [sg, fir] {
            assert!(out.values[..20].iter().all(|v| (v - 1.0).abs() < 1e-12));
            assert!(out.values[20..].iter().all(|v| (v - 100.0).abs() < 1e-12));
        }
    }

    #[test]
    fn preprocess_clamps_vo2_floor() {
        let vo2 = UniformSeries::new(0.0, 1.0, vec![0.01; 20], "L/min");
        let hr = UniformSeries::new(0.0, 1.0, vec![70.0; 20], "bpm");
        let rec = SubjectRecord::new("s", vo2, hr, vec!["rest".into(); 20]).unwrap();
        let out = preprocess_subject(&rec, &FilterConfig::default()).unwrap();
        assert!(out.vo2.values.iter().all(|&v| v == 0.05));
        let cfg = FilterConfig { clamp_vo2: false, ..FilterConfig::default() };
        let out = preprocess_subject(&rec, &cfg).unwrap();
        assert!(out.vo2.values.iter().all(|&v| (v - 0.01).abs() < 1e-12));
    }

    #[test]
    fn preprocess_applies_sg_before_fir() {
        let vals: Vec<f64> = (0..60).map(|i| 1.0 + 0.5 * ((i * 37) % 11) as f64 / 11.0).collect();
        let vo2 = UniformSeries::new(0.0, 1.0, vals, "L/min");
        let hr = UniformSeries::new(0.0, 1.0, vec![70.0; 60], "bpm");
        let rec = SubjectRecord::new("s", vo2.clone(), hr, vec!["rest".into(); 60]).unwrap();
        let out = preprocess_subject(&rec, &FilterConfig::default()).unwrap();
        let expect = fir_lowpass(&savitzky_golay_smooth(&vo2, 15, 1).unwrap(), 10).unwrap();
        assert_eq!(out.vo2.values, expect.values);
    }

    #[test]
    fn csv_round_trip() {
        let raw = parse_recording_csv(
            csv("0,1.25,60,rest\n1,1.5,62.5,rest\n2,2,64,run\n3,2.5,66,run\n").as_bytes(),
            "s",
        )
        .unwrap();
        let rec = resample_linear_1hz(&raw).unwrap();
        let mut buf = Vec::new();
        write_subject_csv(&rec, &mut buf).unwrap();
        let again = resample_linear_1hz(&parse_recording_csv(buf.as_slice(), "s").unwrap()).unwrap();
        assert_eq!(again, rec);
    }
}
