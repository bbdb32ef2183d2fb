//! Simplified cardiovascular model relating oxygen uptake to heart rate.
//!
//! Stroke volume and peripheral resistance are logarithmic in VO2, cardiac
//! output is `HR * SV`, mean arterial pressure is `CO * TPR`, and changes in
//! heart rate follow changes in MAP linearly:
//!
//! ```text
//! dHR/dt = l5 * d(HR * g(VO2))/dt + l6,   g = SV * TPR
//! ```
//!
//! Rearranged, `Q = HR * (1 - l5 * g)` obeys `dQ/dt = l6`. The simulator
//! steps `Q`, which is what makes the discrete residual vanish on its own
//! trajectories. Time is in minutes internally; one 1 Hz sample is 1/60 min.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::UniformSeries;

/// Guard on `|1 - l5 * g|` below which the ODE is treated as singular.
pub const SINGULARITY_EPS: f64 = 1e-6;

pub const SECONDS_PER_MINUTE: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaParams {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub l5: f64,
    pub l6: f64,
}

impl LambdaParams {
    pub const fn new(l1: f64, l2: f64, l3: f64, l4: f64, l5: f64, l6: f64) -> Self {
        Self { l1, l2, l3, l4, l5, l6 }
    }

    /// Data-fitted starting point for every fitter.
    pub const fn initial() -> Self {
        Self::new(0.02, 0.1, -5.3, 10.5, 0.44, 0.3)
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.l1, self.l2, self.l3, self.l4, self.l5, self.l6]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    /// Coefficients of `g` as a quadratic in `ln v`: `(l1 l3, l1 l4 + l2 l3, l2 l4)`.
    /// Dynamics depend on `(l1..l4)` only through these.
    pub fn coupling_products(&self) -> [f64; 3] {
        [self.l1 * self.l3, self.l1 * self.l4 + self.l2 * self.l3, self.l2 * self.l4]
    }
}

impl Default for LambdaParams {
    fn default() -> Self {
        Self::initial()
    }
}

/// Open box `(lo, hi)` for each of the six parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaBounds {
    pub lo: [f64; 6],
    pub hi: [f64; 6],
}

impl Default for LambdaBounds {
    fn default() -> Self {
        Self { lo: [0.01, 0.06, -6.0, 7.0, 0.1, -0.5], hi: [0.03, 0.15, -2.0, 20.0, 0.6, 0.5] }
    }
}

impl LambdaBounds {
    pub fn validate(&self) -> Result<()> {
        for k in 0..6 {
            if !(self.lo[k] < self.hi[k]) {
                return Err(Error::BadBounds { lo: self.lo[k], hi: self.hi[k] });
            }
        }
        Ok(())
    }

    /// Strict interior membership.
    pub fn contains(&self, lambda: &LambdaParams) -> bool {
        lambda
            .to_array()
            .iter()
            .enumerate()
            .all(|(k, &v)| v > self.lo[k] && v < self.hi[k])
    }

    /// Like [`contains`](Self::contains) but names the first offending value.
    pub fn check(&self, lambda: &LambdaParams) -> Result<()> {
        for (k, &v) in lambda.to_array().iter().enumerate() {
            if !(v > self.lo[k] && v < self.hi[k]) {
                return Err(Error::OutOfBounds { value: v, lo: self.lo[k], hi: self.hi[k] });
            }
        }
        Ok(())
    }

    pub fn midpoint(&self) -> LambdaParams {
        let mut m = [0.0; 6];
        for k in 0..6 {
            m[k] = 0.5 * (self.lo[k] + self.hi[k]);
        }
        LambdaParams::from_array(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HemoState {
    pub sv: f64,
    pub tpr: f64,
    pub co: f64,
    pub map: f64,
}

fn ln_vo2(vo2: f64) -> Result<f64> {
    if !(vo2 > 0.0) {
        return Err(Error::NonPositiveVo2(vo2));
    }
    Ok(vo2.ln())
}

/// `SV = l1 ln(VO2) + l2`, VO2 in L/min.
pub fn stroke_volume(lambda: &LambdaParams, vo2: f64) -> Result<f64> {
    Ok(lambda.l1 * ln_vo2(vo2)? + lambda.l2)
}

/// `TPR = l3 ln(VO2) + l4`.
pub fn peripheral_resistance(lambda: &LambdaParams, vo2: f64) -> Result<f64> {
    Ok(lambda.l3 * ln_vo2(vo2)? + lambda.l4)
}

/// `g = SV * TPR`, so that `MAP = HR * g`.
pub fn coupling_g(lambda: &LambdaParams, vo2: f64) -> Result<f64> {
    Ok(stroke_volume(lambda, vo2)? * peripheral_resistance(lambda, vo2)?)
}

/// `dg/dv` at `vo2`.
pub fn coupling_g_dv(lambda: &LambdaParams, vo2: f64) -> Result<f64> {
    let lv = ln_vo2(vo2)?;
    let [a, b, _] = lambda.coupling_products();
    Ok((2.0 * a * lv + b) / vo2)
}

pub fn mean_arterial_pressure(hr: f64, lambda: &LambdaParams, vo2: f64) -> Result<HemoState> {
    let sv = stroke_volume(lambda, vo2)?;
    let tpr = peripheral_resistance(lambda, vo2)?;
    let co = hr * sv;
    Ok(HemoState { sv, tpr, co, map: co * tpr })
}

/// Cuff estimate `SBP/3 + 2 DBP/3`.
pub fn map_from_sbp_dbp(sbp: f64, dbp: f64) -> Result<f64> {
    if sbp < dbp {
        return Err(Error::InvertedPressures { sbp, dbp });
    }
    Ok(sbp / 3.0 + 2.0 * dbp / 3.0)
}

/// Explicit `dHR/dt` (bpm/min) solved out of the implicit MAP coupling:
/// `(l5 HR g'(t) + l6) / (1 - l5 g)` with `g'(t) = dg/dv * dVO2/dt`.
pub fn ode_rhs(hr: f64, vo2: f64, dvo2_dt: f64, lambda: &LambdaParams) -> Result<f64> {
    let g = coupling_g(lambda, vo2)?;
    let den = 1.0 - lambda.l5 * g;
    if den.abs() <= SINGULARITY_EPS {
        return Err(Error::Singularity { index: 0, denominator: den });
    }
    let g_t = coupling_g_dv(lambda, vo2)? * dvo2_dt;
    Ok((lambda.l5 * hr * g_t + lambda.l6) / den)
}

/// Per-minute central differences inside each segment, one-sided at its edges.
pub fn segment_derivative(s: &UniformSeries) -> Vec<f64> {
    let h = s.dt / SECONDS_PER_MINUTE;
    let mut out = Vec::with_capacity(s.len());
    for seg in s.segments() {
        let n = seg.len();
        for i in 0..n {
            let d = if n == 1 {
                0.0
            } else if i == 0 {
                (seg[1] - seg[0]) / h
            } else if i == n - 1 {
                (seg[n - 1] - seg[n - 2]) / h
            } else {
                (seg[i + 1] - seg[i - 1]) / (2.0 * h)
            };
            out.push(d);
        }
    }
    out
}

/// `1 - l5 g(v)` at every sample, rejecting values inside the singular band
/// or a sign flip within a segment (HR would pass through infinity).
pub(crate) fn denominators(vo2: &UniformSeries, lambda: &LambdaParams) -> Result<Vec<f64>> {
    let mut den = Vec::with_capacity(vo2.len());
    for r in &vo2.segment_bounds {
        let mut first_sign = 0.0;
        for i in r.clone() {
            let d = 1.0 - lambda.l5 * coupling_g(lambda, vo2.values[i])?;
            if d.abs() <= SINGULARITY_EPS {
                return Err(Error::Singularity { index: i, denominator: d });
            }
            if i == r.start {
                first_sign = d.signum();
            } else if d.signum() != first_sign {
                return Err(Error::Singularity { index: i, denominator: d });
            }
            den.push(d);
        }
    }
    Ok(den)
}

/// Integrates the model independently in each segment of `vo2`.
///
/// Each step is an explicit Euler step of `dQ/dt = l6` on the conserved
/// quantity `Q = HR (1 - l5 g)`, which is the same ODE as [`ode_rhs`]
/// written in divergence form. Because the right-hand side is constant the
/// step is exact, and central-difference residuals of the output vanish.
pub fn simulate_hr(
    vo2: &UniformSeries,
    lambda: &LambdaParams,
    hr0_per_segment: &[f64],
) -> Result<UniformSeries> {
    if hr0_per_segment.len() != vo2.segment_bounds.len() {
        return Err(Error::LengthMismatch {
            left: hr0_per_segment.len(),
            right: vo2.segment_bounds.len(),
        });
    }
    let den = denominators(vo2, lambda)?;
    let step = lambda.l6 * vo2.dt / SECONDS_PER_MINUTE;
    let mut hr = Vec::with_capacity(vo2.len());
    for (r, &hr0) in vo2.segment_bounds.iter().zip(hr0_per_segment) {
        let q0 = hr0 * den[r.start];
        for (k, i) in r.clone().enumerate() {
            let q = q0 + step * k as f64;
            hr.push(q / den[i]);
        }
    }
    Ok(vo2.with_values(hr, "bpm"))
}

/// Discrete residual `F_i = HR'_i - l6 - l5 P'_i`, `P = HR g`, central
/// differences in per-minute units at interior samples of every segment.
/// Each segment contributes `len - 2` residuals.
pub fn de_residual_series(
    hr: &UniformSeries,
    vo2: &UniformSeries,
    lambda: &LambdaParams,
) -> Result<UniformSeries> {
    if !hr.same_grid(vo2) {
        return Err(Error::LengthMismatch { left: hr.len(), right: vo2.len() });
    }
    let inv_2h = SECONDS_PER_MINUTE / (2.0 * vo2.dt);
    let mut res = Vec::with_capacity(hr.len());
    let mut bounds = Vec::with_capacity(hr.segment_bounds.len());
    for r in &hr.segment_bounds {
        if r.len() < 3 {
            return Err(Error::SegmentTooShort { len: r.len(), min: 3 });
        }
        let g: Vec<f64> = r
            .clone()
            .map(|i| coupling_g(lambda, vo2.values[i]))
            .collect::<Result<_>>()?;
        let h = &hr.values[r.clone()];
        let start = res.len();
        for i in 1..r.len() - 1 {
            let d_hr = (h[i + 1] - h[i - 1]) * inv_2h;
            let d_p = (h[i + 1] * g[i + 1] - h[i - 1] * g[i - 1]) * inv_2h;
            res.push(d_hr - lambda.l6 - lambda.l5 * d_p);
        }
        bounds.push(start..res.len());
    }
    Ok(UniformSeries {
        t0: hr.t0 + hr.dt,
        dt: hr.dt,
        values: res,
        segment_bounds: bounds,
        unit: "bpm/min".into(),
    })
}
