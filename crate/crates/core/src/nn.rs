//! Fixed 1-64-64-1 Tanh network with hand-written reverse mode.
//!
//! The six physiological parameters ride along as unconstrained `theta`
//! values mapped into their boxes by a scaled logistic, so gradient steps can
//! never leave the admissible region.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physio::{coupling_g, peripheral_resistance, stroke_volume, LambdaBounds, LambdaParams};
use crate::physio::SECONDS_PER_MINUTE;
use crate::signal::UniformSeries;
use crate::training::LossBreakdown;

pub const HIDDEN: usize = 64;
pub const LAYER_SIZES: [usize; 4] = [1, HIDDEN, HIDDEN, 1];

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `lo + (hi - lo) * sigmoid(theta)`.
pub fn bounded_transform(theta: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::BadBounds { lo, hi });
    }
    // Saturated sigmoids would otherwise round onto the bounds themselves.
    Ok((lo + (hi - lo) * sigmoid(theta)).clamp(lo.next_up(), hi.next_down()))
}

/// Inverse of [`bounded_transform`]: `logit((lambda - lo) / (hi - lo))`.
pub fn bounded_inverse(lambda: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::BadBounds { lo, hi });
    }
    if !(lambda > lo && lambda < hi) {
        return Err(Error::OutOfBounds { value: lambda, lo, hi });
    }
    let u = (lambda - lo) / (hi - lo);
    Ok((u / (1.0 - u)).ln())
}

/// d lambda / d theta.
fn bounded_slope(theta: f64, lo: f64, hi: f64) -> f64 {
    let s = sigmoid(theta);
    (hi - lo) * s * (1.0 - s)
}

pub fn lambda_from_theta(theta: &[f64], bounds: &LambdaBounds) -> Result<LambdaParams> {
    let mut l = [0.0; 6];
    for k in 0..6 {
        l[k] = bounded_transform(theta[k], bounds.lo[k], bounds.hi[k])?;
    }
    Ok(LambdaParams::from_array(l))
}

pub fn theta_from_lambda(lambda: &LambdaParams, bounds: &LambdaBounds) -> Result<[f64; 6]> {
    let l = lambda.to_array();
    let mut t = [0.0; 6];
    for k in 0..6 {
        t[k] = bounded_inverse(l[k], bounds.lo[k], bounds.hi[k])?;
    }
    Ok(t)
}

/// Network weights plus the six bound-mapped physiological pre-images.
/// Weight matrices are `(fan_out, fan_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub theta: Array1<f64>,
}

/// Same shape as the parameters they differentiate.
pub type Gradients = MlpParams;

impl MlpParams {
    pub fn zeros() -> Self {
        Self {
            w1: Array2::zeros((HIDDEN, 1)),
            b1: Array1::zeros(HIDDEN),
            w2: Array2::zeros((HIDDEN, HIDDEN)),
            b2: Array1::zeros(HIDDEN),
            w3: Array2::zeros((1, HIDDEN)),
            b3: Array1::zeros(1),
            theta: Array1::zeros(6),
        }
    }

    pub fn n_params() -> usize {
        HIDDEN + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN + 1 + 6
    }

    pub fn slices(&self) -> [&[f64]; 7] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
            self.theta.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
            self.theta.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Flat view in the order w1, b1, w2, b2, w3, b3, theta.
    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().iter().flat_map(|s| s.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::n_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values, got {}",
                Self::n_params(),
                flat.len()
            )));
        }
        let mut p = Self::zeros();
        let mut off = 0;
        for s in p.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(p)
    }

    pub fn lambda(&self, bounds: &LambdaBounds) -> Result<LambdaParams> {
        lambda_from_theta(self.theta.as_slice().expect("standard layout"), bounds)
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Xavier-uniform weights, zero biases, theta at the Table-1 style initial
/// values of `bounds`' owner. Deterministic in `seed`.
pub fn xavier_init(seed: u64) -> MlpParams {
    xavier_init_with(seed, &LambdaParams::initial(), &LambdaBounds::default())
        .expect("default initial values lie inside default bounds")
}

pub fn xavier_init_with(
    seed: u64,
    initial: &LambdaParams,
    bounds: &LambdaBounds,
) -> Result<MlpParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MlpParams::zeros();
    for (w, fan_in, fan_out) in [
        (&mut p.w1, 1usize, HIDDEN),
        (&mut p.w2, HIDDEN, HIDDEN),
        (&mut p.w3, HIDDEN, 1usize),
    ] {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in w.iter_mut() {
            *v = rng.random_range(-a..a);
        }
    }
    let t = theta_from_lambda(initial, bounds)?;
    p.theta = Array1::from_vec(t.to_vec());
    Ok(p)
}

/// Single-input forward pass written with plain loops.
pub fn mlp_forward(p: &MlpParams, vo2: f64) -> f64 {
    let mut h1 = [0.0; HIDDEN];
    for j in 0..HIDDEN {
        h1[j] = (p.w1[[j, 0]] * vo2 + p.b1[j]).tanh();
    }
    let mut out = p.b3[0];
    for j in 0..HIDDEN {
        let mut z = p.b2[j];
        for k in 0..HIDDEN {
            z += p.w2[[j, k]] * h1[k];
        }
        out += p.w3[[0, j]] * z.tanh();
    }
    out
}

struct Activations {
    x: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    y: Array1<f64>,
}

fn forward_cached(p: &MlpParams, inputs: &[f64]) -> Activations {
    let x = Array2::from_shape_vec((inputs.len(), 1), inputs.to_vec()).expect("column");
    let mut h1 = x.dot(&p.w1.t()) + &p.b1;
    h1.mapv_inplace(f64::tanh);
    let mut h2 = h1.dot(&p.w2.t()) + &p.b2;
    h2.mapv_inplace(f64::tanh);
    let y = (h2.dot(&p.w3.t()) + &p.b3).remove_axis(Axis(1));
    Activations { x, h1, h2, y }
}

/// Batched forward pass over a whole input series.
pub fn mlp_forward_batch(p: &MlpParams, inputs: &[f64]) -> Vec<f64> {
    forward_cached(p, inputs).y.to_vec()
}

fn backprop(p: &MlpParams, act: &Activations, dy: &Array1<f64>, grads: &mut Gradients) {
    let n = dy.len();
    let dy2 = dy.view().into_shape_with_order((n, 1)).expect("column");
    grads.w3 = dy2.t().dot(&act.h2).as_standard_layout().into_owned();
    grads.b3 = Array1::from_elem(1, dy.sum());
    let mut dz2 = dy2.dot(&p.w3);
    dz2.zip_mut_with(&act.h2, |d, &h| *d *= 1.0 - h * h);
    grads.w2 = dz2.t().dot(&act.h1).as_standard_layout().into_owned();
    grads.b2 = dz2.sum_axis(Axis(0));
    let mut dz1 = dz2.dot(&p.w2);
    dz1.zip_mut_with(&act.h1, |d, &h| *d *= 1.0 - h * h);
    grads.w1 = dz1.t().dot(&act.x).as_standard_layout().into_owned();
    grads.b1 = dz1.sum_axis(Axis(0));
}

/// One training objective: data fit on `hr` plus `de_weight` times the
/// ODE-residual loss of the network's own predictions over `vo2`.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub vo2: &'a UniformSeries,
    pub hr: &'a UniformSeries,
    pub bounds: LambdaBounds,
    pub de_weight: f64,
    /// Network input is `(vo2 - input_shift) / input_scale`.
    pub input_shift: f64,
    pub input_scale: f64,
}

impl<'a> Batch<'a> {
    pub fn new(vo2: &'a UniformSeries, hr: &'a UniformSeries, de_weight: f64) -> Self {
        Self {
            vo2,
            hr,
            bounds: LambdaBounds::default(),
            de_weight,
            input_shift: 0.0,
            input_scale: 1.0,
        }
    }

    pub fn inputs(&self) -> Vec<f64> {
        self.vo2.values.iter().map(|v| (v - self.input_shift) / self.input_scale).collect()
    }

    fn check(&self) -> Result<()> {
        if !self.vo2.same_grid(self.hr) {
            return Err(Error::LengthMismatch { left: self.vo2.len(), right: self.hr.len() });
        }
        if self.vo2.is_empty() {
            return Err(Error::EmptySeries);
        }
        for r in &self.vo2.segment_bounds {
            if r.len() < 3 {
                return Err(Error::SegmentTooShort { len: r.len(), min: 3 });
            }
        }
        Ok(())
    }
}

/// Loss terms and, when requested, gradients with respect to predictions
/// and to lambda.
struct LossEval {
    breakdown: LossBreakdown,
    d_pred: Array1<f64>,
    d_lambda: [f64; 6],
}

fn evaluate_losses(
    pred: &Array1<f64>,
    batch: &Batch,
    lambda: &LambdaParams,
    want_grad: bool,
) -> Result<LossEval> {
    let hr = &batch.hr.values;
    let vo2 = &batch.vo2.values;
    let n = hr.len();
    let mut d_pred = Array1::zeros(if want_grad { n } else { 0 });

    let mut sse = 0.0;
    for i in 0..n {
        let r = pred[i] - hr[i];
        sse += r * r;
        if want_grad {
            d_pred[i] = 2.0 * r / n as f64;
        }
    }
    let l_data = sse / n as f64;

    // g and its lambda-partials per sample.
    let mut g = Vec::with_capacity(n);
    let mut dg = Vec::with_capacity(if want_grad { n } else { 0 });
    for &v in vo2 {
        let sv = stroke_volume(lambda, v)?;
        let tpr = peripheral_resistance(lambda, v)?;
        g.push(sv * tpr);
        if want_grad {
            let lv = v.ln();
            dg.push([lv * tpr, tpr, sv * lv, sv]);
        }
    }
    debug_assert!(g.iter().zip(vo2).all(|(gi, &v)| {
        let c = coupling_g(lambda, v).unwrap_or(f64::NAN);
        (gi - c).abs() <= 1e-12 * c.abs().max(1.0)
    }));

    let inv_2h = SECONDS_PER_MINUTE / (2.0 * batch.vo2.dt);
    let m: usize = batch.vo2.segment_bounds.iter().map(|r| r.len() - 2).sum();
    let mut ssr = 0.0;
    let mut residuals = Vec::with_capacity(m);
    for r in &batch.vo2.segment_bounds {
        for i in r.start + 1..r.end - 1 {
            let (a, b) = (i + 1, i - 1);
            let den_a = 1.0 - lambda.l5 * g[a];
            let den_b = 1.0 - lambda.l5 * g[b];
            let f = (pred[a] * den_a - pred[b] * den_b) * inv_2h - lambda.l6;
            ssr += f * f;
            residuals.push((i, f));
        }
    }
    let l_de = ssr / m as f64;
    let l_tot = l_data + batch.de_weight * l_de;
    if !l_tot.is_finite() {
        return Err(Error::NonFiniteLoss);
    }

    let mut d_lambda = [0.0; 6];
    if want_grad && batch.de_weight != 0.0 {
        let scale = batch.de_weight * 2.0 / m as f64;
        for &(i, f) in &residuals {
            let (a, b) = (i + 1, i - 1);
            let c = scale * f;
            d_pred[a] += c * (1.0 - lambda.l5 * g[a]) * inv_2h;
            d_pred[b] -= c * (1.0 - lambda.l5 * g[b]) * inv_2h;
            for j in 0..4 {
                d_lambda[j] -= c * lambda.l5 * (pred[a] * dg[a][j] - pred[b] * dg[b][j]) * inv_2h;
            }
            d_lambda[4] -= c * (pred[a] * g[a] - pred[b] * g[b]) * inv_2h;
            d_lambda[5] -= c;
        }
    }

    Ok(LossEval {
        breakdown: LossBreakdown { l_data, l_de, l_tot, epoch: 0 },
        d_pred,
        d_lambda,
    })
}

/// Loss values only.
pub fn mlp_loss(p: &MlpParams, batch: &Batch) -> Result<LossBreakdown> {
    batch.check()?;
    let lambda = p.lambda(&batch.bounds)?;
    let act = forward_cached(p, &batch.inputs());
    Ok(evaluate_losses(&act.y, batch, &lambda, false)?.breakdown)
}

/// Exact reverse-mode gradient of the total loss with respect to every
/// weight, bias and theta entry.
pub fn mlp_backward(p: &MlpParams, batch: &Batch) -> Result<(LossBreakdown, Gradients)> {
    batch.check()?;
    let lambda = p.lambda(&batch.bounds)?;
    let act = forward_cached(p, &batch.inputs());
    let eval = evaluate_losses(&act.y, batch, &lambda, true)?;
    let mut grads = MlpParams::zeros();
    backprop(p, &act, &eval.d_pred, &mut grads);
    for k in 0..6 {
        grads.theta[k] =
            eval.d_lambda[k] * bounded_slope(p.theta[k], batch.bounds.lo[k], batch.bounds.hi[k]);
    }
    Ok((eval.breakdown, grads))
}

/// Max over parameters of `|g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)`,
/// with central differences of step `h`.
pub fn gradient_check(p: &MlpParams, batch: &Batch, h: f64) -> Result<f64> {
    gradient_check_with(p, h, |q| mlp_backward(q, batch).map(|(_, g)| g), |q| {
        mlp_loss(q, batch).map(|l| l.l_tot)
    })
}

/// Same comparison for any objective with an analytic gradient.
pub fn gradient_check_with<G, F>(p: &MlpParams, h: f64, grad: G, mut loss: F) -> Result<f64>
where
    G: FnOnce(&MlpParams) -> Result<Gradients>,
    F: FnMut(&MlpParams) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidStep(h));
    }
    let analytic = grad(p)?.to_flat();
    let mut probe = p.clone();
    let mut worst = 0.0_f64;
    let mut k = 0;
    for block in 0..7 {
        for i in 0..probe.slices()[block].len() {
            let base = probe.slices()[block][i];
            probe.slices_mut()[block][i] = base + h;
            let fp = loss(&probe)?;
            probe.slices_mut()[block][i] = base - h;
            let fm = loss(&probe)?;
            probe.slices_mut()[block][i] = base;
            let fd = (fp - fm) / (2.0 * h);
            let err = (analytic[k] - fd).abs() / (analytic[k].abs() + fd.abs()).max(1e-12);
            worst = worst.max(err);
            k += 1;
        }
    }
    Ok(worst)
}

/// Seed-determined small problem for gradient checking: freshly initialised
/// weights, jittered physiological pre-images and 30 samples in two
/// segments, under the default ODE weight.
pub fn gradcheck_instance(seed: u64) -> (MlpParams, UniformSeries, UniformSeries) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
    let mut p = xavier_init(seed);
    for t in p.theta.iter_mut() {
        *t += rng.random_range(-1.5..1.5);
    }
    let vals: Vec<f64> = (0..30).map(|_| rng.random_range(0.4..2.5)).collect();
    let vo2 = UniformSeries::with_segments(0.0, 1.0, vals, vec![0..12, 12..30], "L/min")
        .expect("static segmentation");
    let hr: Vec<f64> =
        vo2.values.iter().map(|v| 60.0 + 35.0 * v + rng.random_range(-3.0..3.0)).collect();
    let hr = vo2.with_values(hr, "bpm");
    (p, vo2, hr)
}

/// [`gradient_check`] on [`gradcheck_instance`]`(seed)` with step `h`.
pub fn seeded_gradient_check(seed: u64, h: f64) -> Result<f64> {
    let (p, vo2, hr) = gradcheck_instance(seed);
    gradient_check(&p, &Batch::new(&vo2, &hr, 1e5), h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    pub accum: MlpParams,
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl RmspropState {
    pub fn new(lr: f64, rho: f64, eps: f64) -> Self {
        Self { accum: MlpParams::zeros(), rho, eps, lr }
    }

    /// In-place `v <- rho v + (1 - rho) g^2; p <- p - lr g / (sqrt(v) + eps)`.
    pub fn step(&mut self, p: &mut MlpParams, g: &Gradients) -> Result<()> {
        let mut off = 0;
        for s in g.slices() {
            if let Some(k) = s.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(off + k));
            }
            off += s.len();
        }
        let (rho, eps, lr) = (self.rho, self.eps, self.lr);
        for ((ps, gs), vs) in p.slices_mut().into_iter().zip(g.slices()).zip(self.accum.slices_mut())
        {
            for ((pv, &gv), vv) in ps.iter_mut().zip(gs).zip(vs.iter_mut()) {
                *vv = rho * *vv + (1.0 - rho) * gv * gv;
                *pv -= lr * gv / (vv.sqrt() + eps);
            }
        }
        Ok(())
    }
}

impl Default for RmspropState {
    fn default() -> Self {
        Self::new(0.01, 0.99, 1e-8)
    }
}

pub fn rmsprop_step(
    p: &MlpParams,
    g: &Gradients,
    st: &RmspropState,
) -> Result<(MlpParams, RmspropState)> {
    let mut p = p.clone();
    let mut st = st.clone();
    st.step(&mut p, g)?;
    Ok((p, st))
}

/// Serialized model: shapes, row-major arrays, theta and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_sizes: [usize; 4],
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
    pub theta: Vec<f64>,
    pub bounds: LambdaBounds,
    pub input_shift: f64,
    pub input_scale: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn from_params(
        p: &MlpParams,
        bounds: LambdaBounds,
        input_shift: f64,
        input_scale: f64,
        seed: u64,
        config_hash: String,
    ) -> Self {
        let [w1, b1, w2, b2, w3, b3, theta] = p.slices().map(<[f64]>::to_vec);
        Self {
            layer_sizes: LAYER_SIZES,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            theta,
            bounds,
            input_shift,
            input_scale,
            seed,
            config_hash,
        }
    }

    pub fn params(&self) -> Result<MlpParams> {
        if self.layer_sizes != LAYER_SIZES {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint layers {:?}, expected {:?}",
                self.layer_sizes, LAYER_SIZES
            )));
        }
        let flat: Vec<f64> = [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3, &self.theta]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect();
        MlpParams::from_flat(&flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physio::simulate_hr;

    fn small_subject() -> (UniformSeries, UniformSeries) {
        let vals: Vec<f64> = (0..30).map(|i| 0.6 + 0.05 * i as f64).collect();
        let vo2 =
            UniformSeries::with_segments(0.0, 1.0, vals, vec![0..12, 12..30], "L/min").unwrap();
        let hr = vo2.with_values(
            vo2.values.iter().enumerate().map(|(i, v)| 60.0 + 30.0 * v + (i % 3) as f64).collect(),
            "bpm",
        );
        (vo2, hr)
    }

    #[test]
    fn bounded_map_basics() {
        assert_eq!(bounded_transform(0.0, -2.0, 4.0).unwrap(), 1.0);
        assert!((bounded_transform(50.0, 0.1, 0.6).unwrap() - 0.6).abs() < 1e-12);
        let t = bounded_inverse(0.44, 0.1, 0.6).unwrap();
        let logit = (0.68_f64 / 0.32).ln();
        assert!((t - logit).abs() <= 1e-12 * logit.abs());
        assert!((bounded_transform(t, 0.1, 0.6).unwrap() - 0.44).abs() <= 1e-12 * 0.44);
        assert!(bounded_inverse(0.35, 0.1, 0.6).unwrap().abs() <= 1e-12);
        assert!(matches!(bounded_inverse(0.1, 0.1, 0.6), Err(Error::OutOfBounds { .. })));
        assert!(matches!(bounded_transform(0.0, 1.0, 1.0), Err(Error::BadBounds { .. })));
    }

    #[test]
    fn xavier_is_deterministic_and_bounded() {
        let a = xavier_init(11);
        let b = xavier_init(11);
        assert_eq!(a.to_flat(), b.to_flat());
        assert_ne!(a.to_flat(), xavier_init(12).to_flat());
        let lim = (6.0_f64 / 65.0).sqrt();
        assert!(a.w1.iter().all(|w| w.abs() <= lim));
        assert!(a.b1.iter().chain(a.b2.iter()).chain(a.b3.iter()).all(|&b| b == 0.0));
        let l = a.lambda(&LambdaBounds::default()).unwrap().to_array();
        for (got, want) in l.iter().zip(LambdaParams::initial().to_array()) {
            assert!((got - want).abs() <= 1e-9 * want.abs());
        }
    }

    #[test]
    fn forward_trivial_cases() {
        let mut p = MlpParams::zeros();
        assert_eq!(mlp_forward(&p, 1.7), 0.0);
        p.b3[0] = 72.0;
        assert_eq!(mlp_forward(&p, -3.0), 72.0);
        assert_eq!(mlp_forward_batch(&p, &[0.1, 2.0]), vec![72.0, 72.0]);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let p = xavier_init(3);
        let flat = p.to_flat();
        // Independent re-evaluation from the flat layout.
        let (w1, rest) = flat.split_at(HIDDEN);
        let (b1, rest) = rest.split_at(HIDDEN);
        let (w2, rest) = rest.split_at(HIDDEN * HIDDEN);
        let (b2, rest) = rest.split_at(HIDDEN);
        let (w3, rest) = rest.split_at(HIDDEN);
        let b3 = rest[0];
        let x = 1.3;
        let h1: Vec<f64> = (0..HIDDEN).map(|j| (w1[j] * x + b1[j]).tanh()).collect();
        let h2: Vec<f64> = (0..HIDDEN)
            .map(|j| (b2[j] + (0..HIDDEN).map(|k| w2[j * HIDDEN + k] * h1[k]).sum::<f64>()).tanh())
            .collect();
        let oracle = b3 + (0..HIDDEN).map(|j| w3[j] * h2[j]).sum::<f64>();
        let got = mlp_forward(&p, x);
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs().max(1e-300));
        let batched = mlp_forward_batch(&p, &[x])[0];
        assert!((batched - oracle).abs() <= 1e-12 * oracle.abs().max(1e-300));
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        // A constant network output matched by constant data and a lambda with
        // l6 = 0 under constant VO2 zeroes both loss terms.
        let vo2 = UniformSeries::new(0.0, 1.0, vec![1.1; 12], "L/min");
        let hr = UniformSeries::new(0.0, 1.0, vec![75.0; 12], "bpm");
        let mut p = MlpParams::zeros();
        p.b3[0] = 75.0;
        let bounds = LambdaBounds::default();
        // theta = 0 puts l6 at the midpoint of (-0.5, 0.5), i.e. zero.
        let batch = Batch { bounds, ..Batch::new(&vo2, &hr, 1e5) };
        let (loss, g) = mlp_backward(&p, &batch).unwrap();
        assert_eq!(loss.l_tot, 0.0);
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (vo2, hr) = small_subject();
        let p = xavier_init(5);
        let batch = Batch::new(&vo2, &hr, 1e5);
        let err = gradient_check(&p, &batch, 1e-5).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
        assert!(matches!(gradient_check(&p, &batch, 0.0), Err(Error::InvalidStep(_))));
    }

    #[test]
    fn linear_one_one_network_gradient_is_exact() {
        // Only the path w3[0] * tanh(b2[0]) + b3 is live, with squared loss.
        let vo2 = UniformSeries::new(0.0, 1.0, vec![1.0; 5], "L/min");
        let hr = UniformSeries::new(0.0, 1.0, vec![2.0; 5], "bpm");
        let mut p = MlpParams::zeros();
        p.b3[0] = 0.5;
        let batch = Batch::new(&vo2, &hr, 0.0);
        let err = gradient_check_with(
            &p,
            1e-3,
            |q| mlp_backward(q, &batch).map(|(_, g)| g),
            |q| mlp_loss(q, &batch).map(|l| l.l_tot),
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn theta_gradient_at_midpoint_is_quarter_range() {
        let (vo2, hr) = small_subject();
        let mut p = xavier_init(9);
        let bounds = LambdaBounds::default();
        p.theta[4] = 0.0;
        let batch = Batch::new(&vo2, &hr, 1e5);
        let (_, g) = mlp_backward(&p, &batch).unwrap();
        // lambda-space derivative by central differences on l5 directly.
        let lambda = p.lambda(&bounds).unwrap();
        let pred = mlp_forward_batch(&p, &vo2.values);
        let pred = hr.with_values(pred, "bpm");
        let f = |l5: f64| {
            let mut l = lambda;
            l.l5 = l5;
            crate::training::loss_de(&pred, &vo2, &l).unwrap() * 1e5
        };
        let h = 1e-6;
        let dl5 = (f(lambda.l5 + h) - f(lambda.l5 - h)) / (2.0 * h);
        let expect = (bounds.hi[4] - bounds.lo[4]) / 4.0 * dl5;
        assert!((g.theta[4] - expect).abs() <= 1e-5 * expect.abs(), "{} vs {expect}", g.theta[4]);
    }

    #[test]
    fn rmsprop_updates() {
        let mut p = xavier_init(1);
        let zero = MlpParams::zeros();
        let mut st = RmspropState::default();
        st.accum.b3[0] = 4.0;
        let (p2, st2) = rmsprop_step(&p, &zero, &st).unwrap();
        assert_eq!(p2, p);
        assert_eq!(st2.accum.b3[0], 4.0 * 0.99);

        // First step on a scalar: -lr g / (sqrt((1 - rho) g^2) + eps).
        let mut g = MlpParams::zeros();
        g.b3[0] = 2.5;
        let st = RmspropState::default();
        let before = p.b3[0];
        let (p1, st1) = rmsprop_step(&p, &g, &st).unwrap();
        let expect = -0.01 * 2.5 / ((0.01_f64 * 6.25).sqrt() + 1e-8);
        assert!(((p1.b3[0] - before) - expect).abs() <= 1e-6 * expect.abs());
        assert!(((p1.b3[0] - before) + 0.01 / 0.1).abs() <= 1e-6);

        // Two steps, constant g: v = (1 - rho)(rho + 1) g^2.
        let (_, st2) = rmsprop_step(&p1, &g, &st1).unwrap();
        let expect = 0.01 * 1.99 * 6.25;
        assert!((st2.accum.b3[0] - expect).abs() <= 1e-15);

        g.w2[[3, 4]] = f64::NAN;
        assert!(matches!(st.clone().step(&mut p, &g), Err(Error::NonFiniteGradient(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = xavier_init(21);
        let c = Checkpoint::from_params(&p, LambdaBounds::default(), 0.0, 1.0, 21, "abc".into());
        let json = serde_json::to_string(&c).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back.params().unwrap(), p);
    }

    #[test]
    fn losses_agree_with_training_module() {
        let (vo2, hr) = small_subject();
        let p = xavier_init(2);
        let batch = Batch::new(&vo2, &hr, 1e5);
        let l = mlp_loss(&p, &batch).unwrap();
        let pred = hr.with_values(mlp_forward_batch(&p, &vo2.values), "bpm");
        let lambda = p.lambda(&batch.bounds).unwrap();
        let ld = crate::training::loss_data(&pred.values, &hr.values).unwrap();
        let le = crate::training::loss_de(&pred, &vo2, &lambda).unwrap();
        assert!((l.l_data - ld).abs() <= 1e-12 * ld);
        assert!((l.l_de - le).abs() <= 1e-12 * le);
        // simulate_hr trajectories leave only the data term.
        let sim = simulate_hr(&vo2, &lambda, &[70.0, 80.0]).unwrap();
        assert!(crate::training::loss_de(&sim, &vo2, &lambda).unwrap() <= 1e-16);
    }
}
