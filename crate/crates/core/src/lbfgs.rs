//! Limited-memory BFGS with two-loop recursion and Armijo backtracking.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    pub max_halvings: usize,
    /// Stop when the largest gradient component falls to this.
    pub grad_tol: f64,
    /// Stop when a step improves `f` by less than `f_tol * max(|f|, 1)`.
    pub f_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { max_iters: 200, memory: 10, c1: 1e-4, max_halvings: 40, grad_tol: 1e-8, f_tol: 1e-14 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    /// No step along the search direction satisfied the Armijo condition;
    /// the best iterate so far is returned.
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub status: LbfgsStatus,
    /// Objective at every accepted iterate, starting with `x0`.
    pub f_history: Vec<f64>,
}

impl LbfgsResult {
    pub fn line_search_failed(&self) -> bool {
        self.status == LbfgsStatus::LineSearchFailure
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `objective`, which returns `(f, grad)`. Non-finite `f` marks an
/// inadmissible point and is rejected by the line search.
pub fn lbfgs_minimize<F>(mut objective: F, x0: &[f64], cfg: &LbfgsConfig) -> LbfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x);
    let mut f_history = vec![f];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);

    let max_abs = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));

    if !f.is_finite() {
        return LbfgsResult {
            x,
            f,
            iterations: 0,
            status: LbfgsStatus::LineSearchFailure,
            f_history,
        };
    }

    for iter in 0..cfg.max_iters {
        if max_abs(&g) <= cfg.grad_tol {
            return LbfgsResult { x, f, iterations: iter, status: LbfgsStatus::GradientTolerance, f_history };
        }

        // Two-loop recursion: d = -H g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for i in 0..n {
                q[i] -= a * y[i];
            }
            alphas.push(a);
        }
        let gamma = pairs.back().map_or_else(
            || 1.0 / max_abs(&g).max(1.0),
            |(s, y, _)| dot(s, y) / dot(y, y),
        );
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for i in 0..n {
                q[i] += s[i] * (a - b);
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            // Not a descent direction; restart from steepest descent.
            pairs.clear();
            let scale = 1.0 / max_abs(&g).max(1.0);
            dir = g.iter().map(|v| -v * scale).collect();
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = objective(&trial);
            if ft.is_finite() && ft <= f + cfg.c1 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            return LbfgsResult { x, f, iterations: iter, status: LbfgsStatus::LineSearchFailure, f_history };
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        // Curvature pairs that would break positive definiteness are skipped.
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }

        let improvement = f - f_new;
        x = x_new;
        f = f_new;
        g = g_new;
        f_history.push(f);
        if improvement <= cfg.f_tol * f.abs().max(1.0) {
            return LbfgsResult { x, f, iterations: iter + 1, status: LbfgsStatus::FunctionTolerance, f_history };
        }
    }
    let status = if max_abs(&g) <= cfg.grad_tol {
        LbfgsStatus::GradientTolerance
    } else {
        LbfgsStatus::MaxIterations
    };
    LbfgsResult { x, f, iterations: cfg.max_iters, status, f_history }
}

/// Central-difference gradient; falls back to a one-sided difference when
/// one neighbour is inadmissible.
pub fn central_difference_gradient<F>(f: &mut F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let f0 = f(x);
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let fp = f(&probe);
            probe[k] = x[k] - h;
            let fm = f(&probe);
            probe[k] = x[k];
            match (fp.is_finite(), fm.is_finite()) {
                (true, true) => (fp - fm) / (2.0 * h),
                (true, false) => (fp - f0) / h,
                (false, true) => (f0 - fm) / h,
                (false, false) => 0.0,
            }
        })
        .collect()
}
