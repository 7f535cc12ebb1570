//! Seeded optimizers that ascend a log joint.
//!
//! Four methods share one driver: Adam (minibatch or full batch), plain
//! full-batch gradient ascent, full-batch Nesterov-accelerated ascent with
//! adaptive restart, and full-batch L-BFGS. Refits have to resolve
//! `1e-9`-scale differences between nearby optima; L-BFGS does that fastest
//! on the ill-conditioned network objectives.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm_inf};
use crate::net::{Model, ParamVector};
use crate::objective::{check_all, hvp_unchecked, value_grad_unchecked, Batch, LogJointSpec};
use crate::rng::{stream_rng, streams};

/// Tolerance applied to warm-started refits.
pub const REFIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    FullBatchGa {
        lr: f64,
    },
    /// Full-batch Nesterov ascent. `lr: None` picks `0.9 / L` with `L` from a
    /// power iteration on Hessian-vector products at the start point.
    Accelerated {
        lr: Option<f64>,
    },
    /// Full-batch limited-memory BFGS with backtracking on the sufficient-increase condition.
    Lbfgs {
        memory: usize,
    },
}

impl Method {
    pub fn adam(lr: f64) -> Self {
        Method::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Step size `lr / (1 + decay * j)`.
    InverseDecay {
        decay: f64,
    },
}

impl Schedule {
    fn factor(self, step: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::InverseDecay { decay } => 1.0 / (1.0 + decay * step as f64),
        }
    }
}

/// How minibatches are drawn when `batch_size` is smaller than the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    WithReplacement,
    EpochShuffle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub method: Method,
    pub max_steps: usize,
    /// Converged once the update infinity-norm is at or below this.
    pub convergence_tol: f64,
    /// Optional additional bound on the full-batch gradient infinity-norm.
    pub grad_tol: Option<f64>,
    /// `None` means full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub schedule: Schedule,
    pub sampling: Sampling,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            method: Method::adam(0.005),
            max_steps: 20_000,
            convergence_tol: 1e-7,
            grad_tol: None,
            batch_size: None,
            seed: 0,
            schedule: Schedule::Constant,
            sampling: Sampling::WithReplacement,
        }
    }
}

impl OptimConfig {
    /// Full-batch L-BFGS to the given gradient tolerance.
    pub fn lbfgs(grad_tol: f64, max_steps: usize) -> Self {
        Self {
            method: Method::Lbfgs { memory: 20 },
            max_steps,
            convergence_tol: f64::INFINITY,
            grad_tol: Some(grad_tol),
            ..Self::default()
        }
    }

    /// Full-batch accelerated ascent to the given gradient tolerance.
    pub fn accelerated(grad_tol: f64, max_steps: usize) -> Self {
        Self {
            method: Method::Accelerated { lr: None },
            max_steps,
            convergence_tol: f64::INFINITY,
            grad_tol: Some(grad_tol),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match self.method {
            Method::Adam { lr, beta1, beta2, eps } => {
                if !(lr > 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return bad("invalid Adam hyperparameters");
                }
            }
            Method::FullBatchGa { lr } if !(lr > 0.0) => return bad("learning rate must be positive"),
            Method::Accelerated { lr: Some(lr) } if !(lr > 0.0) => return bad("learning rate must be positive"),
            Method::Lbfgs { memory: 0 } => return bad("L-BFGS memory must be positive"),
            _ => {}
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least one");
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence tolerance must be non-negative");
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be positive");
        }
        if let Schedule::InverseDecay { decay } = self.schedule {
            if !(decay >= 0.0) {
                return bad("decay must be non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ParamVector,
    /// Objective estimate after each step (full-batch value for full-batch methods).
    pub trace: Vec<f64>,
    pub steps: usize,
    pub converged: bool,
    /// Infinity-norm of the last full-batch gradient when one was computed.
    pub grad_norm: Option<f64>,
}

struct BatchSampler {
    n: usize,
    size: usize,
    sampling: Sampling,
    rng: rand_chacha::ChaCha8Rng,
    perm: Vec<usize>,
    cursor: usize,
    buf: Vec<usize>,
}

impl BatchSampler {
    fn new(n: usize, size: usize, sampling: Sampling, seed: u64) -> Self {
        Self {
            n,
            size,
            sampling,
            rng: stream_rng(seed, streams::OPTIMIZER),
            perm: (0..n).collect(),
            cursor: n,
            buf: Vec::with_capacity(size),
        }
    }

    fn next(&mut self) -> &[usize] {
        self.buf.clear();
        match self.sampling {
            Sampling::WithReplacement => {
                for _ in 0..self.size {
                    self.buf.push(self.rng.random_range(0..self.n));
                }
            }
            Sampling::EpochShuffle => {
                while self.buf.len() < self.size {
                    if self.cursor == self.n {
                        self.perm.shuffle(&mut self.rng);
                        self.cursor = 0;
                    }
                    self.buf.push(self.perm[self.cursor]);
                    self.cursor += 1;
                }
            }
        }
        &self.buf
    }
}

/// Fits by ascending the log joint defined by `spec` from `init`.
pub fn fit(
    model: &dyn Model,
    init: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    cfg: &OptimConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    check_all(model, init, spec, data)?;
    match cfg.method {
        Method::Accelerated { lr } => accelerated(model, init, spec, data, cfg, lr),
        Method::Lbfgs { memory } => lbfgs(model, init, spec, data, cfg, memory),
        Method::FullBatchGa { lr } => first_order(model, init, spec, data, cfg, Stepper::Ga { lr }),
        Method::Adam { lr, beta1, beta2, eps } => first_order(
            model,
            init,
            spec,
            data,
            cfg,
            Stepper::Adam { lr, beta1, beta2, eps, m: vec![0.0; init.len()], v: vec![0.0; init.len()] },
        ),
    }
}

/// Refit from a converged optimum, with the update tolerance tightened to
/// [`REFIT_TOL`] and any gradient tolerance tightened likewise.
pub fn warm_start_fit(
    model: &dyn Model,
    optimum: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    cfg: &OptimConfig,
) -> Result<FitResult> {
    let mut tight = cfg.clone();
    tight.convergence_tol = cfg.convergence_tol.min(REFIT_TOL);
    tight.grad_tol = cfg.grad_tol.map(|g| g.min(REFIT_TOL));
    fit(model, optimum, spec, data, &tight)
}

enum Stepper {
    Ga { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, m: Vec<f64>, v: Vec<f64> },
}

fn first_order(
    model: &dyn Model,
    init: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    cfg: &OptimConfig,
    mut stepper: Stepper,
) -> Result<FitResult> {
    let n = data.len();
    let k = init.len();
    let minibatch = cfg.batch_size.filter(|&b| b < n);
    let mut sampler = minibatch.map(|b| BatchSampler::new(n, b, cfg.sampling, cfg.seed));
    let mut theta = init.as_slice().to_vec();
    let mut grad = vec![0.0; k];
    let mut trace = Vec::new();
    let mut last_grad_norm = None;

    for step in 0..cfg.max_steps {
        let value = match sampler.as_mut() {
            Some(s) => value_grad_unchecked(model, &theta, spec, data, Batch::Indices(s.next()), &mut grad),
            None => value_grad_unchecked(model, &theta, spec, data, Batch::Full, &mut grad),
        };
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteObjective { step });
        }
        let grad_norm = norm_inf(&grad);
        if minibatch.is_none() {
            last_grad_norm = Some(grad_norm);
        }

        let rate = cfg.schedule.factor(step);
        let mut update = 0.0_f64;
        match &mut stepper {
            Stepper::Ga { lr } => {
                for (t, g) in theta.iter_mut().zip(&grad) {
                    let d = *lr * rate * g;
                    *t += d;
                    update = update.max(d.abs());
                }
            }
            Stepper::Adam { lr, beta1, beta2, eps, m, v } => {
                let t1 = (step + 1) as i32;
                let bc1 = 1.0 - beta1.powi(t1);
                let bc2 = 1.0 - beta2.powi(t1);
                for i in 0..k {
                    let g = grad[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let d = *lr * rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + *eps);
                    theta[i] += d;
                    update = update.max(d.abs());
                }
            }
        }
        trace.push(value);

        let grad_ok = match (cfg.grad_tol, minibatch) {
            (None, _) => true,
            (Some(tol), None) => grad_norm <= tol,
            (Some(_), Some(_)) => false,
        };
        if update <= cfg.convergence_tol && grad_ok {
            return finish(model, theta, trace, step + 1, true, last_grad_norm);
        }
    }
    finish(model, theta, trace, cfg.max_steps, false, last_grad_norm)
}

fn finish(
    model: &dyn Model,
    theta: Vec<f64>,
    trace: Vec<f64>,
    steps: usize,
    converged: bool,
    grad_norm: Option<f64>,
) -> Result<FitResult> {
    let params = ParamVector::new(model, theta).map_err(|_| Error::NonFiniteObjective { step: steps })?;
    Ok(FitResult { params, trace, steps, converged, grad_norm })
}

/// Largest absolute Hessian eigenvalue of the objective at `theta`, by power iteration.
pub fn curvature_bound(model: &dyn Model, theta: &[f64], spec: &LogJointSpec, data: &Dataset, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, streams::POWER_ITERATION);
    let mut v: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut estimate = 0.0;
    for _ in 0..30 {
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let hv = hvp_unchecked(model, theta, spec, data, &v);
        estimate = dot(&hv, &hv).sqrt();
        v = hv;
    }
    estimate
}

/// Nesterov ascent on `L` (descent on `F = -L`) with function-value restart.
///
/// A step that lowers the objective resets the momentum; a plain gradient
/// step that lowers it halves the step size.
fn accelerated(
    model: &dyn Model,
    init: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    cfg: &OptimConfig,
    lr: Option<f64>,
) -> Result<FitResult> {
    let k = init.len();
    let mut x = init.as_slice().to_vec();
    let mut gx = vec![0.0; k];
    let mut fx = value_grad_unchecked(model, &x, spec, data, Batch::Full, &mut gx);
    if !fx.is_finite() {
        return Err(Error::NonFiniteObjective { step: 0 });
    }
    let mut lr = lr.unwrap_or_else(|| {
        let bound = curvature_bound(model, &x, spec, data, cfg.seed);
        if bound > 0.0 && bound.is_finite() {
            0.9 / bound
        } else {
            1e-3
        }
    });
    let lr_floor = lr * 1e-12;
    let grad_ok = |g: f64| cfg.grad_tol.is_none_or(|t| g <= t);

    let mut x_prev = x.clone();
    let mut momentum_steps = 0usize;
    let mut trace = Vec::new();
    let mut y = vec![0.0; k];
    let mut gy = vec![0.0; k];
    let mut x_new = vec![0.0; k];
    let mut g_new = vec![0.0; k];

    if cfg.grad_tol.is_some() && grad_ok(norm_inf(&gx)) {
        return finish(model, x, trace, 0, true, Some(norm_inf(&gx)));
    }

    for step in 0..cfg.max_steps {
        let beta = momentum_steps as f64 / (momentum_steps as f64 + 3.0);
        let rate = lr * cfg.schedule.factor(step);
        let (fy_grad, fy) = if beta == 0.0 {
            (&gx, fx)
        } else {
            for i in 0..k {
                y[i] = x[i] + beta * (x[i] - x_prev[i]);
            }
            let fy = value_grad_unchecked(model, &y, spec, data, Batch::Full, &mut gy);
            (&gy, fy)
        };
        if !fy.is_finite() {
            return Err(Error::NonFiniteObjective { step });
        }
        let base = if beta == 0.0 { &x } else { &y };
        for i in 0..k {
            x_new[i] = base[i] + rate * fy_grad[i];
        }
        let f_new = value_grad_unchecked(model, &x_new, spec, data, Batch::Full, &mut g_new);

        let slack = 8.0 * f64::EPSILON * fx.abs().max(1.0);
        if !f_new.is_finite() || f_new < fx - slack {
            if beta == 0.0 {
                lr *= 0.5;
                if lr < lr_floor {
                    let grad_norm = norm_inf(&gx);
                    return finish(model, x, trace, step + 1, false, Some(grad_norm));
                }
            }
            momentum_steps = 0;
            trace.push(fx);
            continue;
        }

        let update = x_new.iter().zip(&x).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        std::mem::swap(&mut x_prev, &mut x);
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut gx, &mut g_new);
        fx = f_new;
        momentum_steps += 1;
        trace.push(fx);

        let grad_norm = norm_inf(&gx);
        if update <= cfg.convergence_tol && grad_ok(grad_norm) {
            return finish(model, x, trace, step + 1, true, Some(grad_norm));
        }
    }
    let grad_norm = norm_inf(&gx);
    finish(model, x, trace, cfg.max_steps, false, Some(grad_norm))
}

/// L-BFGS on `F = -L`. Pairs failing the curvature condition are skipped;
/// a failed line search clears the memory once before giving up.
fn lbfgs(
    model: &dyn Model,
    init: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    cfg: &OptimConfig,
    memory: usize,
) -> Result<FitResult> {
    let k = init.len();
    let mut x = init.as_slice().to_vec();
    let mut g = vec![0.0; k];
    let mut f = -value_grad_unchecked(model, &x, spec, data, Batch::Full, &mut g);
    g.iter_mut().for_each(|v| *v = -*v);
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective { step: 0 });
    }
    let grad_ok = |gn: f64| cfg.grad_tol.is_none_or(|t| gn <= t);
    if cfg.grad_tol.is_some() && grad_ok(norm_inf(&g)) {
        return finish(model, x, Vec::new(), 0, true, Some(norm_inf(&g)));
    }

    let mut pairs: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = std::collections::VecDeque::new();
    let mut trace = Vec::new();
    let mut x_new = vec![0.0; k];
    let mut g_new = vec![0.0; k];
    let mut alpha = vec![0.0; memory];

    for step in 0..cfg.max_steps {
        // two-loop recursion for d = -H g
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        for (i, (s, y, rho)) in pairs.iter().enumerate().rev() {
            alpha[i] = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= alpha[i] * yi);
        }
        let gamma = match pairs.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / norm_inf(&g).max(1.0),
        };
        d.iter_mut().for_each(|v| *v *= gamma);
        for (i, (s, y, rho)) in pairs.iter().enumerate() {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (alpha[i] - b) * si);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v / norm_inf(&g).max(1.0)).collect();
            slope = dot(&g, &d);
        }

        let slack = 8.0 * f64::EPSILON * f.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..k {
                x_new[i] = x[i] + t * d[i];
            }
            let f_try = -value_grad_unchecked(model, &x_new, spec, data, Batch::Full, &mut g_new);
            // near the optimum the decrease drops below roundoff in f; there the
            // step is judged by the directional derivative alone
            let new_slope = -dot(&g_new, &d);
            let armijo = f_try <= f + 1e-4 * t * slope + slack;
            let flat = f_try <= f + 1e-10 * f.abs().max(1.0) && new_slope.abs() <= 0.9 * slope.abs();
            if f_try.is_finite() && (armijo || flat) {
                accepted = Some(f_try);
                break;
            }
            t *= 0.5;
        }
        let Some(f_new) = accepted else {
            if pairs.is_empty() {
                return finish(model, x, trace, step + 1, false, Some(norm_inf(&g)));
            }
            pairs.clear();
            continue;
        };
        g_new.iter_mut().for_each(|v| *v = -*v);

        let s_vec: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y_vec: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s_vec, &y_vec);
        let update = norm_inf(&s_vec);
        if sy > 1e-12 * dot(&s_vec, &s_vec).sqrt() * dot(&y_vec, &y_vec).sqrt() && sy > 0.0 {
            if pairs.len() == memory {
                pairs.pop_front();
            }
            pairs.push_back((s_vec, y_vec, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        trace.push(-f);

        let grad_norm = norm_inf(&g);
        if update <= cfg.convergence_tol && grad_ok(grad_norm) {
            return finish(model, x, trace, step + 1, true, Some(grad_norm));
        }
    }
    let grad_norm = norm_inf(&g);
    finish(model, x, trace, cfg.max_steps, false, Some(grad_norm))
}
