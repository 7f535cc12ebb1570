//! Log-joint objectives and their derivatives.
//!
//! Every objective is the full-data log joint
//! `sum_i log p(y_i | f(x_i)) + log p(theta) + R(theta)` where `R` is one of
//! the [`Regularizer`] variants. Minibatch evaluation returns an unbiased
//! estimate of the same quantity: per-example likelihood terms are scaled by
//! `n / |B|`, the prior and global regularizers are added once, which is the
//! per-example `1/n` weighting summed over an epoch.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{norm_inf, SymMatrix};
use crate::net::{check_input, output_gradient, Model, ParamVector};

/// Parameter counts above this refuse dense Hessian assembly.
pub const DEFAULT_HESSIAN_CAP: usize = 2000;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Likelihood {
    Gaussian {
        obs_var: f64,
    },
    /// Softmax over the model outputs; the single target column holds the class index.
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    Gaussian { var: f64 },
    Laplace { scale: f64 },
}

/// Extra terms added to the log joint. `lambda` carries the sign convention
/// of the caller; the absolute-value variants absorb the output sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    None,
    /// `lambda * f(query)[output]`.
    PredictionAt {
        query: Vec<f64>,
        output: usize,
        lambda: f64,
    },
    /// `(lambda / m) * sum_k |f(eval_k)|_1`.
    AmortizedAbs {
        eval_inputs: Vec<Vec<f64>>,
        lambda: f64,
    },
    /// `(lambda / n) * sum_i |f(x_i)|_1` over the training inputs.
    InSampleAbs {
        lambda: f64,
    },
    /// `lambda * n / denominator * |theta|_1`, i.e. `lambda / denominator`
    /// per example. `None` uses `n * K`.
    ParamL1 {
        lambda: f64,
        denominator: Option<f64>,
    },
    /// Shifts every Gaussian target by `lambda * obs_var / n`; equivalent to
    /// a signed in-sample prediction regularizer.
    DataAugment {
        lambda: f64,
    },
}

impl Regularizer {
    pub fn lambda(&self) -> f64 {
        match self {
            Regularizer::None => 0.0,
            Regularizer::PredictionAt { lambda, .. }
            | Regularizer::AmortizedAbs { lambda, .. }
            | Regularizer::InSampleAbs { lambda }
            | Regularizer::ParamL1 { lambda, .. }
            | Regularizer::DataAugment { lambda } => *lambda,
        }
    }
}

/// Likelihood, prior, training-set size and regularizer defining an objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogJointSpec {
    pub likelihood: Likelihood,
    pub prior: Prior,
    pub n: usize,
    pub regularizer: Regularizer,
}

impl LogJointSpec {
    pub fn new(likelihood: Likelihood, prior: Prior, n: usize) -> Result<Self> {
        let spec = Self { likelihood, prior, n, regularizer: Regularizer::None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(obs_var: f64, prior_var: f64, n: usize) -> Result<Self> {
        Self::new(Likelihood::Gaussian { obs_var }, Prior::Gaussian { var: prior_var }, n)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if let Likelihood::Gaussian { obs_var } = self.likelihood {
            if !(obs_var > 0.0 && obs_var.is_finite()) {
                return bad("observation variance must be positive");
            }
        }
        match self.prior {
            Prior::Gaussian { var } if !(var > 0.0 && var.is_finite()) => {
                return bad("prior variance must be positive")
            }
            Prior::Laplace { scale } if !(scale > 0.0 && scale.is_finite()) => {
                return bad("prior scale must be positive")
            }
            _ => {}
        }
        if self.n == 0 {
            return bad("training-set size must be at least one");
        }
        if !self.regularizer.lambda().is_finite() {
            return bad("lambda must be finite");
        }
        match &self.regularizer {
            Regularizer::AmortizedAbs { eval_inputs, .. } if eval_inputs.is_empty() => {
                bad("amortized regularizer needs at least one evaluation input")
            }
            Regularizer::ParamL1 { denominator: Some(d), .. } if !(*d > 0.0) => {
                bad("parameter regularizer denominator must be positive")
            }
            Regularizer::DataAugment { .. } if self.likelihood == Likelihood::Categorical => {
                Err(Error::UnsupportedLikelihood)
            }
            _ => Ok(()),
        }
    }

    pub fn with_regularizer(&self, regularizer: Regularizer) -> Self {
        Self { regularizer, ..self.clone() }
    }

    /// Same spec with the regularizer removed.
    pub fn unregularized(&self) -> Self {
        self.with_regularizer(Regularizer::None)
    }

    /// `1 / tau^2` for a Gaussian prior.
    pub fn prior_precision(&self) -> Option<f64> {
        match self.prior {
            Prior::Gaussian { var } => Some(1.0 / var),
            Prior::Laplace { .. } => None,
        }
    }

    pub fn obs_var(&self) -> Option<f64> {
        match self.likelihood {
            Likelihood::Gaussian { obs_var } => Some(obs_var),
            Likelihood::Categorical => None,
        }
    }

    fn target_shift(&self) -> f64 {
        match (&self.regularizer, self.likelihood) {
            (Regularizer::DataAugment { lambda }, Likelihood::Gaussian { obs_var }) => lambda * obs_var / self.n as f64,
            _ => 0.0,
        }
    }
}

/// Which rows of the dataset enter an evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Full,
    Indices(&'a [usize]),
}

#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Log likelihood of one example and its derivative with respect to the outputs.
fn example_log_lik(likelihood: Likelihood, f: &[f64], y: &[f64], shift: f64, dlog: &mut [f64]) -> f64 {
    match likelihood {
        Likelihood::Gaussian { obs_var } => {
            let mut ll = 0.0;
            for ((d, &fo), &yo) in dlog.iter_mut().zip(f).zip(y) {
                let r = yo + shift - fo;
                ll += -0.5 * (LN_2PI + obs_var.ln()) - 0.5 * r * r / obs_var;
                *d = r / obs_var;
            }
            ll
        }
        Likelihood::Categorical => {
            let label = y[0] as usize;
            let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + f.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (c, (d, &fc)) in dlog.iter_mut().zip(f).enumerate() {
                let p = (fc - lse).exp();
                *d = if c == label { 1.0 - p } else { -p };
            }
            f[label] - lse
        }
    }
}

fn check_dataset(model: &dyn Model, spec: &LogJointSpec, data: &Dataset, batch: Batch<'_>) -> Result<()> {
    check_input(model, data.input(0))?;
    match spec.likelihood {
        Likelihood::Gaussian { .. } if data.target_dim() != model.output_dim() => {
            return Err(Error::DimensionMismatch {
                what: "target columns",
                expected: model.output_dim(),
                found: data.target_dim(),
            })
        }
        Likelihood::Categorical => {
            if data.target_dim() != 1 {
                return Err(Error::DimensionMismatch { what: "label columns", expected: 1, found: data.target_dim() });
            }
            if data.targets().iter().any(|y| y[0] < 0.0 || y[0].fract() != 0.0 || y[0] as usize >= model.output_dim()) {
                return Err(Error::InvalidArgument("class label out of range".into()));
            }
        }
        _ => {}
    }
    match batch {
        Batch::Full if data.len() != spec.n => {
            Err(Error::DimensionMismatch { what: "dataset size", expected: spec.n, found: data.len() })
        }
        Batch::Indices([]) => Err(Error::InvalidArgument("batch must be non-empty".into())),
        Batch::Indices(idx) if idx.iter().any(|&i| i >= data.len()) => {
            Err(Error::InvalidArgument("batch index out of range".into()))
        }
        _ => Ok(()),
    }
}

/// Value (and optionally gradient) of the objective estimate for `batch`.
fn evaluate(
    model: &dyn Model,
    params: &[f64],
    spec: &LogJointSpec,
    data: &Dataset,
    batch: Batch<'_>,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let n = spec.n as f64;
    let shift = spec.target_shift();
    let in_sample = match spec.regularizer {
        Regularizer::InSampleAbs { lambda } => lambda / n,
        _ => 0.0,
    };
    let (count, scale) = match batch {
        Batch::Full => (data.len(), 1.0),
        Batch::Indices(idx) => (idx.len(), n / idx.len() as f64),
    };
    let row = |k: usize| match batch {
        Batch::Full => k,
        Batch::Indices(idx) => idx[k],
    };

    let mut value = 0.0;
    let mut dlog = vec![0.0; model.output_dim()];
    for k in 0..count {
        let i = row(k);
        let y = data.target(i);
        match grad.as_deref_mut() {
            Some(g) => {
                let mut term = 0.0;
                model.backprop(
                    params,
                    data.input(i),
                    &mut |f, c| {
                        term = example_log_lik(spec.likelihood, f, y, shift, c);
                        for (cj, &fj) in c.iter_mut().zip(f) {
                            term += in_sample * fj.abs();
                            *cj = scale * (*cj + in_sample * sign0(fj));
                        }
                    },
                    g,
                );
                value += scale * term;
            }
            None => {
                let f = model.forward(params, data.input(i));
                let mut term = example_log_lik(spec.likelihood, &f, y, shift, &mut dlog);
                term += in_sample * f.iter().map(|v| v.abs()).sum::<f64>();
                value += scale * term;
            }
        }
    }

    value += log_prior(spec.prior, params, grad.as_deref_mut());
    value += global_regularizer(model, params, spec, grad);
    value
}

fn log_prior(prior: Prior, params: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let k = params.len() as f64;
    match prior {
        Prior::Gaussian { var } => {
            if let Some(g) = grad {
                for (gi, p) in g.iter_mut().zip(params) {
                    *gi -= p / var;
                }
            }
            -0.5 * k * (LN_2PI + var.ln()) - 0.5 * params.iter().map(|p| p * p).sum::<f64>() / var
        }
        Prior::Laplace { scale } => {
            if let Some(g) = grad {
                for (gi, p) in g.iter_mut().zip(params) {
                    *gi -= sign0(*p) / scale;
                }
            }
            -k * (2.0 * scale).ln() - params.iter().map(|p| p.abs()).sum::<f64>() / scale
        }
    }
}

/// Regularizer terms that do not depend on the sampled rows.
fn global_regularizer(model: &dyn Model, params: &[f64], spec: &LogJointSpec, grad: Option<&mut [f64]>) -> f64 {
    match &spec.regularizer {
        Regularizer::None | Regularizer::InSampleAbs { .. } | Regularizer::DataAugment { .. } => 0.0,
        Regularizer::PredictionAt { query, output, lambda } => match grad {
            Some(g) => {
                let mut value = 0.0;
                model.backprop(
                    params,
                    query,
                    &mut |f, c| {
                        value = lambda * f[*output];
                        c.fill(0.0);
                        c[*output] = *lambda;
                    },
                    g,
                );
                value
            }
            None => lambda * model.forward(params, query)[*output],
        },
        Regularizer::AmortizedAbs { eval_inputs, lambda } => {
            let coef = lambda / eval_inputs.len() as f64;
            let mut value = 0.0;
            match grad {
                Some(g) => {
                    for x in eval_inputs {
                        model.backprop(
                            params,
                            x,
                            &mut |f, c| {
                                for (cj, &fj) in c.iter_mut().zip(f) {
                                    value += coef * fj.abs();
                                    *cj = coef * sign0(fj);
                                }
                            },
                            g,
                        );
                    }
                }
                None => {
                    for x in eval_inputs {
                        value += coef * model.forward(params, x).iter().map(|v| v.abs()).sum::<f64>();
                    }
                }
            }
            value
        }
        Regularizer::ParamL1 { lambda, denominator } => {
            let coef = param_l1_coefficient(*lambda, *denominator, spec.n, params.len());
            if let Some(g) = grad {
                for (gi, p) in g.iter_mut().zip(params) {
                    *gi += coef * sign0(*p);
                }
            }
            coef * params.iter().map(|p| p.abs()).sum::<f64>()
        }
    }
}

/// Full-objective coefficient on `|theta|_1`.
pub fn param_l1_coefficient(lambda: f64, denominator: Option<f64>, n: usize, k: usize) -> f64 {
    let denom = denominator.unwrap_or((n * k) as f64);
    lambda * n as f64 / denom
}

fn check_regularizer_inputs(model: &dyn Model, spec: &LogJointSpec) -> Result<()> {
    match &spec.regularizer {
        Regularizer::PredictionAt { query, output, .. } => {
            check_input(model, query)?;
            if *output >= model.output_dim() {
                return Err(Error::DimensionMismatch {
                    what: "output index",
                    expected: model.output_dim(),
                    found: *output,
                });
            }
        }
        Regularizer::AmortizedAbs { eval_inputs, .. } => {
            for x in eval_inputs {
                check_input(model, x)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Full-data log joint including the regularizer.
pub fn log_joint(model: &dyn Model, params: &ParamVector, spec: &LogJointSpec, data: &Dataset) -> Result<f64> {
    params.check(model)?;
    spec.validate()?;
    check_dataset(model, spec, data, Batch::Full)?;
    check_regularizer_inputs(model, spec)?;
    let v = evaluate(model, params.as_slice(), spec, data, Batch::Full, None);
    if !v.is_finite() {
        return Err(Error::NonFiniteResult("log joint"));
    }
    Ok(v)
}

/// Total value of the regularizer term alone. `DataAugment` acts through the
/// targets and contributes no separate term.
pub fn regularizer_value(model: &dyn Model, params: &ParamVector, spec: &LogJointSpec, data: &Dataset) -> Result<f64> {
    params.check(model)?;
    check_regularizer_inputs(model, spec)?;
    Ok(match spec.regularizer {
        Regularizer::InSampleAbs { lambda } => {
            check_input(model, data.input(0))?;
            let coef = lambda / spec.n as f64;
            data.inputs()
                .iter()
                .map(|x| coef * model.forward(params.as_slice(), x).iter().map(|v| v.abs()).sum::<f64>())
                .sum()
        }
        _ => global_regularizer(model, params.as_slice(), spec, None),
    })
}

/// Value and gradient of the objective estimate on `batch`.
pub fn loss_grad(
    model: &dyn Model,
    params: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    batch: Batch<'_>,
) -> Result<(f64, Vec<f64>)> {
    params.check(model)?;
    spec.validate()?;
    check_dataset(model, spec, data, batch)?;
    check_regularizer_inputs(model, spec)?;
    let mut grad = vec![0.0; model.param_count()];
    let v = evaluate(model, params.as_slice(), spec, data, batch, Some(&mut grad));
    Ok((v, grad))
}

/// Unchecked full-batch value and gradient for the optimizer hot loop.
pub(crate) fn value_grad_unchecked(
    model: &dyn Model,
    params: &[f64],
    spec: &LogJointSpec,
    data: &Dataset,
    batch: Batch<'_>,
    grad: &mut [f64],
) -> f64 {
    grad.fill(0.0);
    evaluate(model, params, spec, data, batch, Some(grad))
}

/// Validates everything [`value_grad_unchecked`] assumes.
pub(crate) fn check_all(model: &dyn Model, params: &ParamVector, spec: &LogJointSpec, data: &Dataset) -> Result<()> {
    params.check(model)?;
    spec.validate()?;
    check_dataset(model, spec, data, Batch::Full)?;
    check_regularizer_inputs(model, spec)
}

/// Hessian-vector product of the full-data objective by central differences
/// of exact gradients, step `1e-4 / max(1, |v|_inf)`.
pub fn hvp(
    model: &dyn Model,
    params: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    v: &[f64],
) -> Result<Vec<f64>> {
    check_all(model, params, spec, data)?;
    if v.len() != params.len() {
        return Err(Error::DimensionMismatch { what: "direction", expected: params.len(), found: v.len() });
    }
    let out = hvp_unchecked(model, params.as_slice(), spec, data, v);
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteResult("Hessian-vector product"));
    }
    Ok(out)
}

pub(crate) fn hvp_unchecked(
    model: &dyn Model,
    params: &[f64],
    spec: &LogJointSpec,
    data: &Dataset,
    v: &[f64],
) -> Vec<f64> {
    let h = 1e-4 / norm_inf(v).max(1.0);
    let k = params.len();
    let plus: Vec<f64> = params.iter().zip(v).map(|(p, d)| p + h * d).collect();
    let minus: Vec<f64> = params.iter().zip(v).map(|(p, d)| p - h * d).collect();
    let mut gp = vec![0.0; k];
    let mut gm = vec![0.0; k];
    value_grad_unchecked(model, &plus, spec, data, Batch::Full, &mut gp);
    value_grad_unchecked(model, &minus, spec, data, Batch::Full, &mut gm);
    gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// Columns `H e_i` of the objective Hessian before symmetrization.
pub fn hessian_columns(
    model: &dyn Model,
    params: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    cap: usize,
) -> Result<Vec<Vec<f64>>> {
    check_all(model, params, spec, data)?;
    let k = params.len();
    if k > cap {
        return Err(Error::SizeCapExceeded { count: k, cap });
    }
    let mut e = vec![0.0; k];
    let mut cols = Vec::with_capacity(k);
    for i in 0..k {
        e[i] = 1.0;
        cols.push(hvp_unchecked(model, params.as_slice(), spec, data, &e));
        e[i] = 0.0;
    }
    if cols.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteResult("Hessian assembly"));
    }
    Ok(cols)
}

/// Dense Hessian of the full-data objective, symmetrized as `(H + H^T) / 2`.
pub fn full_hessian(
    model: &dyn Model,
    params: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    cap: usize,
) -> Result<SymMatrix> {
    let cols = hessian_columns(model, params, spec, data, cap)?;
    let k = cols.len();
    let mut flat = vec![0.0; k * k];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            flat[i * k + j] = *v;
        }
    }
    SymMatrix::symmetrize(k, flat)
}

/// Copy of `data` with every target shifted by `lambda * obs_var / n`.
/// Training on the result without a regularizer optimizes the same objective
/// as [`Regularizer::DataAugment`].
pub fn augmented_targets(data: &Dataset, spec: &LogJointSpec) -> Result<Dataset> {
    let obs_var = spec.obs_var().ok_or(Error::UnsupportedLikelihood)?;
    let lambda = match spec.regularizer {
        Regularizer::DataAugment { lambda } => lambda,
        _ => return Err(Error::InvalidArgument("spec has no data-augmentation regularizer".into())),
    };
    let shift = lambda * obs_var / spec.n as f64;
    data.map_targets(|_, y| y.iter().map(|v| v + shift).collect())
}

/// Gradient of one output, exposed for estimators that need Jacobian rows
/// on already-validated inputs.
pub(crate) fn jacobian_row(model: &dyn Model, params: &[f64], x: &[f64], output: usize) -> Vec<f64> {
    output_gradient(model, params, x, output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, LinearModel, MlpArch};

    fn scalar_case() -> (LinearModel, Dataset, LogJointSpec) {
        let model = LinearModel::new(1, false);
        let data = Dataset::from_scalars("unit", 0, &[1.0], &[1.0]).unwrap();
        let spec = LogJointSpec::gaussian(1.0, 1.0, 1).unwrap();
        (model, data, spec)
    }

    fn p(model: &dyn Model, v: &[f64]) -> ParamVector {
        ParamVector::new(model, v.to_vec()).unwrap()
    }

    #[test]
    fn scalar_gradient_at_zero() {
        let (m, d, s) = scalar_case();
        let (_, g) = loss_grad(&m, &p(&m, &[0.0]), &s, &d, Batch::Full).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_fit_likelihood_constant() {
        let m = LinearModel::new(1, false);
        let xs = [1.0, 2.0, -1.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x).collect();
        let d = Dataset::from_scalars("fit", 0, &xs, &ys).unwrap();
        let s = LogJointSpec::gaussian(1.0, 1.0, 3).unwrap();
        let theta = p(&m, &[0.5]);
        let lj = log_joint(&m, &theta, &s, &d).unwrap();
        let prior = -0.5 * LN_2PI - 0.125;
        assert!((lj - prior - (-1.5 * LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn scalar_value_hand_computed() {
        let (m, d, s) = scalar_case();
        let lj = log_joint(&m, &p(&m, &[0.5]), &s, &d).unwrap();
        let expected = (-0.5 * LN_2PI - 0.125) + (-0.5 * LN_2PI - 0.125);
        assert!((lj - expected).abs() < 1e-14);
    }

    #[test]
    fn gradient_zero_at_exact_fit_likelihood() {
        let m = LinearModel::new(1, false);
        let d = Dataset::from_scalars("zero", 0, &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        let s = LogJointSpec::gaussian(1.0, 1.0, 2).unwrap();
        let (_, g) = loss_grad(&m, &p(&m, &[0.0]), &s, &d, Batch::Full).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn regularizer_values() {
        let m = LinearModel::new(1, false);
        let d = Dataset::from_scalars("r", 0, &[1.0], &[1.0]).unwrap();
        let base = LogJointSpec::gaussian(1.0, 1.0, 1).unwrap();
        let theta = p(&m, &[0.5]);
        let at = base.with_regularizer(Regularizer::PredictionAt { query: vec![1.0], output: 0, lambda: 0.1 });
        assert!((regularizer_value(&m, &theta, &at, &d).unwrap() - 0.05).abs() < 1e-15);
        let am =
            base.with_regularizer(Regularizer::AmortizedAbs { eval_inputs: vec![vec![1.0], vec![3.0]], lambda: 1.0 });
        assert!((regularizer_value(&m, &theta, &am, &d).unwrap() - 1.0).abs() < 1e-15);
        let zero = [
            Regularizer::PredictionAt { query: vec![1.0], output: 0, lambda: 0.0 },
            Regularizer::AmortizedAbs { eval_inputs: vec![vec![2.0]], lambda: 0.0 },
            Regularizer::InSampleAbs { lambda: 0.0 },
            Regularizer::ParamL1 { lambda: 0.0, denominator: None },
            Regularizer::DataAugment { lambda: 0.0 },
        ];
        for r in zero {
            assert_eq!(regularizer_value(&m, &theta, &base.with_regularizer(r), &d).unwrap(), 0.0);
        }
    }

    #[test]
    fn fd_gradient_for_every_regularizer() {
        let arch = MlpArch::new(1, vec![4], 1, Activation::Tanh).unwrap();
        let xs = [-1.0, -0.2, 0.5, 1.3];
        let ys = [0.3, -0.1, 0.8, 0.2];
        let d = Dataset::from_scalars("fd", 0, &xs, &ys).unwrap();
        let base = LogJointSpec::gaussian(0.3, 2.0, 4).unwrap();
        let regs = [
            Regularizer::None,
            Regularizer::PredictionAt { query: vec![0.7], output: 0, lambda: 0.3 },
            Regularizer::AmortizedAbs { eval_inputs: vec![vec![0.1], vec![-2.0]], lambda: 0.5 },
            Regularizer::InSampleAbs { lambda: 0.4 },
            Regularizer::ParamL1 { lambda: 0.2, denominator: None },
            Regularizer::DataAugment { lambda: 0.6 },
        ];
        let theta = arch.init_params(4);
        for r in regs {
            let s = base.with_regularizer(r);
            let (_, g) = loss_grad(&arch, &theta, &s, &d, Batch::Full).unwrap();
            for i in 0..theta.len() {
                let h = 1e-5 * (1.0 + theta.as_slice()[i].abs());
                let mut up = theta.as_slice().to_vec();
                up[i] += h;
                let mut dn = theta.as_slice().to_vec();
                dn[i] -= h;
                let fd = (log_joint(&arch, &p(&arch, &up), &s, &d).unwrap()
                    - log_joint(&arch, &p(&arch, &dn), &s, &d).unwrap())
                    / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-2), "{:?} {i}: {fd} vs {}", s.regularizer, g[i]);
            }
        }
    }

    #[test]
    fn minibatch_is_unbiased_scaling() {
        let (m, _, _) = scalar_case();
        let d = Dataset::from_scalars("mb", 0, &[1.0, 2.0], &[1.0, 3.0]).unwrap();
        let s = LogJointSpec::gaussian(1.0, 1.0, 2).unwrap();
        let theta = p(&m, &[0.3]);
        let (full, gf) = loss_grad(&m, &theta, &s, &d, Batch::Full).unwrap();
        let (a, ga) = loss_grad(&m, &theta, &s, &d, Batch::Indices(&[0])).unwrap();
        let (b, gb) = loss_grad(&m, &theta, &s, &d, Batch::Indices(&[1])).unwrap();
        assert!((0.5 * (a + b) - full).abs() < 1e-12);
        assert!((0.5 * (ga[0] + gb[0]) - gf[0]).abs() < 1e-12);
    }

    #[test]
    fn order_invariance_without_regularizer() {
        let arch = MlpArch::new(1, vec![3], 1, Activation::Tanh).unwrap();
        let d = Dataset::from_scalars("o", 0, &[0.1, 0.5, -0.7, 2.0], &[1.0, 0.0, 0.5, -1.0]).unwrap();
        let r = d.reordered(&[2, 0, 3, 1]).unwrap();
        let s = LogJointSpec::gaussian(0.5, 1.0, 4).unwrap();
        let theta = arch.init_params(2);
        let a = log_joint(&arch, &theta, &s, &d).unwrap();
        let b = log_joint(&arch, &theta, &s, &r).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn augmented_targets_shift() {
        let d = Dataset::from_scalars("a", 0, &[1.0, 2.0], &[1.0, -1.0]).unwrap();
        let s = LogJointSpec::gaussian(1.0, 1.0, 2).unwrap();
        let same = augmented_targets(&d, &s.with_regularizer(Regularizer::DataAugment { lambda: 0.0 })).unwrap();
        assert_eq!(same.targets(), d.targets());
        let shifted = augmented_targets(&d, &s.with_regularizer(Regularizer::DataAugment { lambda: 0.2 })).unwrap();
        let deltas: Vec<f64> = shifted.targets().iter().zip(d.targets()).map(|(a, b)| a[0] - b[0]).collect();
        assert!((deltas[0] - 0.1).abs() < 1e-15 && (deltas[0] - deltas[1]).abs() < 1e-15);

        let one = Dataset::from_scalars("b", 0, &[1.0], &[1.0]).unwrap();
        let s1 =
            LogJointSpec::gaussian(1.0, 1.0, 1).unwrap().with_regularizer(Regularizer::DataAugment { lambda: 0.1 });
        assert!((augmented_targets(&one, &s1).unwrap().target(0)[0] - 1.1).abs() < 1e-15);

        let cat = LogJointSpec::new(Likelihood::Categorical, Prior::Gaussian { var: 1.0 }, 2).unwrap();
        assert!(matches!(augmented_targets(&d, &cat), Err(Error::UnsupportedLikelihood)));
    }

    #[test]
    fn scalar_hessian_is_minus_two() {
        let (m, d, s) = scalar_case();
        let h = full_hessian(&m, &p(&m, &[0.3]), &s, &d, DEFAULT_HESSIAN_CAP).unwrap();
        assert!((h.get(0, 0) + 2.0).abs() < 1e-9);
        let hv = hvp(&m, &p(&m, &[0.3]), &s, &d, &[0.0]).unwrap();
        assert_eq!(hv, vec![0.0]);
    }

    #[test]
    fn hessian_cap() {
        let (m, d, s) = scalar_case();
        assert!(matches!(full_hessian(&m, &p(&m, &[0.0]), &s, &d, 0), Err(Error::SizeCapExceeded { .. })));
    }

    #[test]
    fn categorical_gradient_matches_fd() {
        let arch = MlpArch::new(2, vec![3], 2, Activation::Tanh).unwrap();
        let d = Dataset::new(
            "cls",
            0,
            vec![vec![0.1, 0.2], vec![-1.0, 0.4], vec![0.7, -0.3]],
            vec![vec![0.0], vec![1.0], vec![1.0]],
        )
        .unwrap();
        let s = LogJointSpec::new(Likelihood::Categorical, Prior::Gaussian { var: 1.5 }, 3).unwrap();
        let theta = arch.init_params(8);
        let (_, g) = loss_grad(&arch, &theta, &s, &d, Batch::Full).unwrap();
        for i in 0..theta.len() {
            let h = 1e-5;
            let mut up = theta.as_slice().to_vec();
            up[i] += h;
            let mut dn = theta.as_slice().to_vec();
            dn[i] -= h;
            let fd = (log_joint(&arch, &p(&arch, &up), &s, &d).unwrap()
                - log_joint(&arch, &p(&arch, &dn), &s, &d).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(LogJointSpec::gaussian(0.0, 1.0, 1).is_err());
        assert!(LogJointSpec::gaussian(1.0, -1.0, 1).is_err());
        assert!(LogJointSpec::gaussian(1.0, 1.0, 0).is_err());
        let s = LogJointSpec::gaussian(1.0, 1.0, 1).unwrap();
        assert!(s.with_regularizer(Regularizer::AmortizedAbs { eval_inputs: vec![], lambda: 1.0 }).validate().is_err());
        assert!(s.with_regularizer(Regularizer::InSampleAbs { lambda: f64::NAN }).validate().is_err());
    }
}
