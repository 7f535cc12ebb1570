//! Regularization-variation variance estimates.
//!
//! Each estimator refits the MAP with a small extra term in the log joint,
//! warm-started at the MAP, and divides the shift in the prediction (or the
//! parameters) by `lambda`.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{check_input, Model, ParamVector};
use crate::objective::{augmented_targets, LogJointSpec, Regularizer};
use crate::optim::{warm_start_fit, FitResult, OptimConfig, REFIT_TOL};

/// The shift must exceed this multiple of the refit tolerance.
pub const NOISE_GUARD: f64 = 10.0;
pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const SWEEP_LAMBDAS: [f64; 3] = [1e-2, 1e-3, 1e-4];
/// Relative agreement required between the last two sweep estimates.
pub const SWEEP_AGREEMENT: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegVarMode {
    Pointwise,
    Amortized,
    ParamUncertainty,
    DataAug,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VarianceKey {
    Query { query: Vec<f64>, output: usize },
    Param { param: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEntry {
    #[serde(flatten)]
    pub key: VarianceKey,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegVarResult {
    pub mode: RegVarMode,
    pub lambda: f64,
    pub map_params: ParamVector,
    pub reg_params: ParamVector,
    pub variances: Vec<VarianceEntry>,
    pub refit_steps: usize,
    pub refit_converged: bool,
}

impl RegVarResult {
    /// `(1/lambda) |f_reg(x) - f_map(x)|` for every output.
    pub fn variance_at(&self, model: &dyn Model, x: &[f64]) -> Result<Vec<f64>> {
        check_input(model, x)?;
        let a = model.forward(self.reg_params.as_slice(), x);
        let b = model.forward(self.map_params.as_slice(), x);
        Ok(a.iter().zip(&b).map(|(r, m)| (r - m).abs() / self.lambda.abs()).collect())
    }

    /// Per-parameter `(1/lambda) |theta_reg - theta_map|`.
    pub fn param_variances(&self) -> Vec<f64> {
        shift_variances(&self.reg_params, &self.map_params, self.lambda)
    }

    pub fn to_json(&self, map_params_path: Option<&str>, reg_params_path: Option<&str>) -> serde_json::Value {
        json!({
            "mode": self.mode,
            "lambda": self.lambda,
            "map_params_path": map_params_path,
            "reg_params_path": reg_params_path,
            "variances": self.variances,
        })
    }
}

fn shift_variances(reg: &ParamVector, map: &ParamVector, lambda: f64) -> Vec<f64> {
    reg.as_slice().iter().zip(map.as_slice()).map(|(r, m)| (r - m).abs() / lambda.abs()).collect()
}

/// Tolerance the warm-started refit is held to.
pub fn refit_tolerance(cfg: &OptimConfig) -> f64 {
    let mut tol = cfg.convergence_tol.min(REFIT_TOL);
    if let Some(g) = cfg.grad_tol {
        tol = tol.min(g.min(REFIT_TOL));
    }
    tol
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda == 0.0 || !lambda.is_finite() || lambda.abs() > 0.1 {
        return Err(Error::InvalidArgument(format!("lambda must be nonzero with |lambda| <= 0.1, got {lambda}")));
    }
    Ok(())
}

fn guard(delta: f64, cfg: &OptimConfig) -> Result<()> {
    let floor = NOISE_GUARD * refit_tolerance(cfg);
    if delta < floor {
        return Err(Error::SignalBelowNoise { delta, floor });
    }
    Ok(())
}

fn refit(
    model: &dyn Model,
    map: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    reg: Regularizer,
    cfg: &OptimConfig,
) -> Result<FitResult> {
    warm_start_fit(model, map, &spec.with_regularizer(reg), data, cfg)
}

/// Refit with `+lambda * f(x)[output]` and return the full result.
#[allow(clippy::too_many_arguments)]
pub fn pointwise_fit(
    model: &dyn Model,
    map: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    x: &[f64],
    output: usize,
    lambda: f64,
    cfg: &OptimConfig,
) -> Result<RegVarResult> {
    check_lambda(lambda)?;
    let reg = Regularizer::PredictionAt { query: x.to_vec(), output, lambda };
    let fit = refit(model, map, spec, data, reg, cfg)?;
    let delta = (model.forward(fit.params.as_slice(), x)[output] - model.forward(map.as_slice(), x)[output]).abs();
    guard(delta, cfg)?;
    Ok(RegVarResult {
        mode: RegVarMode::Pointwise,
        lambda,
        map_params: map.clone(),
        reg_params: fit.params,
        variances: vec![VarianceEntry {
            key: VarianceKey::Query { query: x.to_vec(), output },
            variance: delta / lambda.abs(),
        }],
        refit_steps: fit.steps,
        refit_converged: fit.converged,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn pointwise_variance(
    model: &dyn Model,
    map: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    x: &[f64],
    output: usize,
    lambda: f64,
    cfg: &OptimConfig,
) -> Result<f64> {
    pointwise_fit(model, map, spec, data, x, output, lambda, cfg).map(|r| r.variances[0].variance)
}

fn function_fit(
    model: &dyn Model,
    map: &ParamVector,
    fit: FitResult,
    eval_inputs: &[Vec<f64>],
    mode: RegVarMode,
    lambda: f64,
    cfg: &OptimConfig,
) -> Result<RegVarResult> {
    let mut result = RegVarResult {
        mode,
        lambda,
        map_params: map.clone(),
        reg_params: fit.params,
        variances: Vec::with_capacity(eval_inputs.len() * model.output_dim()),
        refit_steps: fit.steps,
        refit_converged: fit.converged,
    };
    let mut largest = 0.0_f64;
    for x in eval_inputs {
        for (output, v) in result.variance_at(model, x)?.into_iter().enumerate() {
            largest = largest.max(v * lambda.abs());
            result.variances.push(VarianceEntry { key: VarianceKey::Query { query: x.clone(), output }, variance: v });
        }
    }
    guard(largest, cfg)?;
    Ok(result)
}

/// Single refit with `(lambda / m) sum_k |f(eval_k)|_1`.
pub fn amortized_fit(
    model: &dyn Model,
    map: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    eval_inputs: &[Vec<f64>],
    lambda: f64,
    cfg: &OptimConfig,
) -> Result<RegVarResult> {
    check_lambda(lambda)?;
    if eval_inputs.is_empty() {
        return Err(Error::InvalidArgument("amortized fit needs at least one evaluation input".into()));
    }
    let reg = Regularizer::AmortizedAbs { eval_inputs: eval_inputs.to_vec(), lambda };
    let fit = refit(model, map, spec, data, reg, cfg)?;
    function_fit(model, map, fit, eval_inputs, RegVarMode::Amortized, lambda, cfg)
}

/// Amortized fit over the training inputs, using the per-example form of the regularizer.
pub fn in_sample_fit(
    model: &dyn Model,
    map: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    lambda: f64,
    cfg: &OptimConfig,
) -> Result<RegVarResult> {
    check_lambda(lambda)?;
    let fit = refit(model, map, spec, data, Regularizer::InSampleAbs { lambda }, cfg)?;
    function_fit(model, map, fit, data.inputs(), RegVarMode::Amortized, lambda, cfg)
}

/// Refit on targets shifted by `lambda * obs_var / n` with no explicit regularizer.
pub fn data_aug_fit(
    model: &dyn Model,
    map: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    lambda: f64,
    cfg: &OptimConfig,
) -> Result<RegVarResult> {
    check_lambda(lambda)?;
    let shifted = augmented_targets(data, &spec.with_regularizer(Regularizer::DataAugment { lambda }))?;
    let fit = warm_start_fit(model, map, &spec.unregularized(), &shifted, cfg)?;
    function_fit(model, map, fit, data.inputs(), RegVarMode::DataAug, lambda, cfg)
}

/// Refit with the L1 parameter regularizer; variances are per parameter.
pub fn param_uncertainty_fit(
    model: &dyn Model,
    map: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    lambda: f64,
    denominator: Option<f64>,
    cfg: &OptimConfig,
) -> Result<RegVarResult> {
    check_lambda(lambda)?;
    let fit = refit(model, map, spec, data, Regularizer::ParamL1 { lambda, denominator }, cfg)?;
    let vars = shift_variances(&fit.params, map, lambda);
    let largest = vars.iter().fold(0.0_f64, |m, v| m.max(*v)) * lambda.abs();
    guard(largest, cfg)?;
    Ok(RegVarResult {
        mode: RegVarMode::ParamUncertainty,
        lambda,
        map_params: map.clone(),
        reg_params: fit.params,
        variances: vars
            .into_iter()
            .enumerate()
            .map(|(param, variance)| VarianceEntry { key: VarianceKey::Param { param }, variance })
            .collect(),
        refit_steps: fit.steps,
        refit_converged: fit.converged,
    })
}

/// Zeroes every coordinate whose `z`-sd interval covers zero.
pub fn sparsify(map: &ParamVector, param_variances: &[f64], z: f64) -> Result<ParamVector> {
    if param_variances.len() != map.len() {
        return Err(Error::DimensionMismatch {
            what: "parameter variances",
            expected: map.len(),
            found: param_variances.len(),
        });
    }
    if !(z > 0.0) {
        return Err(Error::InvalidArgument("interval multiplier must be positive".into()));
    }
    let values = map
        .as_slice()
        .iter()
        .zip(param_variances)
        .map(|(&t, &v)| if t.abs() <= z * v.sqrt() { 0.0 } else { t })
        .collect();
    Ok(ParamVector::from_vec_unchecked(values))
}

/// Estimates over a decreasing lambda sequence and whether the last two agree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCheck {
    pub lambdas: Vec<f64>,
    pub estimates: Vec<f64>,
    /// `|v_last - v_prev| / |v_last|`.
    pub last_relative_gap: f64,
    /// Linear extrapolation of the last two estimates to `lambda = 0`.
    pub extrapolated: f64,
    pub agrees: bool,
}

pub fn sweep_check(lambdas: &[f64], estimates: &[f64]) -> Result<SweepCheck> {
    if lambdas.len() != estimates.len() || lambdas.len() < 2 {
        return Err(Error::InvalidArgument("sweep needs at least two matched estimates".into()));
    }
    let n = lambdas.len();
    let (l1, l2) = (lambdas[n - 2], lambdas[n - 1]);
    let (v1, v2) = (estimates[n - 2], estimates[n - 1]);
    let gap = (v2 - v1).abs() / v2.abs().max(f64::MIN_POSITIVE);
    let extrapolated = if l1 != l2 { (l1 * v2 - l2 * v1) / (l1 - l2) } else { v2 };
    Ok(SweepCheck {
        lambdas: lambdas.to_vec(),
        estimates: estimates.to_vec(),
        last_relative_gap: gap,
        extrapolated,
        agrees: gap <= SWEEP_AGREEMENT,
    })
}

/// Pointwise estimates over [`SWEEP_LAMBDAS`].
#[allow(clippy::too_many_arguments)]
pub fn pointwise_sweep(
    model: &dyn Model,
    map: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    x: &[f64],
    output: usize,
    cfg: &OptimConfig,
) -> Result<SweepCheck> {
    let estimates = SWEEP_LAMBDAS
        .iter()
        .map(|&l| pointwise_variance(model, map, spec, data, x, output, l, cfg))
        .collect::<Result<Vec<_>>>()?;
    sweep_check(&SWEEP_LAMBDAS, &estimates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::LinearModel;

    fn scalar() -> (LinearModel, Dataset, LogJointSpec, ParamVector, OptimConfig) {
        let m = LinearModel::new(1, false);
        let d = Dataset::from_scalars("unit", 0, &[1.0], &[1.0]).unwrap();
        let s = LogJointSpec::gaussian(1.0, 1.0, 1).unwrap();
        let p = ParamVector::new(&m, vec![0.5]).unwrap();
        (m, d, s, p, OptimConfig::accelerated(1e-12, 10_000))
    }

    #[test]
    fn scalar_pointwise_is_half_for_any_lambda() {
        let (m, d, s, p, cfg) = scalar();
        for lambda in [0.1, 1e-2, 1e-3, -1e-2] {
            let v = pointwise_variance(&m, &p, &s, &d, &[1.0], 0, lambda, &cfg).unwrap();
            assert!((v - 0.5).abs() < 1e-6, "{lambda}: {v}");
        }
    }

    #[test]
    fn scalar_param_uncertainty_is_half() {
        let (m, d, s, p, cfg) = scalar();
        let r = param_uncertainty_fit(&m, &p, &s, &d, 1e-3, None, &cfg).unwrap();
        assert!((r.param_variances()[0] - 0.5).abs() < 1e-6);
        assert_eq!(r.mode, RegVarMode::ParamUncertainty);
    }

    #[test]
    fn tiny_lambda_trips_guard() {
        let (m, d, s, p, cfg) = scalar();
        let loose = OptimConfig { grad_tol: Some(1e-6), ..cfg };
        // |delta f| = 5e-10 against a floor of 1e-8
        match pointwise_variance(&m, &p, &s, &d, &[1.0], 0, 1e-9, &loose) {
            Err(Error::SignalBelowNoise { delta, floor }) => assert!(delta < floor),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lambda_range_checked() {
        let (m, d, s, p, cfg) = scalar();
        assert!(pointwise_variance(&m, &p, &s, &d, &[1.0], 0, 0.0, &cfg).is_err());
        assert!(pointwise_variance(&m, &p, &s, &d, &[1.0], 0, 0.5, &cfg).is_err());
    }

    #[test]
    fn amortized_single_input_matches_pointwise() {
        let m = LinearModel::new(1, true);
        let d = Dataset::from_scalars("lin", 0, &[0.0, 1.0, 2.0], &[1.0, 2.0, 2.5]).unwrap();
        let s = LogJointSpec::gaussian(0.5, 2.0, 3).unwrap();
        let cfg = OptimConfig::accelerated(1e-12, 50_000);
        let map = crate::optim::fit(&m, &ParamVector::zeros(&m), &s, &d, &cfg).unwrap().params;
        let pw = pointwise_variance(&m, &map, &s, &d, &[1.5], 0, 1e-3, &cfg).unwrap();
        let am = amortized_fit(&m, &map, &s, &d, &[vec![1.5]], 1e-3, &cfg).unwrap();
        let v = am.variance_at(&m, &[1.5]).unwrap()[0];
        assert!((v - pw).abs() < 1e-6 * pw);
    }

    #[test]
    fn sparsify_rules() {
        let p = ParamVector::from_vec_unchecked(vec![0.0, 1.0, -0.5, 2.0]);
        assert_eq!(sparsify(&p, &[0.0; 4], 1.0).unwrap(), p);
        let vars = [0.3, 0.81, 0.25, 1.0];
        let zeroed = |z: f64| sparsify(&p, &vars, z).unwrap().as_slice().iter().filter(|v| **v == 0.0).count();
        assert_eq!(zeroed(1.0), 2);
        let mut last = 0;
        for z in [0.1, 0.5, 1.0, 1.5, 2.0, 3.0] {
            let c = zeroed(z);
            assert!(c >= last);
            last = c;
        }
    }

    #[test]
    fn sweep_extrapolates_linear_bias() {
        let l = [1e-2, 1e-3, 1e-4];
        let est: Vec<f64> = l.iter().map(|x| 2.0 + 5.0 * x).collect();
        let c = sweep_check(&l, &est).unwrap();
        assert!((c.extrapolated - 2.0).abs() < 1e-12);
        assert!(c.agrees);
    }

    #[test]
    fn json_shape() {
        let (m, d, s, p, cfg) = scalar();
        let r = pointwise_fit(&m, &p, &s, &d, &[1.0], 0, 1e-3, &cfg).unwrap();
        let j = r.to_json(Some("map.json"), None);
        assert_eq!(j["mode"], "pointwise");
        assert_eq!(j["variances"][0]["output"], 0);
        assert!(j["reg_params_path"].is_null());
    }
}
