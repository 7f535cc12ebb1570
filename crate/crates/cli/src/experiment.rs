//! Experiment grid: data generation, MAP training with observation-variance
//! selection, per-method variance estimates and metrics.

use rayon::prelude::*;
use regvar_core::laplace::{build_precision, predictive_variance, PrecisionOptions};
use regvar_core::net::{forward, grad_params};
use regvar_core::optim::{fit, FitResult};
use regvar_core::predictive::{nll, rescale_grid, tune_rescale};
use regvar_core::regvar::{amortized_fit, in_sample_fit, param_uncertainty_fit, pointwise_variance, sparsify};
use regvar_core::{
    gen_synthetic, Dataset, LogJointSpec, Method, MetricReport, MlpArch, Model, OptimConfig, ParamVector,
    PrecisionKind, PredictiveGaussian, Splits, SyntheticTask,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, MethodName};
use crate::error::CliError;

pub const SPLITS: [&str; 3] = ["val", "test_id", "test_ood"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionPoint {
    pub obs_var: f64,
    /// `None` when the fit for this value failed.
    pub val_nll: Option<f64>,
    pub selected: bool,
}

/// A trained (dataset, seed) cell shared by every method.
#[derive(Debug, Clone)]
pub struct Cell {
    pub task: SyntheticTask,
    pub seed: u64,
    pub splits: Splits,
    pub arch: MlpArch,
    pub spec: LogJointSpec,
    pub obs_var: f64,
    pub map: ParamVector,
    pub map_grad_norm: f64,
    pub map_steps: usize,
    pub polish_converged: bool,
    pub selection: Vec<SelectionPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellInfo {
    pub dataset: String,
    pub seed: u64,
    pub obs_var: Option<f64>,
    pub map_grad_norm: Option<f64>,
    pub map_steps: Option<usize>,
    pub polish_converged: Option<bool>,
    pub selection: Vec<SelectionPoint>,
    pub error: Option<String>,
}

impl Cell {
    pub fn info(&self) -> CellInfo {
        CellInfo {
            dataset: self.task.as_str().into(),
            seed: self.seed,
            obs_var: Some(self.obs_var),
            map_grad_norm: Some(self.map_grad_norm),
            map_steps: Some(self.map_steps),
            polish_converged: Some(self.polish_converged),
            selection: self.selection.clone(),
            error: None,
        }
    }

    pub fn split(&self, name: &str) -> &Dataset {
        match name {
            "train" => &self.splits.train,
            "val" => &self.splits.val,
            "test_id" => &self.splits.test_id,
            _ => &self.splits.test_ood,
        }
    }

    fn refit_config(&self, cfg: &ExperimentConfig) -> OptimConfig {
        OptimConfig { seed: self.seed, ..OptimConfig::lbfgs(cfg.train.refit_grad_tol, cfg.train.refit_max_steps) }
    }

    fn mean(&self, x: &[f64]) -> Result<f64, CliError> {
        Ok(forward(&self.arch, &self.map, x)?[0])
    }
}

fn adam_config(cfg: &ExperimentConfig, seed: u64) -> OptimConfig {
    OptimConfig {
        method: Method::adam(cfg.train.lr),
        max_steps: cfg.train.adam_steps,
        convergence_tol: cfg.train.adam_tol,
        seed,
        ..OptimConfig::default()
    }
}

fn map_predictives(
    arch: &MlpArch,
    params: &ParamVector,
    data: &Dataset,
    obs_var: f64,
) -> Result<Vec<PredictiveGaussian>, CliError> {
    data.inputs().iter().map(|x| Ok(PredictiveGaussian::new(forward(arch, params, x)?[0], 0.0, obs_var)?)).collect()
}

fn targets(data: &Dataset) -> Vec<f64> {
    data.targets().iter().map(|y| y[0]).collect()
}

/// Generates the splits, fits and polishes a MAP for every observation
/// variance and keeps the one with the lowest validation NLL.
pub fn prepare(cfg: &ExperimentConfig, task: SyntheticTask, seed: u64) -> Result<Cell, CliError> {
    let splits = gen_synthetic(task, seed)?;
    let arch = cfg.arch();
    let init = arch.init_params(seed);
    let n = splits.train.len();
    let val_y = targets(&splits.val);
    let polish = OptimConfig { seed, ..OptimConfig::lbfgs(cfg.train.polish_grad_tol, cfg.train.polish_max_steps) };

    let mut selection = Vec::with_capacity(cfg.obs_var_grid.len());
    let mut best: Option<(f64, usize, FitResult, usize)> = None;
    for (i, &obs_var) in cfg.obs_var_grid.iter().enumerate() {
        let spec = LogJointSpec::gaussian(obs_var, cfg.prior_var, n)?;
        let outcome = fit(&arch, &init, &spec, &splits.train, &adam_config(cfg, seed))
            .and_then(|adam| Ok((adam.steps, fit(&arch, &adam.params, &spec, &splits.train, &polish)?)))
            .map_err(CliError::from)
            .and_then(|(adam_steps, r)| {
                let preds = map_predictives(&arch, &r.params, &splits.val, obs_var)?;
                Ok((nll(&preds, &val_y)?, adam_steps, r))
            });
        let val_nll = match outcome {
            Ok((v, adam_steps, r)) => {
                if best.as_ref().is_none_or(|b| v < b.0) {
                    best = Some((v, i, r, adam_steps));
                }
                Some(v)
            }
            Err(_) => None,
        };
        selection.push(SelectionPoint { obs_var, val_nll, selected: false });
    }
    let (_, chosen, polished, adam_steps) =
        best.ok_or(CliError::Core(regvar_core::Error::NonFiniteObjective { step: 0 }))?;
    selection[chosen].selected = true;
    let obs_var = cfg.obs_var_grid[chosen];
    let spec = LogJointSpec::gaussian(obs_var, cfg.prior_var, n)?;
    Ok(Cell {
        task,
        seed,
        splits,
        arch,
        spec,
        obs_var,
        map: polished.params,
        map_grad_norm: polished.grad_norm.unwrap_or(f64::NAN),
        map_steps: adam_steps + polished.steps,
        polish_converged: polished.converged,
        selection,
    })
}

fn precision_kind(method: MethodName, cfg: &ExperimentConfig) -> Option<PrecisionKind> {
    match method {
        MethodName::FullHessian => Some(PrecisionKind::FullExact),
        MethodName::Ggn => Some(PrecisionKind::FullGgn),
        MethodName::DiagGgn => Some(PrecisionKind::DiagGgn),
        MethodName::EigenK => Some(PrecisionKind::EigenK(cfg.eigen_k)),
        _ => None,
    }
}

/// Epistemic variances of one method at a set of inputs.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub variances: Vec<f64>,
    pub reg_params: Option<ParamVector>,
    /// False when a refit hit its step cap.
    pub converged: bool,
    /// Diagonal jitter added to the exact precision, if any.
    pub jitter: f64,
}

pub fn estimate(
    cell: &Cell,
    method: MethodName,
    cfg: &ExperimentConfig,
    lambda: f64,
    points: &[Vec<f64>],
) -> Result<Estimate, CliError> {
    let arch = &cell.arch;
    let data = &cell.splits.train;
    let refit = cell.refit_config(cfg);
    let plain = |variances| Estimate { variances, reg_params: None, converged: true, jitter: 0.0 };
    let from_result = |r: regvar_core::RegVarResult| -> Result<Estimate, CliError> {
        let variances = points.iter().map(|x| Ok(r.variance_at(arch, x)?[0])).collect::<Result<Vec<_>, CliError>>()?;
        Ok(Estimate { variances, converged: r.refit_converged, reg_params: Some(r.reg_params), jitter: 0.0 })
    };
    match method {
        MethodName::Map => Ok(plain(vec![0.0; points.len()])),
        MethodName::FullHessian | MethodName::Ggn | MethodName::DiagGgn | MethodName::EigenK => {
            let kind = precision_kind(method, cfg).expect("laplace method");
            let p = build_precision(arch, &cell.map, &cell.spec, data, kind, PrecisionOptions::default())?;
            let variances = points
                .iter()
                .map(|x| Ok(predictive_variance(arch, &cell.map, &p, x, 0)?))
                .collect::<Result<Vec<_>, CliError>>()?;
            Ok(Estimate { jitter: p.jitter, ..plain(variances) })
        }
        MethodName::RegvarPointwise => {
            let variances = points
                .par_iter()
                .map(|x| Ok(pointwise_variance(arch, &cell.map, &cell.spec, data, x, 0, lambda, &refit)?))
                .collect::<Result<Vec<_>, CliError>>()?;
            Ok(plain(variances))
        }
        MethodName::RegvarAmortized => {
            from_result(amortized_fit(arch, &cell.map, &cell.spec, data, points, lambda, &refit)?)
        }
        MethodName::RegvarInSample => from_result(in_sample_fit(arch, &cell.map, &cell.spec, data, lambda, &refit)?),
        MethodName::RegvarParam => {
            let r = param_uncertainty_fit(arch, &cell.map, &cell.spec, data, lambda, cfg.param_l1_denominator, &refit)?;
            let pv = r.param_variances();
            let variances = points
                .iter()
                .map(|x| {
                    let g = grad_params(arch, &cell.map, x, 0)?;
                    Ok(g.iter().zip(&pv).map(|(gi, vi)| gi * gi * vi).sum())
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            Ok(Estimate { variances, converged: r.refit_converged, reg_params: Some(r.reg_params), jitter: 0.0 })
        }
    }
}

/// Per-parameter variances for sparsification.
pub fn param_variances(cell: &Cell, method: MethodName, cfg: &ExperimentConfig) -> Result<Vec<f64>, CliError> {
    let data = &cell.splits.train;
    match method {
        MethodName::RegvarParam => {
            let r = param_uncertainty_fit(
                &cell.arch,
                &cell.map,
                &cell.spec,
                data,
                cfg.lambda,
                cfg.param_l1_denominator,
                &cell.refit_config(cfg),
            )?;
            Ok(r.param_variances())
        }
        MethodName::Map => Ok(vec![0.0; cell.map.len()]),
        m => {
            let kind = precision_kind(m, cfg)
                .filter(|_| m.has_param_variance())
                .ok_or_else(|| CliError::Config(format!("method `{m}` has no parameter variances")))?;
            let p = build_precision(&cell.arch, &cell.map, &cell.spec, data, kind, PrecisionOptions::default())?;
            Ok(p.inverse_diagonal())
        }
    }
}

/// The evaluation inputs of all three splits, concatenated in [`SPLITS`] order.
pub fn evaluation_points(cell: &Cell) -> (Vec<Vec<f64>>, [usize; 3]) {
    let mut points = Vec::new();
    let mut sizes = [0; 3];
    for (i, s) in SPLITS.iter().enumerate() {
        let d = cell.split(s);
        sizes[i] = d.len();
        points.extend(d.inputs().iter().cloned());
    }
    (points, sizes)
}

fn split_predictives(
    cell: &Cell,
    variances: &[f64],
    sizes: [usize; 3],
) -> Result<Vec<Vec<PredictiveGaussian>>, CliError> {
    let mut out = Vec::with_capacity(3);
    let mut offset = 0;
    for (i, s) in SPLITS.iter().enumerate() {
        let d = cell.split(s);
        let preds = d
            .inputs()
            .iter()
            .zip(&variances[offset..offset + sizes[i]])
            .map(|(x, v)| Ok(PredictiveGaussian::new(cell.mean(x)?, *v, cell.obs_var)?))
            .collect::<Result<Vec<_>, CliError>>()?;
        offset += sizes[i];
        out.push(preds);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: MethodName,
    pub dataset: String,
    pub split: String,
    pub seed: u64,
    pub report: Option<MetricReport>,
    pub status: String,
    pub obs_var: Option<f64>,
    pub map_grad_norm: Option<f64>,
}

/// One plot series: OOD-grid mean with a 95% band.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// `(x, y, lo, hi)` rows.
    pub rows: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub cells: Vec<CellInfo>,
    pub series: Vec<Series>,
}

fn status_of(e: &Estimate) -> String {
    match (e.converged, e.jitter > 0.0) {
        (true, false) => "ok".into(),
        (false, _) => "ok-refit-unconverged".into(),
        (true, true) => format!("ok-jitter-{:e}", e.jitter),
    }
}

fn failed_rows(
    method: MethodName,
    task: SyntheticTask,
    seed: u64,
    cell: Option<&Cell>,
    err: &CliError,
) -> Vec<ResultRow> {
    SPLITS
        .iter()
        .map(|s| ResultRow {
            method,
            dataset: task.as_str().into(),
            split: (*s).into(),
            seed,
            report: None,
            status: format!("error: {err}"),
            obs_var: cell.map(|c| c.obs_var),
            map_grad_norm: cell.map(|c| c.map_grad_norm),
        })
        .collect()
}

fn evaluate_method(
    cell: &Cell,
    method: MethodName,
    cfg: &ExperimentConfig,
    points: &[Vec<f64>],
    sizes: [usize; 3],
) -> Result<(Vec<ResultRow>, Series), CliError> {
    let est = estimate(cell, method, cfg, cfg.lambda, points)?;
    let preds = split_predictives(cell, &est.variances, sizes)?;
    let rescale = tune_rescale(&preds[0], &targets(&cell.splits.val))?;
    let status = status_of(&est);
    let mut rows = Vec::with_capacity(3);
    let mut series = Series { name: format!("{}_seed{}_{}", cell.task, cell.seed, method), rows: Vec::new() };
    for (i, s) in SPLITS.iter().enumerate() {
        let scaled: Vec<PredictiveGaussian> = preds[i].iter().map(|p| p.with_rescale(rescale)).collect();
        let ys = targets(cell.split(s));
        let report = MetricReport::regression(method.as_str(), cell.task.as_str(), s, cell.seed, &scaled, &ys)?;
        if *s == "test_ood" {
            let xs = cell.split(s).inputs();
            series.rows = xs
                .iter()
                .zip(&scaled)
                .map(|(x, p)| {
                    let (lo, hi) = p.interval(regvar_core::predictive::Z_975);
                    [x[0], p.mean, lo, hi]
                })
                .collect();
        }
        rows.push(ResultRow {
            method,
            dataset: cell.task.as_str().into(),
            split: (*s).into(),
            seed: cell.seed,
            report: Some(report),
            status: status.clone(),
            obs_var: Some(cell.obs_var),
            map_grad_norm: Some(cell.map_grad_norm),
        });
    }
    Ok((rows, series))
}

fn evaluate_cell(cell: &Cell, cfg: &ExperimentConfig) -> (Vec<ResultRow>, Vec<Series>) {
    let (points, sizes) = evaluation_points(cell);
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for &method in &cfg.methods {
        match evaluate_method(cell, method, cfg, &points, sizes) {
            Ok((r, s)) => {
                rows.extend(r);
                series.push(s);
            }
            Err(e) => rows.extend(failed_rows(method, cell.task, cell.seed, Some(cell), &e)),
        }
    }
    (rows, series)
}

fn grid(cfg: &ExperimentConfig) -> Vec<(SyntheticTask, u64)> {
    cfg.datasets.iter().flat_map(|&t| cfg.seeds.iter().map(move |&s| (t, s))).collect()
}

fn failed_cell(task: SyntheticTask, seed: u64, e: &CliError) -> CellInfo {
    CellInfo {
        dataset: task.as_str().into(),
        seed,
        obs_var: None,
        map_grad_norm: None,
        map_steps: None,
        polish_converged: None,
        selection: Vec::new(),
        error: Some(e.to_string()),
    }
}

/// Trains every (dataset, seed) cell in parallel, in grid order.
pub fn prepare_all(cfg: &ExperimentConfig) -> Vec<(SyntheticTask, u64, Result<Cell, CliError>)> {
    grid(cfg).into_par_iter().map(|(t, s)| (t, s, prepare(cfg, t, s))).collect()
}

/// Runs the full method x dataset x seed grid. Failures are recorded per
/// (method, dataset, seed) and do not stop the grid.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, CliError> {
    cfg.validate()?;
    let parts: Vec<(Vec<ResultRow>, Vec<Series>, CellInfo)> = grid(cfg)
        .into_par_iter()
        .map(|(task, seed)| match prepare(cfg, task, seed) {
            Ok(cell) => {
                let (rows, series) = evaluate_cell(&cell, cfg);
                (rows, series, cell.info())
            }
            Err(e) => {
                let rows = cfg.methods.iter().flat_map(|&m| failed_rows(m, task, seed, None, &e)).collect();
                (rows, Vec::new(), failed_cell(task, seed, &e))
            }
        })
        .collect();
    let mut out = ExperimentOutput::default();
    for (rows, series, info) in parts {
        out.rows.extend(rows);
        out.series.extend(series);
        out.cells.push(info);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityRow {
    pub method: MethodName,
    pub dataset: String,
    pub split: String,
    pub seed: u64,
    pub z: f64,
    pub zeroed: usize,
    pub param_count: usize,
    pub mean_abs_error: Option<f64>,
    pub status: String,
    pub obs_var: Option<f64>,
}

fn mean_abs_error(arch: &MlpArch, params: &ParamVector, data: &Dataset) -> Result<f64, CliError> {
    let mut total = 0.0;
    for (x, y) in data.inputs().iter().zip(data.targets()) {
        total += (forward(arch, params, x)?[0] - y[0]).abs();
    }
    Ok(total / data.len() as f64)
}

/// Sparsifies the MAP with each parameter-variance source and measures test error.
pub fn sparsity_experiment(cfg: &ExperimentConfig) -> Result<Vec<SparsityRow>, CliError> {
    cfg.validate()?;
    let mut methods: Vec<MethodName> = cfg.methods.iter().copied().filter(|m| m.has_param_variance()).collect();
    if methods.is_empty() {
        return Err(CliError::Config(
            "sparsity needs at least one of full-hessian, ggn, diag-ggn, regvar-param".into(),
        ));
    }
    methods.insert(0, MethodName::Map);
    let parts: Vec<Vec<SparsityRow>> = prepare_all(cfg)
        .into_par_iter()
        .map(|(task, seed, cell)| {
            let mut rows = Vec::new();
            for &method in &methods {
                let outcome = cell.as_ref().map_err(|e| CliError::Config(e.to_string())).and_then(|c| {
                    let pv = param_variances(c, method, cfg)?;
                    let mut out = Vec::new();
                    for &z in &cfg.sparsity_z {
                        let sparse = sparsify(&c.map, &pv, z)?;
                        let zeroed = sparse
                            .as_slice()
                            .iter()
                            .zip(c.map.as_slice())
                            .filter(|(s, m)| **s == 0.0 && **m != 0.0)
                            .count();
                        for s in ["test_id", "test_ood"] {
                            out.push((z, zeroed, s, mean_abs_error(&c.arch, &sparse, c.split(s))?));
                        }
                    }
                    Ok(out)
                });
                let param_count = cfg.arch().param_count();
                let obs_var = cell.as_ref().ok().map(|c| c.obs_var);
                match outcome {
                    Ok(entries) => rows.extend(entries.into_iter().map(|(z, zeroed, s, err)| SparsityRow {
                        method,
                        dataset: task.as_str().into(),
                        split: s.into(),
                        seed,
                        z,
                        zeroed,
                        param_count,
                        mean_abs_error: Some(err),
                        status: "ok".into(),
                        obs_var,
                    })),
                    Err(e) => rows.push(SparsityRow {
                        method,
                        dataset: task.as_str().into(),
                        split: String::new(),
                        seed,
                        z: f64::NAN,
                        zeroed: 0,
                        param_count,
                        mean_abs_error: None,
                        status: format!("error: {e}"),
                        obs_var,
                    }),
                }
            }
            rows
        })
        .collect();
    Ok(parts.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: MethodName,
    pub dataset: String,
    pub seed: u64,
    pub lambda: f64,
    pub rescale: f64,
    pub selected: bool,
    pub split: String,
    pub nll: Option<f64>,
    pub status: String,
    pub obs_var: Option<f64>,
}

fn sweep_one(
    cell: &Cell,
    method: MethodName,
    lambda: f64,
    cfg: &ExperimentConfig,
    points: &[Vec<f64>],
    sizes: [usize; 3],
) -> Result<Vec<SweepRow>, CliError> {
    let est = estimate(cell, method, cfg, lambda, points)?;
    let preds = split_predictives(cell, &est.variances, sizes)?;
    let val_y = targets(&cell.splits.val);
    let chosen = tune_rescale(&preds[0], &val_y)?;
    let status = status_of(&est);
    let row = |rescale: f64, split: &str, nll: f64| SweepRow {
        method,
        dataset: cell.task.as_str().into(),
        seed: cell.seed,
        lambda,
        rescale,
        selected: rescale == chosen,
        split: split.into(),
        nll: Some(nll),
        status: status.clone(),
        obs_var: Some(cell.obs_var),
    };
    let mut rows = Vec::new();
    for r in rescale_grid() {
        let scaled: Vec<_> = preds[0].iter().map(|p| p.with_rescale(r)).collect();
        rows.push(row(r, "val", nll(&scaled, &val_y)?));
    }
    for (i, s) in SPLITS.iter().enumerate().skip(1) {
        let scaled: Vec<_> = preds[i].iter().map(|p| p.with_rescale(chosen)).collect();
        rows.push(row(chosen, s, nll(&scaled, &targets(cell.split(s)))?));
    }
    Ok(rows)
}

/// Validation NLL over the (lambda, rescale) grid and test NLL at the tuned rescale.
pub fn lambda_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, CliError> {
    cfg.validate()?;
    let methods: Vec<MethodName> = cfg.methods.iter().copied().filter(|m| m.is_regvar()).collect();
    if methods.is_empty() {
        return Err(CliError::Config("lambda sweep needs at least one regvar method".into()));
    }
    let parts: Vec<Vec<SweepRow>> = prepare_all(cfg)
        .into_par_iter()
        .map(|(task, seed, cell)| {
            let mut rows = Vec::new();
            for &method in &methods {
                for &lambda in &cfg.lambda_grid {
                    let outcome = cell.as_ref().map_err(|e| CliError::Config(e.to_string())).and_then(|c| {
                        let (points, sizes) = evaluation_points(c);
                        sweep_one(c, method, lambda, cfg, &points, sizes)
                    });
                    match outcome {
                        Ok(r) => rows.extend(r),
                        Err(e) => rows.push(SweepRow {
                            method,
                            dataset: task.as_str().into(),
                            seed,
                            lambda,
                            rescale: f64::NAN,
                            selected: false,
                            split: String::new(),
                            nll: None,
                            status: format!("error: {e}"),
                            obs_var: cell.as_ref().ok().map(|c| c.obs_var),
                        }),
                    }
                }
            }
            rows
        })
        .collect();
    Ok(parts.into_iter().flatten().collect())
}
