//! One function per subcommand. Each returns the run directory it wrote.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use regvar_core::gen_synthetic;
use serde_json::json;

use crate::config::{ExperimentConfig, MethodName};
use crate::error::CliError;
use crate::experiment::{estimate, lambda_sweep, prepare_all, run_experiment, sparsity_experiment, Cell};
use crate::output::{results_csv, run_dir, selection_csv, sparsity_csv, sweep_csv, write, write_benchmark, write_json};

fn cell_dir(dir: &Path, dataset: &str, seed: u64) -> PathBuf {
    dir.join(format!("{dataset}_seed{seed}"))
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let dir = run_dir(out, "gen-data", cfg)?;
    for &task in &cfg.datasets {
        for &seed in &cfg.seeds {
            let splits = gen_synthetic(task, seed)?;
            let d = cell_dir(&dir, task.as_str(), seed);
            for (name, data) in [
                ("train", &splits.train),
                ("val", &splits.val),
                ("test_id", &splits.test_id),
                ("test_ood", &splits.test_ood),
            ] {
                std::fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
                data.save_csv(d.join(format!("{name}.csv")))?;
                write_json(&d.join(format!("{name}.json")), &data.metadata())?;
            }
        }
    }
    Ok(dir)
}

fn trained(cfg: &ExperimentConfig) -> Result<Vec<Cell>, CliError> {
    prepare_all(cfg).into_iter().map(|(_, _, c)| c).collect()
}

fn write_map(d: &Path, cell: &Cell, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let path = d.join("map_params.json");
    write_json(
        &path,
        &json!({
            "dataset": cell.task,
            "seed": cell.seed,
            "arch": cell.arch,
            "obs_var": cell.obs_var,
            "prior_var": cfg.prior_var,
            "grad_norm": cell.map_grad_norm,
            "steps": cell.map_steps,
            "polish_converged": cell.polish_converged,
            "params": cell.map,
        }),
    )?;
    Ok(path)
}

pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let dir = run_dir(out, "train", cfg)?;
    let cells = trained(cfg)?;
    for cell in &cells {
        let d = cell_dir(&dir, cell.task.as_str(), cell.seed);
        write_map(&d, cell, cfg)?;
        write(&d.join("obs_var_selection.csv"), &selection_csv(&cell.info()))?;
    }
    let infos: Vec<_> = cells.iter().map(Cell::info).collect();
    write_json(&dir.join("train.json"), &json!({ "config_hash": cfg.hash(), "cells": infos }))?;
    Ok(dir)
}

pub fn variance(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let dir = run_dir(out, "variance", cfg)?;
    let cells = trained(cfg)?;
    let jobs: Vec<(&Cell, MethodName)> = cells.iter().flat_map(|c| cfg.methods.iter().map(move |&m| (c, m))).collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|(cell, method)| {
            let mut points = cell.splits.test_id.inputs().to_vec();
            points.extend(cell.splits.test_ood.inputs().iter().cloned());
            estimate(cell, *method, cfg, cfg.lambda, &points).map(|e| (points, e))
        })
        .collect();
    for ((cell, method), result) in jobs.iter().zip(results) {
        let (points, est) = result?;
        let d = cell_dir(&dir, cell.task.as_str(), cell.seed);
        write_map(&d, cell, cfg)?;
        let reg_path = match &est.reg_params {
            Some(p) => {
                let name = format!("{method}_reg_params.json");
                write_json(&d.join(&name), p)?;
                Some(name)
            }
            None => None,
        };
        let variances: Vec<_> =
            points.iter().zip(&est.variances).map(|(x, v)| json!({ "query": x, "output": 0, "variance": v })).collect();
        write_json(
            &d.join(format!("{method}_variances.json")),
            &json!({
                "mode": method,
                "lambda": cfg.lambda,
                "map_params_path": "map_params.json",
                "reg_params_path": reg_path,
                "variances": variances,
            }),
        )?;
    }
    Ok(dir)
}

pub fn evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    let dir = run_dir(out, "evaluate", cfg)?;
    let result = run_experiment(cfg)?;
    write(&dir.join("metrics.csv"), &results_csv(&result.rows, cfg))?;
    Ok(dir)
}

pub fn benchmark(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    let dir = run_dir(out, "benchmark", cfg)?;
    let result = run_experiment(cfg)?;
    write_benchmark(&dir, &result, cfg)?;
    Ok(dir)
}

pub fn sparsity(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    let rows = sparsity_experiment(cfg)?;
    let dir = run_dir(out, "sparsity", cfg)?;
    write(&dir.join("sparsity.csv"), &sparsity_csv(&rows, cfg))?;
    Ok(dir)
}

pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    let rows = lambda_sweep(cfg)?;
    let dir = run_dir(out, "lambda-sweep", cfg)?;
    write(&dir.join("lambda_sweep.csv"), &sweep_csv(&rows, cfg))?;
    Ok(dir)
}
