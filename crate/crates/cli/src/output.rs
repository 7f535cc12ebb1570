//! Flat CSV tables, JSON summaries and plot series.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::error::CliError;
use crate::experiment::{CellInfo, ExperimentOutput, ResultRow, Series, SparsityRow, SweepRow};

/// `<out>/<command>-<config hash>`, created if missing.
pub fn run_dir(out: &Path, command: &str, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = out.join(format!("{command}-{}", cfg.hash()));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

pub fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(regvar_core::Error::from)?;
    text.push('\n');
    write(path, &text)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Quotes a field if it would break the row.
fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn hyper_header() -> &'static str {
    "prior_var,lambda,hidden,activation,lr,adam_steps,polish_grad_tol,refit_grad_tol,eigen_k,param_l1_denominator,config_hash"
}

fn hyper_fields(cfg: &ExperimentConfig) -> String {
    let hidden: Vec<String> = cfg.hidden.iter().map(|h| h.to_string()).collect();
    let activation =
        serde_json::to_value(cfg.activation).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        cfg.prior_var,
        cfg.lambda,
        hidden.join("x"),
        activation,
        cfg.train.lr,
        cfg.train.adam_steps,
        cfg.train.polish_grad_tol,
        cfg.train.refit_grad_tol,
        opt(cfg.eigen_k),
        opt(cfg.param_l1_denominator),
        cfg.hash()
    )
}

pub fn results_csv(rows: &[ResultRow], cfg: &ExperimentConfig) -> String {
    let mut s = format!(
        "schema_version,method,dataset,split,nll,picp,crps,ece,rescale,seed,n_eval,status,obs_var,map_grad_norm,{}\n",
        hyper_header()
    );
    let hyper = hyper_fields(cfg);
    for r in rows {
        let m = r.report.as_ref();
        let _ = writeln!(
            s,
            "{SCHEMA_VERSION},{},{},{},{},{},{},{},{},{},{},{},{},{},{hyper}",
            r.method,
            r.dataset,
            r.split,
            opt(m.map(|m| m.nll)),
            opt(m.map(|m| m.picp)),
            opt(m.map(|m| m.crps)),
            opt(m.and_then(|m| m.ece)),
            opt(m.map(|m| m.rescale)),
            r.seed,
            opt(m.map(|m| m.n_eval)),
            field(&r.status),
            opt(r.obs_var),
            opt(r.map_grad_norm),
        );
    }
    s
}

pub fn sparsity_csv(rows: &[SparsityRow], cfg: &ExperimentConfig) -> String {
    let mut s = format!(
        "schema_version,method,dataset,split,seed,z,zeroed,param_count,mean_abs_error,status,obs_var,{}\n",
        hyper_header()
    );
    let hyper = hyper_fields(cfg);
    for r in rows {
        let _ = writeln!(
            s,
            "{SCHEMA_VERSION},{},{},{},{},{},{},{},{},{},{},{hyper}",
            r.method,
            r.dataset,
            r.split,
            r.seed,
            if r.z.is_nan() { String::new() } else { r.z.to_string() },
            r.zeroed,
            r.param_count,
            opt(r.mean_abs_error),
            field(&r.status),
            opt(r.obs_var),
        );
    }
    s
}

pub fn sweep_csv(rows: &[SweepRow], cfg: &ExperimentConfig) -> String {
    let mut s = format!(
        "schema_version,method,dataset,seed,lambda,rescale,selected,split,nll,status,obs_var,{}\n",
        hyper_header()
    );
    let hyper = hyper_fields(cfg);
    for r in rows {
        let _ = writeln!(
            s,
            "{SCHEMA_VERSION},{},{},{},{},{},{},{},{},{},{},{hyper}",
            r.method,
            r.dataset,
            r.seed,
            r.lambda,
            if r.rescale.is_nan() { String::new() } else { r.rescale.to_string() },
            r.selected,
            r.split,
            opt(r.nll),
            field(&r.status),
            opt(r.obs_var),
        );
    }
    s
}

pub fn series_csv(series: &Series) -> String {
    let mut s = String::from("x,y,lo,hi\n");
    for [x, y, lo, hi] in &series.rows {
        let _ = writeln!(s, "{x},{y},{lo},{hi}");
    }
    s
}

pub fn selection_csv(cell: &CellInfo) -> String {
    let mut s = String::from("x,y,selected\n");
    for p in &cell.selection {
        let _ = writeln!(s, "{},{},{}", p.obs_var, opt(p.val_nll), p.selected);
    }
    s
}

#[derive(Debug, Serialize)]
struct Aggregate {
    method: String,
    dataset: String,
    split: String,
    seeds: usize,
    failures: usize,
    mean_nll: Option<f64>,
    mean_picp: Option<f64>,
    min_picp: Option<f64>,
    max_picp: Option<f64>,
    mean_crps: Option<f64>,
    mean_rescale: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    schema_version: u32,
    config_hash: String,
    config: &'a ExperimentConfig,
    cells: &'a [CellInfo],
    aggregates: Vec<Aggregate>,
}

fn aggregates(rows: &[ResultRow]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method.to_string(), r.dataset.clone(), r.split.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, dataset, split), rs)| {
            let ok: Vec<_> = rs.iter().filter_map(|r| r.report.as_ref()).collect();
            let mean = |f: &dyn Fn(&regvar_core::MetricReport) -> f64| {
                (!ok.is_empty()).then(|| ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64)
            };
            let picps = ok.iter().map(|m| m.picp);
            Aggregate {
                method,
                dataset,
                split,
                seeds: rs.len(),
                failures: rs.len() - ok.len(),
                mean_nll: mean(&|m| m.nll),
                mean_picp: mean(&|m| m.picp),
                min_picp: picps.clone().reduce(f64::min),
                max_picp: picps.reduce(f64::max),
                mean_crps: mean(&|m| m.crps),
                mean_rescale: mean(&|m| m.rescale),
            }
        })
        .collect()
}

/// Writes `results.csv`, `summary.json` and, when enabled, the plot series.
pub fn write_benchmark(dir: &Path, out: &ExperimentOutput, cfg: &ExperimentConfig) -> Result<(), CliError> {
    write(&dir.join("results.csv"), &results_csv(&out.rows, cfg))?;
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        config: cfg,
        cells: &out.cells,
        aggregates: aggregates(&out.rows),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    if cfg.series {
        let series = dir.join("series");
        for s in &out.series {
            write(&series.join(format!("{}.csv", s.name)), &series_csv(s))?;
        }
        for c in &out.cells {
            write(&series.join(format!("obs_var_{}_seed{}.csv", c.dataset, c.seed)), &selection_csv(c))?;
        }
    }
    Ok(())
}
