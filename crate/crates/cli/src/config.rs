use std::fmt;
use std::path::Path;
use std::str::FromStr;

use regvar_core::{Activation, MlpArch, SyntheticTask};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Bumped whenever a column is added to or removed from an output table.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Map,
    FullHessian,
    Ggn,
    DiagGgn,
    EigenK,
    RegvarPointwise,
    RegvarAmortized,
    RegvarInSample,
    RegvarParam,
}

impl MethodName {
    pub const ALL: [MethodName; 9] = [
        MethodName::Map,
        MethodName::FullHessian,
        MethodName::Ggn,
        MethodName::DiagGgn,
        MethodName::EigenK,
        MethodName::RegvarPointwise,
        MethodName::RegvarAmortized,
        MethodName::RegvarInSample,
        MethodName::RegvarParam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Map => "map",
            MethodName::FullHessian => "full-hessian",
            MethodName::Ggn => "ggn",
            MethodName::DiagGgn => "diag-ggn",
            MethodName::EigenK => "eigen-k",
            MethodName::RegvarPointwise => "regvar-pointwise",
            MethodName::RegvarAmortized => "regvar-amortized",
            MethodName::RegvarInSample => "regvar-in-sample",
            MethodName::RegvarParam => "regvar-param",
        }
    }

    pub fn is_regvar(self) -> bool {
        matches!(
            self,
            MethodName::RegvarPointwise
                | MethodName::RegvarAmortized
                | MethodName::RegvarInSample
                | MethodName::RegvarParam
        )
    }

    /// Methods that yield a per-parameter variance for sparsification.
    pub fn has_param_variance(self) -> bool {
        matches!(self, MethodName::FullHessian | MethodName::Ggn | MethodName::DiagGgn | MethodName::RegvarParam)
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodName {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let m = match norm.as_str() {
            "map" => MethodName::Map,
            "full-hessian" | "fullhessian" | "full-exact" => MethodName::FullHessian,
            "ggn" | "full-ggn" => MethodName::Ggn,
            "diag-ggn" | "diagonal" => MethodName::DiagGgn,
            "eigen-k" | "eigen" => MethodName::EigenK,
            "regvar-pointwise" | "pointwise" => MethodName::RegvarPointwise,
            "regvar-amortized" | "regvar" | "amortized" => MethodName::RegvarAmortized,
            "regvar-in-sample" | "in-sample" => MethodName::RegvarInSample,
            "regvar-param" | "param" => MethodName::RegvarParam,
            _ => return Err(CliError::Config(format!("unknown method `{s}`"))),
        };
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Full-batch Adam steps before the L-BFGS polish.
    pub adam_steps: usize,
    /// Adam stops early when its update infinity-norm falls to this.
    pub adam_tol: f64,
    /// Gradient infinity-norm the selected MAP is polished to.
    pub polish_grad_tol: f64,
    pub polish_max_steps: usize,
    /// Gradient tolerance and step cap of every warm-started refit.
    pub refit_grad_tol: f64,
    pub refit_max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            adam_steps: 4000,
            adam_tol: 1e-7,
            polish_grad_tol: 1e-10,
            polish_max_steps: 100_000,
            refit_grad_tol: 1e-9,
            refit_max_steps: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub datasets: Vec<SyntheticTask>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
    pub prior_var: f64,
    pub obs_var_grid: Vec<f64>,
    pub methods: Vec<MethodName>,
    pub lambda: f64,
    pub seeds: Vec<u64>,
    /// Rank of the eigen approximation; `None` uses `round(ln K)`.
    pub eigen_k: Option<usize>,
    /// Denominator of the parameter L1 regularizer; `None` uses `n * K`.
    pub param_l1_denominator: Option<f64>,
    pub sparsity_z: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    /// Emit plot series alongside the benchmark tables.
    pub series: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            datasets: SyntheticTask::ALL.to_vec(),
            hidden: vec![50],
            activation: Activation::Tanh,
            train: TrainConfig::default(),
            prior_var: 3.0,
            obs_var_grid: vec![0.005, 0.01, 0.05, 0.1, 0.5, 1.0],
            methods: vec![
                MethodName::Map,
                MethodName::FullHessian,
                MethodName::Ggn,
                MethodName::EigenK,
                MethodName::RegvarAmortized,
            ],
            lambda: 1e-3,
            seeds: vec![0, 1, 2],
            eigen_k: None,
            param_l1_denominator: None,
            sparsity_z: vec![1.0],
            lambda_grid: vec![1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4],
            series: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn arch(&self) -> MlpArch {
        MlpArch::new(1, self.hidden.clone(), 1, self.activation).expect("validated widths")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.datasets.is_empty() || self.seeds.is_empty() || self.methods.is_empty() {
            return bad("datasets, seeds and methods must be non-empty");
        }
        if self.obs_var_grid.is_empty() || self.obs_var_grid.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return bad("obs_var_grid must be a non-empty list of positive values");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.prior_var > 0.0) || !self.prior_var.is_finite() {
            return bad("prior_var must be positive");
        }
        let lambda_ok = |l: f64| l != 0.0 && l.is_finite() && l.abs() <= 0.1;
        if !lambda_ok(self.lambda) {
            return bad("lambda must be nonzero with |lambda| <= 0.1");
        }
        if self.lambda_grid.is_empty() || !self.lambda_grid.iter().all(|l| lambda_ok(*l)) {
            return bad("lambda_grid must be non-empty with every |lambda| in (0, 0.1]");
        }
        if self.sparsity_z.is_empty() || self.sparsity_z.iter().any(|z| !(*z > 0.0)) {
            return bad("sparsity_z must be a non-empty list of positive values");
        }
        if self.eigen_k == Some(0) {
            return bad("eigen_k must be at least 1");
        }
        if matches!(self.param_l1_denominator, Some(d) if !(d > 0.0)) {
            return bad("param_l1_denominator must be positive");
        }
        let t = &self.train;
        if !(t.lr > 0.0) || t.adam_steps == 0 || t.polish_max_steps == 0 || t.refit_max_steps == 0 {
            return bad("train.lr and step counts must be positive");
        }
        if !(t.adam_tol >= 0.0) || !(t.polish_grad_tol > 0.0) || !(t.refit_grad_tol > 0.0) {
            return bad("train tolerances must be positive");
        }
        Ok(())
    }

    /// Stable hex digest of the resolved configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
    }
}
