//! Laplace baselines: precision estimates at the MAP and delta-method variances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{eigen_rank, low_rank_inverse_quadform, sym_eigen, Cholesky, EigenPairs, SymMatrix};
use crate::net::{check_input, Model, ParamVector};
use crate::objective::{full_hessian, jacobian_row, Likelihood, LogJointSpec, DEFAULT_HESSIAN_CAP};

/// Jitter added to an indefinite exact precision starts here and doubles.
pub const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "k", rename_all = "snake_case")]
pub enum PrecisionKind {
    FullExact,
    FullGgn,
    DiagGgn,
    /// Top-k eigenpairs of the GGN; `None` uses `round(ln K)`.
    EigenK(Option<usize>),
}

#[derive(Debug, Clone)]
pub enum PrecisionPayload {
    Full { matrix: SymMatrix, factor: Cholesky },
    Diagonal(Vec<f64>),
    Eigen(EigenPairs),
}

/// A precision matrix (or structured approximation) at the MAP.
#[derive(Debug, Clone)]
pub struct PrecisionEstimate {
    pub kind: PrecisionKind,
    pub payload: PrecisionPayload,
    pub prior_precision: f64,
    /// Diagonal jitter that was needed to make the exact precision factorizable.
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionOptions {
    /// Repair an indefinite exact precision with doubling diagonal jitter.
    pub jitter_repair: bool,
    pub hessian_cap: usize,
}

impl Default for PrecisionOptions {
    fn default() -> Self {
        Self { jitter_repair: true, hessian_cap: DEFAULT_HESSIAN_CAP }
    }
}

fn softmax(f: &[f64]) -> Vec<f64> {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = f.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Observation precision `-d^2 log p(y | f) / df^2` for one example.
#[cfg(test)]
fn observation_precision(likelihood: Likelihood, f: &[f64]) -> Vec<Vec<f64>> {
    let c = f.len();
    match likelihood {
        Likelihood::Gaussian { obs_var } => {
            (0..c).map(|i| (0..c).map(|j| if i == j { 1.0 / obs_var } else { 0.0 }).collect()).collect()
        }
        Likelihood::Categorical => {
            let p = softmax(f);
            (0..c).map(|i| (0..c).map(|j| if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] }).collect()).collect()
        }
    }
}

/// `prior_precision * I + sum_i J_i^T Lambda_i J_i`.
pub fn ggn_matrix(model: &dyn Model, params: &ParamVector, spec: &LogJointSpec, data: &Dataset) -> Result<SymMatrix> {
    params.check(model)?;
    let prior_precision = spec.prior_precision().ok_or(Error::UnsupportedPrior)?;
    let k = model.param_count();
    let mut p = SymMatrix::scaled_identity(k, prior_precision);
    for x in data.inputs() {
        check_input(model, x)?;
        let f = model.forward(params.as_slice(), x);
        let rows: Vec<Vec<f64>> = (0..f.len()).map(|j| jacobian_row(model, params.as_slice(), x, j)).collect();
        match spec.likelihood {
            Likelihood::Gaussian { obs_var } => {
                for row in &rows {
                    p.add_outer(row, 1.0 / obs_var);
                }
            }
            Likelihood::Categorical => {
                // J^T (diag(p) - p p^T) J = sum_a p_a (J_a - m)(J_a - m)^T with m = sum_a p_a J_a.
                let probs = softmax(&f);
                let mean: Vec<f64> = (0..k).map(|t| rows.iter().zip(&probs).map(|(r, pa)| pa * r[t]).sum()).collect();
                for (row, pa) in rows.iter().zip(&probs) {
                    let centered: Vec<f64> = row.iter().zip(&mean).map(|(r, m)| r - m).collect();
                    p.add_outer(&centered, *pa);
                }
            }
        }
    }
    Ok(p)
}

fn most_negative_eigenvalue(m: &SymMatrix) -> f64 {
    sym_eigen(m).map(|e| *e.values.last().unwrap_or(&f64::NAN)).unwrap_or(f64::NAN)
}

/// Builds a precision estimate of the requested kind at `params`.
pub fn build_precision(
    model: &dyn Model,
    params: &ParamVector,
    spec: &LogJointSpec,
    data: &Dataset,
    kind: PrecisionKind,
    opts: PrecisionOptions,
) -> Result<PrecisionEstimate> {
    let prior_precision = spec.prior_precision().ok_or(Error::UnsupportedPrior)?;
    let base = spec.unregularized();
    match kind {
        PrecisionKind::FullExact => {
            let mut precision = full_hessian(model, params, &base, data, opts.hessian_cap)?;
            precision.scale(-1.0);
            let mut jitter = 0.0;
            let factor = loop {
                let mut trial = precision.clone();
                trial.add_to_diagonal(jitter);
                match Cholesky::factor(&trial) {
                    Ok(f) => {
                        precision = trial;
                        break f;
                    }
                    Err(_) if opts.jitter_repair && jitter < JITTER_MAX => {
                        jitter = if jitter == 0.0 { JITTER_START } else { jitter * 2.0 };
                    }
                    Err(_) => {
                        return Err(Error::IndefinitePrecision { min_eigenvalue: most_negative_eigenvalue(&precision) })
                    }
                }
            };
            Ok(PrecisionEstimate {
                kind,
                payload: PrecisionPayload::Full { matrix: precision, factor },
                prior_precision,
                jitter,
            })
        }
        PrecisionKind::FullGgn => {
            let matrix = ggn_matrix(model, params, &base, data)?;
            let factor = Cholesky::factor(&matrix)?;
            Ok(PrecisionEstimate {
                kind,
                payload: PrecisionPayload::Full { matrix, factor },
                prior_precision,
                jitter: 0.0,
            })
        }
        PrecisionKind::DiagGgn => {
            let diag = ggn_matrix(model, params, &base, data)?.diagonal();
            Ok(PrecisionEstimate { kind, payload: PrecisionPayload::Diagonal(diag), prior_precision, jitter: 0.0 })
        }
        PrecisionKind::EigenK(k) => {
            let matrix = ggn_matrix(model, params, &base, data)?;
            let k = k.unwrap_or_else(|| eigen_rank(matrix.dim())).clamp(1, matrix.dim());
            let pairs = sym_eigen(&matrix)?.truncated(k);
            if let Some(&v) = pairs.values.iter().find(|&&v| v <= crate::linalg::EIGEN_FLOOR) {
                return Err(Error::DegenerateEigenvalue { value: v });
            }
            Ok(PrecisionEstimate {
                kind: PrecisionKind::EigenK(Some(k)),
                payload: PrecisionPayload::Eigen(pairs),
                prior_precision,
                jitter: 0.0,
            })
        }
    }
}

impl PrecisionEstimate {
    pub fn dim(&self) -> usize {
        match &self.payload {
            PrecisionPayload::Full { matrix, .. } => matrix.dim(),
            PrecisionPayload::Diagonal(d) => d.len(),
            PrecisionPayload::Eigen(e) => e.vectors.first().map_or(0, Vec::len),
        }
    }

    /// Dense matrix, when the estimate stores one.
    pub fn matrix(&self) -> Option<&SymMatrix> {
        match &self.payload {
            PrecisionPayload::Full { matrix, .. } => Some(matrix),
            _ => None,
        }
    }

    /// `g^T P^{-1} g` under this estimate.
    pub fn delta_variance(&self, g: &[f64]) -> Result<f64> {
        if g.len() != self.dim() {
            return Err(Error::DimensionMismatch { what: "output gradient", expected: self.dim(), found: g.len() });
        }
        match &self.payload {
            PrecisionPayload::Full { factor, .. } => Ok(factor.inverse_quadform(g)),
            PrecisionPayload::Diagonal(d) => Ok(g.iter().zip(d).map(|(gi, pi)| gi * gi / pi).sum()),
            PrecisionPayload::Eigen(e) => low_rank_inverse_quadform(e, g),
        }
    }

    /// `diag(P^{-1})` for the dense kinds, `1 / P_ii` for the diagonal kind,
    /// and the low-rank inverse diagonal for eigen-k.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let k = self.dim();
        match &self.payload {
            PrecisionPayload::Full { factor, .. } => {
                let mut e = vec![0.0; k];
                (0..k)
                    .map(|i| {
                        e[i] = 1.0;
                        let v = factor.inverse_quadform(&e);
                        e[i] = 0.0;
                        v
                    })
                    .collect()
            }
            PrecisionPayload::Diagonal(d) => d.iter().map(|v| 1.0 / v).collect(),
            PrecisionPayload::Eigen(eig) => {
                (0..k).map(|i| eig.values.iter().zip(&eig.vectors).map(|(l, v)| v[i] * v[i] / l).sum()).collect()
            }
        }
    }

    /// Draws `theta_hat + L^{-T} z` for `z ~ N(0, I)`.
    pub fn posterior_sample(&self, map: &ParamVector, rng: &mut ChaCha8Rng) -> Result<ParamVector> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.posterior_sample_with(map, &z)
    }

    /// Posterior draw for a caller-supplied standard normal vector.
    pub fn posterior_sample_with(&self, map: &ParamVector, z: &[f64]) -> Result<ParamVector> {
        let factor = match &self.payload {
            PrecisionPayload::Full { factor, .. } => factor,
            _ => return Err(Error::InvalidArgument("posterior sampling needs a dense precision".into())),
        };
        if z.len() != map.len() || map.len() != factor.dim() {
            return Err(Error::DimensionMismatch { what: "posterior draw", expected: factor.dim(), found: z.len() });
        }
        let shift = factor.back_substitute(z);
        let values = map.as_slice().iter().zip(&shift).map(|(m, s)| m + s).collect();
        Ok(ParamVector::from_vec_unchecked(values))
    }

    /// CSV dump of the dense precision (row-major, `dim=K` header).
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let dense = match &self.payload {
            PrecisionPayload::Full { matrix, .. } => matrix.clone(),
            PrecisionPayload::Diagonal(d) => SymMatrix::from_diagonal(d),
            PrecisionPayload::Eigen(e) => {
                let k = self.dim();
                let mut m = SymMatrix::zeros(k);
                for (l, v) in e.values.iter().zip(&e.vectors) {
                    m.add_outer(v, *l);
                }
                m
            }
        };
        dense.write_csv(w).map_err(|e| Error::io("<precision csv>", e))
    }
}

/// Delta-method variance of output `output` at `x`.
pub fn predictive_variance(
    model: &dyn Model,
    map: &ParamVector,
    precision: &PrecisionEstimate,
    x: &[f64],
    output: usize,
) -> Result<f64> {
    let g = crate::net::grad_params(model, map, x, output)?;
    precision.delta_variance(&g)
}
