//! Dense symmetric linear algebra for the Laplace baselines.
//!
//! Everything here is sized for parameter counts in the low hundreds: a
//! Cholesky factorization with an explicit pivot floor, cyclic Jacobi for the
//! symmetric eigenproblem, and the low-rank inverse quadratic form used by the
//! eigen-k precision approximation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pivots at or below this value abort the Cholesky factorization.
pub const PIVOT_FLOOR: f64 = 1e-12;

/// Retained eigenvalues at or below this value are rejected.
pub const EIGEN_FLOOR: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_OFF_TOL: f64 = 1e-12;

/// A dense symmetric `dim x dim` matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Builds a matrix from row-major entries, checking the symmetry tolerance.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("matrix dimension must be positive".into()));
        }
        if data.len() != dim * dim {
            return Err(Error::DimensionMismatch { what: "matrix entries", expected: dim * dim, found: data.len() });
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = data[i * dim + j];
                let b = data[j * dim + i];
                if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
                    return Err(Error::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self { dim, data })
    }

    /// Symmetrizes an arbitrary square matrix as `(A + A^T) / 2`.
    pub fn symmetrize(dim: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::DimensionMismatch { what: "matrix entries", expected: dim * dim, found: data.len() });
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let avg = 0.5 * (data[i * dim + j] + data[j * dim + i]);
                data[i * dim + j] = avg;
                data[j * dim + i] = avg;
            }
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = scale;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * diag.len() + i] = d;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Writes `value` into both `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.dim + j] = value;
        self.data[j * self.dim + i] = value;
    }

    pub fn add_to_diagonal(&mut self, value: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += value;
        }
    }

    /// Adds `scale * v v^T`.
    pub fn add_outer(&mut self, v: &[f64], scale: f64) {
        debug_assert_eq!(v.len(), self.dim);
        for i in 0..self.dim {
            let vi = scale * v[i];
            if vi == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.dim..(i + 1) * self.dim];
            for (r, &vj) in row.iter_mut().zip(v) {
                *r += vi * vj;
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Applies the same permutation to rows and columns: `out[i][j] = A[p[i]][p[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.dim;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[i * n + j] = self.get(perm[i], perm[j]);
            }
        }
        out
    }

    /// Writes the matrix as CSV with a `dim=K` header followed by `K` rows.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "dim={}", self.dim)?;
        for i in 0..self.dim {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Lower-triangular Cholesky factor `L` with `A = L L^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &SymMatrix) -> Result<Self> {
        let n = a.dim;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > PIVOT_FLOOR) {
                return Err(Error::NotPositiveDefinite { pivot: d, index: j });
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { dim: n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves `L y = b`.
    pub fn forward_substitute(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.lower[i * n + k] * y[k];
            }
            y[i] = s / self.lower[i * n + i];
        }
        y
    }

    /// Solves `L^T x = y`.
    pub fn back_substitute(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.lower[k * n + i] * x[k];
            }
            x[i] = s / self.lower[i * n + i];
        }
        x
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.back_substitute(&self.forward_substitute(b))
    }

    /// `b^T A^{-1} b`, computed as `|L^{-1} b|^2` so the result is never negative.
    pub fn inverse_quadform(&self, b: &[f64]) -> f64 {
        self.forward_substitute(b).iter().map(|v| v * v).sum()
    }
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(a: &SymMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.dim {
        return Err(Error::DimensionMismatch { what: "right-hand side", expected: a.dim, found: b.len() });
    }
    Ok(Cholesky::factor(a)?.solve(b))
}

/// Eigenpairs sorted by descending eigenvalue; `vectors[i]` pairs with `values[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

impl EigenPairs {
    /// Keeps the `k` leading pairs.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.values.len());
        Self { values: self.values[..k].to_vec(), vectors: self.vectors[..k].to_vec() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eigen(a: &SymMatrix) -> Result<EigenPairs> {
    let n = a.dim;
    let mut m = a.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.frobenius_norm().max(1.0);
    let off_norm = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&m) <= JACOBI_OFF_TOL * scale;
    let mut sweep = 0;
    while !converged && sweep < JACOBI_MAX_SWEEPS {
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        sweep += 1;
        converged = off_norm(&m) <= JACOBI_OFF_TOL * scale;
    }
    if !converged {
        return Err(Error::ConvergenceFailure { sweeps: sweep });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order.iter().map(|&c| (0..n).map(|r| v[r * n + c]).collect()).collect();
    Ok(EigenPairs { values, vectors })
}

/// `sum_i (v_i . g)^2 / lambda_i` over the retained eigenpairs.
pub fn low_rank_inverse_quadform(eigs: &EigenPairs, g: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (value, vector) in eigs.values.iter().zip(&eigs.vectors) {
        if *value <= EIGEN_FLOOR {
            return Err(Error::DegenerateEigenvalue { value: *value });
        }
        if vector.len() != g.len() {
            return Err(Error::DimensionMismatch { what: "eigenvector", expected: vector.len(), found: g.len() });
        }
        let proj = dot(vector, g);
        total += proj * proj / value;
    }
    Ok(total)
}

/// Number of eigenpairs kept by the eigen-k baseline: `ln K` rounded, at least one.
pub fn eigen_rank(param_count: usize) -> usize {
    ((param_count as f64).ln().round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
        let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = SymMatrix::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum();
                a.set(i, j, s);
            }
        }
        a.add_to_diagonal(0.1 * n as f64);
        a
    }

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
        let mut a = SymMatrix::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                a.set(i, j, rng.random_range(-2.0..2.0));
            }
        }
        a
    }

    #[test]
    fn solve_scalar_and_identity() {
        let a = SymMatrix::new(1, vec![2.0]).unwrap();
        assert!((solve_spd(&a, &[1.0]).unwrap()[0] - 0.5).abs() < 1e-15);
        let x = solve_spd(&SymMatrix::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn solve_two_by_two_matches_explicit_inverse() {
        let a = SymMatrix::new(2, vec![4.0, 1.0, 1.0, 3.0]).unwrap();
        let b = [1.0, 2.0];
        let det = 4.0 * 3.0 - 1.0;
        let expected = [(3.0 * b[0] - b[1]) / det, (-b[0] + 4.0 * b[1]) / det];
        let x = solve_spd(&a, &b).unwrap();
        for (xi, ei) in x.iter().zip(expected) {
            assert!((xi - ei).abs() < 1e-14);
        }
        let r = a.matvec(&x);
        assert!((r[0] - 1.0).abs() < 1e-12 && (r[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = SymMatrix::new(2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(solve_spd(&a, &[1.0, 1.0]), Err(Error::NotPositiveDefinite { index: 1, .. })));
        let tiny = SymMatrix::new(1, vec![1e-13]).unwrap();
        assert!(matches!(Cholesky::factor(&tiny), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn asymmetric_input_rejected() {
        assert!(matches!(SymMatrix::new(2, vec![1.0, 0.5, 0.4, 1.0]), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn solve_residual_bound_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..1000 {
            let n = 1 + case % 50;
            let a = random_spd(&mut rng, n);
            let before = a.clone();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let x = solve_spd(&a, &b).unwrap();
            let r = a.matvec(&x);
            let resid = r.iter().zip(&b).map(|(ri, bi)| (ri - bi).abs()).fold(0.0, f64::max);
            assert!(resid <= 1e-8 * (1.0 + norm_inf(&b)), "case {case}: {resid}");
            assert_eq!(a, before);
        }
    }

    #[test]
    fn eigen_diagonal_and_swap() {
        let e = sym_eigen(&SymMatrix::from_diagonal(&[1.0, 3.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert_eq!(e.vectors[0], vec![0.0, 1.0]);

        let e = sym_eigen(&SymMatrix::new(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-12);
        assert!((e.values[1] + 1.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = &e.vectors[0];
        assert!((v0[0].abs() - h).abs() < 1e-12 && (v0[0] - v0[1]).abs() < 1e-12);
        let v1 = &e.vectors[1];
        assert!((v1[0].abs() - h).abs() < 1e-12 && (v1[0] + v1[1]).abs() < 1e-12);
    }

    #[test]
    fn eigen_reconstruction_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1, 2, 5, 13, 30] {
            let a = random_sym(&mut rng, n);
            let e = sym_eigen(&a).unwrap();
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            let mut recon = vec![0.0; n * n];
            for (lam, v) in e.values.iter().zip(&e.vectors) {
                for i in 0..n {
                    for j in 0..n {
                        recon[i * n + j] += lam * v[i] * v[j];
                    }
                }
                let av = a.matvec(v);
                for i in 0..n {
                    assert!((av[i] - lam * v[i]).abs() <= 1e-7 * lam.abs().max(1.0));
                }
            }
            let err: f64 = recon.iter().zip(a.as_slice()).map(|(r, x)| (r - x) * (r - x)).sum::<f64>().sqrt();
            assert!(err <= 1e-7 * a.frobenius_norm());
            for i in 0..n {
                for j in 0..n {
                    let d = dot(&e.vectors[i], &e.vectors[j]);
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn low_rank_quadform_cases() {
        let p = SymMatrix::from_diagonal(&[4.0, 1.0]);
        let e = sym_eigen(&p).unwrap();
        let v = low_rank_inverse_quadform(&e.truncated(1), &[1.0, 1.0]).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        assert_eq!(low_rank_inverse_quadform(&e.truncated(1), &[0.0, 3.0]).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_spd(&mut rng, 12);
        let g: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = dot(&g, &solve_spd(&a, &g).unwrap());
        let full = low_rank_inverse_quadform(&sym_eigen(&a).unwrap(), &g).unwrap();
        assert!((full - exact).abs() <= 1e-6 * exact);
    }

    #[test]
    fn low_rank_rejects_degenerate() {
        let e = EigenPairs { values: vec![1e-13], vectors: vec![vec![1.0]] };
        assert!(matches!(low_rank_inverse_quadform(&e, &[1.0]), Err(Error::DegenerateEigenvalue { .. })));
    }

    #[test]
    fn eigen_rank_rule() {
        assert_eq!(eigen_rank(1), 1);
        assert_eq!(eigen_rank(2), 1);
        assert_eq!(eigen_rank(61), 4);
        assert_eq!(eigen_rank(151), 5);
        assert_eq!(eigen_rank(201), 5);
    }
}
