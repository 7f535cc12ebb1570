//! Posterior predictives and evaluation metrics.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

/// Two-sided 95% normal quantile.
pub const Z_975: f64 = 1.959964;
pub const ECE_BINS: usize = 10;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Gaussian predictive for one scalar output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveGaussian {
    pub mean: f64,
    pub epistemic_var: f64,
    pub obs_var: f64,
    pub rescale: f64,
}

impl PredictiveGaussian {
    pub fn new(mean: f64, epistemic_var: f64, obs_var: f64) -> Result<Self> {
        if !mean.is_finite() || !(epistemic_var >= 0.0) || !(obs_var >= 0.0) {
            return Err(Error::InvalidArgument("predictive needs a finite mean and nonnegative variances".into()));
        }
        Ok(Self { mean, epistemic_var, obs_var, rescale: 1.0 })
    }

    pub fn with_rescale(self, rescale: f64) -> Self {
        Self { rescale, ..self }
    }

    pub fn total_var(&self) -> f64 {
        self.rescale * self.epistemic_var + self.obs_var
    }

    pub fn sd(&self) -> f64 {
        self.total_var().sqrt()
    }

    /// Central interval `mean +- z * sd`.
    pub fn interval(&self, z: f64) -> (f64, f64) {
        let h = z * self.sd();
        (self.mean - h, self.mean + h)
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { what: "observations", expected: a, found: b });
    }
    if a == 0 {
        return Err(Error::InvalidArgument("no evaluation points".into()));
    }
    Ok(())
}

/// Summed negative log density of `ys` under the predictives.
pub fn nll(preds: &[PredictiveGaussian], ys: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), ys.len())?;
    let mut total = 0.0;
    for (i, (p, y)) in preds.iter().zip(ys).enumerate() {
        let v = p.total_var();
        if !(v > 0.0) {
            return Err(Error::ZeroVariance { index: i });
        }
        let r = y - p.mean;
        total += 0.5 * (LN_2PI + v.ln() + r * r / v);
    }
    Ok(total)
}

/// Summed negative log probability of the observed labels.
pub fn nll_classification(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    let mut total = 0.0;
    for (p, &l) in probs.iter().zip(labels) {
        let pl = *p.get(l).ok_or_else(|| Error::InvalidArgument("label out of range".into()))?;
        total -= pl.ln();
    }
    Ok(total)
}

/// Fraction of observations inside the central 95% interval.
pub fn picp(preds: &[PredictiveGaussian], ys: &[f64]) -> Result<f64> {
    picp_with_z(preds, ys, Z_975)
}

pub fn picp_with_z(preds: &[PredictiveGaussian], ys: &[f64], z: f64) -> Result<f64> {
    check_lengths(preds.len(), ys.len())?;
    let inside = preds
        .iter()
        .zip(ys)
        .filter(|(p, y)| {
            let (lo, hi) = p.interval(z);
            lo <= **y && **y <= hi
        })
        .count();
    Ok(inside as f64 / ys.len() as f64)
}

/// Closed-form CRPS of `N(mu, sigma^2)` at `y`; `|y - mu|` when `sigma` is 0.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> f64 {
    if sigma <= 0.0 {
        return (y - mu).abs();
    }
    let z = (y - mu) / sigma;
    sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - INV_SQRT_PI)
}

/// Mean CRPS.
pub fn crps(preds: &[PredictiveGaussian], ys: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), ys.len())?;
    let sum: f64 = preds.iter().zip(ys).map(|(p, y)| crps_gaussian(p.mean, p.sd(), *y)).sum();
    Ok(sum / ys.len() as f64)
}

/// Expected calibration error with `bins` equal-width bins of the max
/// probability over `[1/C, 1]`.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    if bins == 0 {
        return Err(Error::InvalidArgument("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    for (p, &l) in probs.iter().zip(labels) {
        if p.is_empty() {
            return Err(Error::InvalidArgument("empty probability vector".into()));
        }
        let (arg, &top) =
            p.iter().enumerate().fold((0, &p[0]), |best, (i, v)| if *v > *best.1 { (i, v) } else { best });
        let floor = 1.0 / p.len() as f64;
        let width = (1.0 - floor) / bins as f64;
        let b = if width > 0.0 { (((top - floor) / width).floor().max(0.0) as usize).min(bins - 1) } else { 0 };
        count[b] += 1;
        conf[b] += top;
        if arg == l {
            correct[b] += 1;
        }
    }
    let n = probs.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (correct[b] as f64 / c - conf[b] / c).abs()
        })
        .sum())
}

/// Bootstrap standard error of [`ece`].
pub fn ece_bootstrap_se(probs: &[Vec<f64>], labels: &[usize], bins: usize, resamples: usize, seed: u64) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    let n = probs.len();
    let mut rng = stream_rng(seed, streams::BOOTSTRAP);
    let mut values = Vec::with_capacity(resamples);
    let mut p = Vec::with_capacity(n);
    let mut l = Vec::with_capacity(n);
    for _ in 0..resamples {
        p.clear();
        l.clear();
        for _ in 0..n {
            let i = rng.random_range(0..n);
            p.push(probs[i].clone());
            l.push(labels[i]);
        }
        values.push(ece(&p, &l, bins)?);
    }
    let mean = values.iter().sum::<f64>() / resamples as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (resamples.max(2) - 1) as f64;
    Ok(var.sqrt())
}

/// `1 / sqrt(1 + pi * var / 8)`.
pub fn probit_kappa(var: f64) -> f64 {
    1.0 / (1.0 + std::f64::consts::PI * var / 8.0).sqrt()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Softmax of probit-shrunk logits.
pub fn probit_adjust(logits: &[f64], vars: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != vars.len() {
        return Err(Error::DimensionMismatch { what: "logit variances", expected: logits.len(), found: vars.len() });
    }
    if vars.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("variances must be nonnegative".into()));
    }
    let shrunk: Vec<f64> = logits.iter().zip(vars).map(|(f, v)| f * probit_kappa(*v)).collect();
    Ok(softmax(&shrunk))
}

/// `10^k` for `k = -3, -2.75, ..., 3`.
pub fn rescale_grid() -> Vec<f64> {
    (-12..=12).map(|i| 10f64.powf(i as f64 * 0.25)).collect()
}

/// Grid value minimizing validation NLL; ties go to the smallest value.
pub fn tune_rescale(preds: &[PredictiveGaussian], ys: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), ys.len())?;
    let mut best = (f64::INFINITY, f64::NAN);
    for r in rescale_grid() {
        let scaled: Vec<PredictiveGaussian> = preds.iter().map(|p| p.with_rescale(r)).collect();
        let v = nll(&scaled, ys)?;
        if v < best.0 {
            best = (v, r);
        }
    }
    Ok(best.1)
}

/// Metrics for one (method, dataset, split, seed). `ece` is empty for regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub dataset: String,
    pub split: String,
    pub nll: f64,
    pub picp: f64,
    pub crps: f64,
    pub ece: Option<f64>,
    pub rescale: f64,
    pub seed: u64,
    pub n_eval: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "method,dataset,split,nll,picp,crps,ece,rescale,seed";

    pub fn regression(
        method: &str,
        dataset: &str,
        split: &str,
        seed: u64,
        preds: &[PredictiveGaussian],
        ys: &[f64],
    ) -> Result<Self> {
        Ok(Self {
            method: method.into(),
            dataset: dataset.into(),
            split: split.into(),
            nll: nll(preds, ys)?,
            picp: picp(preds, ys)?,
            crps: crps(preds, ys)?,
            ece: None,
            rescale: preds.first().map_or(1.0, |p| p.rescale),
            seed,
            n_eval: ys.len(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method,
            self.dataset,
            self.split,
            self.nll,
            self.picp,
            self.crps,
            self.ece.map(|e| e.to_string()).unwrap_or_default(),
            self.rescale,
            self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mean: f64, var: f64) -> PredictiveGaussian {
        PredictiveGaussian::new(mean, var, 0.0).unwrap()
    }

    #[test]
    fn nll_standard_normal_at_mode() {
        let v = nll(&[g(0.0, 1.0)], &[0.0]).unwrap();
        assert!((v - 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn nll_two_points_by_hand() {
        let preds = [PredictiveGaussian::new(1.0, 0.5, 0.25).unwrap(), g(-2.0, 4.0)];
        let ys = [1.5, 0.0];
        let density =
            |y: f64, m: f64, v: f64| (-(y - m) * (y - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let expected = -(density(1.5, 1.0, 0.75).ln() + density(0.0, -2.0, 4.0).ln());
        assert!((nll(&preds, &ys).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn nll_zero_variance_errors() {
        assert!(matches!(nll(&[g(0.0, 0.0)], &[0.0]), Err(Error::ZeroVariance { index: 0 })));
    }

    #[test]
    fn classification_nll_certain() {
        assert_eq!(nll_classification(&[vec![0.0, 1.0], vec![1.0, 0.0]], &[1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn picp_limits() {
        let ys = [1.0, 2.0, 3.0];
        let wide: Vec<_> = ys.iter().map(|_| g(0.0, 1e300)).collect();
        assert_eq!(picp(&wide, &ys).unwrap(), 1.0);
        let narrow: Vec<_> = ys.iter().map(|_| PredictiveGaussian::new(0.0, 0.0, 1e-300).unwrap()).collect();
        assert_eq!(picp(&narrow, &ys).unwrap(), 0.0);
    }

    #[test]
    fn crps_reference_values() {
        assert_eq!(crps_gaussian(1.0, 0.0, 1.0), 0.0);
        let c = crps_gaussian(0.0, 1.0, 0.0);
        assert!((c - (2.0 * normal_pdf(0.0) - INV_SQRT_PI)).abs() < 1e-15);
        assert!((c - 0.233_694_977_6).abs() < 1e-9);
        let a = crps_gaussian(0.3, 1.0, 1.0);
        let b = crps_gaussian(0.6, 2.0, 2.0);
        assert!((b - 2.0 * a).abs() < 1e-14);
    }

    #[test]
    fn ece_cases() {
        assert_eq!(ece(&[vec![0.0, 1.0], vec![1.0, 0.0]], &[1, 0], 10).unwrap(), 0.0);
        let single = ece(&[vec![0.7, 0.3]], &[0], 10).unwrap();
        assert!((single - 0.3).abs() < 1e-15);
        let probs = vec![vec![0.8, 0.2]; 4];
        let a = ece(&probs, &[0, 0, 1, 0], 10).unwrap();
        let b = ece(&probs, &[1, 0, 0, 0], 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ece_bootstrap_is_seeded() {
        let probs: Vec<Vec<f64>> = (0..50).map(|i| vec![0.5 + i as f64 / 120.0, 0.5 - i as f64 / 120.0]).collect();
        let labels: Vec<usize> = (0..50).map(|i| i % 3 % 2).collect();
        let a = ece_bootstrap_se(&probs, &labels, 10, 200, 4).unwrap();
        let b = ece_bootstrap_se(&probs, &labels, 10, 200, 4).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
    }

    #[test]
    fn probit_values() {
        assert_eq!(probit_kappa(0.0), 1.0);
        assert!((probit_kappa(8.0 / std::f64::consts::PI) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let p = probit_adjust(&[10.0, -3.0, 0.5], &[1e12; 3]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-4);
        }
        let plain = probit_adjust(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(plain, softmax(&[1.0, 2.0]));
    }

    #[test]
    fn rescale_grid_shape() {
        let grid = rescale_grid();
        assert_eq!(grid.len(), 25);
        assert!((grid[0] - 1e-3).abs() < 1e-18);
        assert!((grid[12] - 1.0).abs() < 1e-15);
        assert!((grid[24] - 1e3).abs() < 1e-9);
    }

    #[test]
    fn rescale_ties_pick_smallest() {
        let preds = vec![PredictiveGaussian::new(0.0, 0.0, 1.0).unwrap(); 3];
        assert_eq!(tune_rescale(&preds, &[0.1, -0.2, 0.3]).unwrap(), 1e-3);
    }

    #[test]
    fn csv_row_layout() {
        let r = MetricReport::regression("map", "quadratic-uniform", "test_id", 2, &[g(0.0, 1.0)], &[0.0]).unwrap();
        let row = r.csv_row();
        assert!(row.starts_with("map,quadratic-uniform,test_id,0.9189"));
        assert_eq!(row.split(',').count(), MetricReport::CSV_HEADER.split(',').count());
    }
}
