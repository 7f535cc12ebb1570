//! Differentiable models with a flat parameter vector.
//!
//! [`Model`] is the interface the objective, optimizers and estimators work
//! against: a forward pass and a reverse pass that accumulates `J^T c` for a
//! caller-chosen output cotangent `c`. Two models implement it: the
//! feed-forward [`MlpArch`] and the linear-in-parameters [`LinearModel`]
//! used for closed-form checks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

/// A model `f_theta(x)` with `param_count` parameters.
///
/// The trait methods assume correctly sized slices; the free functions in
/// this module validate shapes before calling them.
pub trait Model: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn param_count(&self) -> usize;

    fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64>;

    /// Runs the forward pass, asks `cotangent(outputs, c)` for the output
    /// cotangent and adds `J(x)^T c` into `grad`.
    fn backprop(&self, params: &[f64], x: &[f64], cotangent: &mut dyn FnMut(&[f64], &mut [f64]), grad: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation value `a = act(z)`.
    #[inline]
    fn derivative_from_value(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected network: hidden layers use `activation`, the output layer is linear.
///
/// Parameters are laid out layer by layer, each layer as its `fan_out x fan_in`
/// weight matrix (row-major) followed by its `fan_out` biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpArch {
    pub fn new(input_dim: usize, hidden_sizes: Vec<usize>, output_dim: usize, activation: Activation) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(Self { input_dim, hidden_sizes, output_dim, activation })
    }

    /// `(fan_in, fan_out)` of each layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_sizes.len() + 2);
        widths.push(self.input_dim);
        widths.extend(&self.hidden_sizes);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = stream_rng(seed, streams::INIT);
        let mut values = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_shapes() {
            let std = (1.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let z: f64 = rng.sample(StandardNormal);
                values.push(std * z);
            }
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector { values }
    }

    fn forward_cached(&self, params: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let shapes = self.layer_shapes();
        let last = shapes.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(shapes.len() + 1);
        acts.push(x.to_vec());
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let weights = &params[offset..offset + fan_in * fan_out];
            let biases = &params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            offset += (fan_in + 1) * fan_out;
            let input = &acts[l];
            let out: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    let z = biases[o] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
                    if l == last {
                        z
                    } else {
                        self.activation.apply(z)
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }
}

impl Model for MlpArch {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        self.forward_cached(params, x).pop().expect("at least one layer")
    }

    fn backprop(&self, params: &[f64], x: &[f64], cotangent: &mut dyn FnMut(&[f64], &mut [f64]), grad: &mut [f64]) {
        let acts = self.forward_cached(params, x);
        let shapes = self.layer_shapes();
        let mut delta = vec![0.0; self.output_dim];
        cotangent(acts.last().expect("output layer"), &mut delta);

        let mut offset: usize = shapes.iter().map(|(i, o)| (i + 1) * o).sum();
        for l in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[l];
            offset -= (fan_in + 1) * fan_out;
            let input = &acts[l];
            let (gw, gb) = grad[offset..offset + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, a) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l == 0 {
                break;
            }
            let weights = &params[offset..offset + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, w) in prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                    *p += w * d;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= self.activation.derivative_from_value(*a);
            }
            delta = prev;
        }
    }
}

/// Scalar linear model `f(x) = theta . x (+ theta_d)`; exact for Bayesian linear regression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearModel {
    pub input_dim: usize,
    pub bias: bool,
}

impl LinearModel {
    pub fn new(input_dim: usize, bias: bool) -> Self {
        Self { input_dim, bias }
    }

    /// Feature vector `phi(x)` such that `f(x) = theta . phi(x)`.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut phi = x.to_vec();
        if self.bias {
            phi.push(1.0);
        }
        phi
    }
}

impl Model for LinearModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn param_count(&self) -> usize {
        self.input_dim + usize::from(self.bias)
    }

    fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut f: f64 = params.iter().zip(x).map(|(p, v)| p * v).sum();
        if self.bias {
            f += params[self.input_dim];
        }
        vec![f]
    }

    fn backprop(&self, params: &[f64], x: &[f64], cotangent: &mut dyn FnMut(&[f64], &mut [f64]), grad: &mut [f64]) {
        let out = self.forward(params, x);
        let mut c = [0.0];
        cotangent(&out, &mut c);
        for (g, v) in grad.iter_mut().zip(x) {
            *g += c[0] * v;
        }
        if self.bias {
            grad[self.input_dim] += c[0];
        }
    }
}

/// A flat parameter vector, validated against a model when constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(model: &dyn Model, values: Vec<f64>) -> Result<Self> {
        if values.len() != model.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: model.param_count(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteResult("parameter vector"));
        }
        Ok(Self { values })
    }

    /// Wraps values without a model check; callers guarantee the length.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(model: &dyn Model) -> Self {
        Self { values: vec![0.0; model.param_count()] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Checks the vector still fits `model`.
    pub fn check(&self, model: &dyn Model) -> Result<()> {
        if self.values.len() != model.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: model.param_count(),
                found: self.values.len(),
            });
        }
        Ok(())
    }
}

pub(crate) fn check_input(model: &dyn Model, x: &[f64]) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch { what: "model input", expected: model.input_dim(), found: x.len() });
    }
    Ok(())
}

/// `f_theta(x)`.
pub fn forward(model: &dyn Model, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    params.check(model)?;
    check_input(model, x)?;
    let out = model.forward(params.as_slice(), x);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteResult("forward pass"));
    }
    Ok(out)
}

/// Gradient of output `output` with respect to every parameter.
pub fn grad_params(model: &dyn Model, params: &ParamVector, x: &[f64], output: usize) -> Result<Vec<f64>> {
    params.check(model)?;
    check_input(model, x)?;
    if output >= model.output_dim() {
        return Err(Error::DimensionMismatch { what: "output index", expected: model.output_dim(), found: output });
    }
    Ok(output_gradient(model, params.as_slice(), x, output))
}

pub(crate) fn output_gradient(model: &dyn Model, params: &[f64], x: &[f64], output: usize) -> Vec<f64> {
    let mut grad = vec![0.0; model.param_count()];
    model.backprop(
        params,
        x,
        &mut |_, c| {
            c.fill(0.0);
            c[output] = 1.0;
        },
        &mut grad,
    );
    grad
}

/// Jacobian rows, one reverse pass per output.
pub fn jacobian(model: &dyn Model, params: &ParamVector, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    params.check(model)?;
    check_input(model, x)?;
    Ok((0..model.output_dim()).map(|j| output_gradient(model, params.as_slice(), x, j)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_difference(model: &dyn Model, params: &[f64], x: &[f64], j: usize) -> Vec<f64> {
        (0..params.len())
            .map(|i| {
                let h = 1e-5 * (1.0 + params[i].abs());
                let mut p = params.to_vec();
                p[i] += h;
                let up = model.forward(&p, x)[j];
                p[i] -= 2.0 * h;
                let down = model.forward(&p, x)[j];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn param_count_layout() {
        let arch = MlpArch::new(1, vec![20], 1, Activation::Tanh).unwrap();
        assert_eq!(arch.param_count(), 61);
        let arch = MlpArch::new(1, vec![50], 1, Activation::Tanh).unwrap();
        assert_eq!(arch.param_count(), 151);
        let arch = MlpArch::new(3, vec![4, 5], 2, Activation::Tanh).unwrap();
        assert_eq!(arch.param_count(), 4 * 4 + 5 * 5 + 6 * 2);
        assert!(MlpArch::new(1, vec![0], 1, Activation::Tanh).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let arch = MlpArch::new(2, vec![7, 3], 2, Activation::Tanh).unwrap();
        let p = ParamVector::zeros(&arch);
        assert_eq!(forward(&arch, &p, &[0.3, -1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer_is_linear() {
        let arch = MlpArch::new(1, vec![], 1, Activation::Identity).unwrap();
        let p = ParamVector::new(&arch, vec![0.7, 0.0]).unwrap();
        assert!((forward(&arch, &p, &[3.0]).unwrap()[0] - 2.1).abs() < 1e-15);

        let lin = LinearModel::new(1, false);
        let p = ParamVector::new(&lin, vec![0.25]).unwrap();
        assert_eq!(grad_params(&lin, &p, &[3.0], 0).unwrap(), vec![3.0]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let arch = MlpArch::new(1, vec![50], 1, Activation::Tanh).unwrap();
        let p = arch.init_params(3);
        let a = forward(&arch, &p, &[0.4]).unwrap();
        let b = forward(&arch, &p, &[0.4]).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let arch = MlpArch::new(2, vec![6, 4], 2, Activation::Tanh).unwrap();
        for seed in 0..5 {
            let p = arch.init_params(seed);
            let x = [0.3 * seed as f64 - 0.5, 1.1];
            for j in 0..2 {
                let g = grad_params(&arch, &p, &x, j).unwrap();
                let fd = central_difference(&arch, p.as_slice(), &x, j);
                for (a, b) in g.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3));
                }
            }
        }
    }

    #[test]
    fn zero_input_kills_first_layer_weight_gradient() {
        let arch = MlpArch::new(1, vec![5], 1, Activation::Tanh).unwrap();
        let p = arch.init_params(1);
        let g = grad_params(&arch, &p, &[0.0], 0).unwrap();
        assert!(g[..5].iter().all(|&v| v == 0.0));
        assert!(g[5..10].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn shape_errors() {
        let arch = MlpArch::new(2, vec![3], 1, Activation::Tanh).unwrap();
        let p = arch.init_params(0);
        assert!(matches!(forward(&arch, &p, &[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(grad_params(&arch, &p, &[1.0, 2.0], 1), Err(Error::DimensionMismatch { .. })));
        assert!(ParamVector::new(&arch, vec![0.0; 3]).is_err());
        assert!(ParamVector::new(&arch, vec![f64::NAN; arch.param_count()]).is_err());
    }

    #[test]
    fn init_scales_with_fan_in() {
        let arch = MlpArch::new(400, vec![300], 1, Activation::Tanh).unwrap();
        let p = arch.init_params(0);
        let w = &p.as_slice()[..400 * 300];
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var * 400.0 - 1.0).abs() < 0.02);
        assert!(p.as_slice()[400 * 300..400 * 300 + 300].iter().all(|&b| b == 0.0));
    }
}
