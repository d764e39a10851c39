//! Differentiable building blocks with hand-written gradients.
//!
//! Batches are row-major `Array2<f64>` with one sample per row. Every layer
//! exposes its parameters as flat slices in a fixed order (weight, then bias)
//! so the optimizer and the gradient checker can treat a whole model as a
//! list of tensors.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// LeakyReLU negative-side slope used throughout the task network.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.02;

/// Train mode enables dropout; eval mode is fully deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer computing `W·x + b`, with `W` stored as `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameter gradients of a [`DenseLayer`], same shapes as the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim);
        if in_dim + out_dim > 0 {
            let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| rng.random_range(-limit..=limit));
        }
        layer
    }

    pub fn from_parts(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::dim(format!(
                "weight has {} rows but bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Batch forward: each row `x_i` maps to `W·x_i + b`.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::dim(format!(
                "dense layer expects width {}, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        let mut out = x.dot(&self.weight.t());
        out += &self.bias;
        Ok(out)
    }

    pub fn forward_vec(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::dim(format!(
                "dense layer expects length {}, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        Ok(self.weight.dot(&x) + &self.bias)
    }

    /// Parameter gradients and input gradient given the layer input and the
    /// gradient of the loss with respect to the layer output.
    pub fn backward(
        &self,
        input: ArrayView2<'_, f64>,
        grad_out: ArrayView2<'_, f64>,
    ) -> (DenseGrads, Array2<f64>) {
        let grads = self.param_grads(input, grad_out);
        let grad_in = grad_out.dot(&self.weight);
        (grads, grad_in)
    }

    /// Like [`backward`](Self::backward) but skips the input gradient.
    pub fn param_grads(&self, input: ArrayView2<'_, f64>, grad_out: ArrayView2<'_, f64>) -> DenseGrads {
        let weight = grad_out.t().dot(&input);
        let weight = if weight.is_standard_layout() {
            weight
        } else {
            weight.as_standard_layout().into_owned()
        };
        DenseGrads {
            weight,
            bias: grad_out.sum_axis(Axis(0)),
        }
    }

    pub fn param_slices(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn param_slices_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

impl DenseGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weight: Array2::zeros(layer.weight.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    pub fn slices(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }
}

pub fn leaky_relu_scalar(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Elementwise `x if x > 0 else slope·x`.
pub fn leaky_relu(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| leaky_relu_scalar(v, slope))
}

/// Multiplies `grad` in place by the LeakyReLU derivative at `pre_activation`.
/// The derivative at exactly zero takes the negative branch.
pub fn leaky_relu_backward(grad: &mut Array2<f64>, pre_activation: &Array2<f64>, slope: f64) {
    ndarray::Zip::from(grad)
        .and(pre_activation)
        .for_each(|g, &u| {
            if u <= 0.0 {
                *g *= slope;
            }
        });
}

/// Output of [`dropout`]: the (scaled) activations and the multiplier applied
/// to each entry, needed for the backward pass. `scale` is `None` when the
/// layer acted as identity.
#[derive(Debug, Clone)]
pub struct Dropped {
    pub output: Array2<f64>,
    pub scale: Option<Array2<f64>>,
}

/// Inverted dropout: in train mode each entry is zeroed with probability `rate`
/// and survivors are scaled by `1/(1-rate)`; eval mode is the identity.
pub fn dropout<R: Rng + ?Sized>(
    x: &Array2<f64>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Dropped> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(Dropped {
            output: x.clone(),
            scale: None,
        });
    }
    let keep = 1.0 / (1.0 - rate);
    let scale = Array2::from_shape_simple_fn(x.raw_dim(), || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    });
    Ok(Dropped {
        output: x * &scale,
        scale: Some(scale),
    })
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if logits.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !max.is_finite() {
        return Err(Error::numeric("softmax received non-finite logits"));
    }
    let exp = logits.mapv(|v| (v - max).exp());
    let total = exp.sum();
    Ok(exp / total)
}

/// Backward pass of softmax: given `p = softmax(l)` and `dL/dp`, returns `dL/dl`.
pub fn softmax_backward(probs: ArrayView1<'_, f64>, grad_probs: ArrayView1<'_, f64>) -> Array1<f64> {
    let inner = probs.dot(&grad_probs);
    ndarray::Zip::from(probs)
        .and(grad_probs)
        .map_collect(|&p, &g| p * (g - inner))
}

/// Mean squared error `(1/N)·Σ‖y_i − ŷ_i‖²` over rows.
pub fn mse(target: ArrayView2<'_, f64>, prediction: ArrayView2<'_, f64>) -> Result<f64> {
    if target.dim() != prediction.dim() {
        return Err(Error::dim(format!(
            "mse shapes differ: {:?} vs {:?}",
            target.dim(),
            prediction.dim()
        )));
    }
    if target.nrows() == 0 {
        return Err(Error::dim("mse of an empty batch"));
    }
    let sq: f64 = ndarray::Zip::from(target)
        .and(prediction)
        .fold(0.0, |acc, &y, &p| acc + (y - p) * (y - p));
    Ok(sq / target.nrows() as f64)
}

/// Gradient of [`mse`] with respect to the prediction.
pub fn mse_backward(target: ArrayView2<'_, f64>, prediction: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = target.nrows() as f64;
    (&prediction - &target) * (2.0 / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// `sizes` lists the element count of each parameter tensor in update order.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update over every parameter tensor.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::dim(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != self.first[i].len() {
                return Err(Error::dim(format!(
                    "tensor {i}: adam expects {} entries, got param {} grad {}",
                    self.first[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);

        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((p, &g), m), v) in param.iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Worst relative disagreement between `analytic` and a central finite
/// difference of `loss` around `params`, over every coordinate.
///
/// The relative error of a coordinate is `|a − n| / max(|a| + |n|, floor)`,
/// with `floor = 1e-7` so that gradients which are zero on both routes count
/// as agreeing. `params` is restored before returning.
pub fn grad_check<F>(params: &mut [f64], analytic: &[f64], h: f64, mut loss: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    const FLOOR: f64 = 1e-7;
    if h <= 0.0 {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::dim(format!(
            "{} parameters but {} analytic gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut worst = 0.0_f64;
    for i in 0..params.len() {
        let original = params[i];
        params[i] = original + h;
        let plus = loss(params);
        params[i] = original - h;
        let minus = loss(params);
        params[i] = original;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!("non-finite loss while perturbing parameter {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
