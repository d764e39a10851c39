//! Conditional variable-selection network.
//!
//! Candidate inputs pass through a learnable feature mask before their
//! encoder; preselected inputs are encoded directly. The two encodings are
//! concatenated (preselected first) and fed to a small regression network:
//!
//! ```text
//! X_c ──► FM ──► m
//! X_c ⊙ m ──► f_c ─┐
//!                  ├─► [h_p | h_c] ──► Dense-128 ─ LReLU ─ Dense-64 ─ LReLU ─ Dropout ─ Dense-1 ──► ŷ
//! X_p ──► f_p ─────┘
//! ```
//!
//! The mask is a single vector per batch: the softmax of the batch-mean of the
//! two FM layers' output. Each mask entry belongs to one original candidate
//! variable and scales every encoded column of that variable.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, DenseGrads, DenseLayer, Mode};

pub const TASK_HIDDEN: [usize; 2] = [128, 64];
pub const DEFAULT_DROPOUT: f64 = 0.3;

/// Shapes of every block in the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Encoded width of the preselected block (0 means unconditional selection).
    pub preselected_width: usize,
    /// Column span of each original candidate variable inside the encoded
    /// candidate block. Spans are contiguous and cover `0..candidate_width`.
    pub candidate_spans: Vec<Range<usize>>,
    /// FM hidden width `L`.
    pub mask_hidden: usize,
    /// Preselected encoding width `L_p`.
    pub preselected_encoding: usize,
    /// Candidate encoding width `L_c`.
    pub candidate_encoding: usize,
    pub task_hidden: [usize; 2],
}

impl ModelDims {
    /// Default widths: `L = 2·D_c`, `L_p = max(8, 2·D_p)`, `L_c = max(16, 2·D_c)`.
    pub fn new(preselected_width: usize, candidate_spans: Vec<Range<usize>>) -> Self {
        let d_c = candidate_spans.len();
        Self {
            preselected_width,
            mask_hidden: 2 * d_c,
            preselected_encoding: if preselected_width == 0 {
                0
            } else {
                (2 * preselected_width).max(8)
            },
            candidate_encoding: (2 * d_c).max(16),
            task_hidden: TASK_HIDDEN,
            candidate_spans,
        }
    }

    /// One encoded column per candidate variable.
    pub fn numeric(preselected_width: usize, candidates: usize) -> Self {
        Self::new(preselected_width, (0..candidates).map(|i| i..i + 1).collect())
    }

    pub fn num_candidates(&self) -> usize {
        self.candidate_spans.len()
    }

    pub fn candidate_width(&self) -> usize {
        self.candidate_spans.last().map_or(0, |r| r.end)
    }

    pub fn fused_width(&self) -> usize {
        self.preselected_encoding + self.candidate_encoding
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidate_spans.is_empty() {
            return Err(Error::config("at least one candidate variable is required"));
        }
        let mut next = 0;
        for (i, span) in self.candidate_spans.iter().enumerate() {
            if span.start != next || span.end <= span.start {
                return Err(Error::config(format!(
                    "candidate span {i} ({span:?}) is not contiguous and non-empty"
                )));
            }
            next = span.end;
        }
        if self.mask_hidden == 0 || self.candidate_encoding == 0 {
            return Err(Error::config("mask and candidate encoding widths must be at least 1"));
        }
        if (self.preselected_width == 0) != (self.preselected_encoding == 0) {
            return Err(Error::config(
                "preselected encoding width must be zero exactly when there are no preselected columns",
            ));
        }
        if self.task_hidden.contains(&0) {
            return Err(Error::config("task network widths must be at least 1"));
        }
        Ok(())
    }
}

/// Importance vector over original candidate variables; entries lie in (0, 1)
/// and sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskVector(Array1<f64>);

impl MaskVector {
    /// Wraps externally produced scores, checking that they form a
    /// distribution.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::dim("mask must have at least one entry"));
        }
        let total: f64 = values.iter().sum();
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("mask entries must lie in [0, 1] and sum to 1, got sum {total}")));
        }
        Ok(Self(Array1::from(values)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("standard layout")
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.to_vec()
    }

    /// Repeats each entry across the encoded columns of its variable.
    pub fn expand(&self, spans: &[Range<usize>]) -> Array1<f64> {
        let width = spans.last().map_or(0, |r| r.end);
        let mut out = Array1::zeros(width);
        for (span, &m) in spans.iter().zip(self.0.iter()) {
            out.slice_mut(s![span.clone()]).fill(m);
        }
        out
    }
}

impl From<MaskVector> for Vec<f64> {
    fn from(m: MaskVector) -> Self {
        m.0.to_vec()
    }
}

/// Two stacked dense layers with no activation between them, followed by a
/// softmax over the batch-mean output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMaskModule {
    pub layer1: DenseLayer,
    pub layer2: DenseLayer,
}

impl FeatureMaskModule {
    /// The FM module has no stochastic parts, so train and eval masks coincide.
    pub fn compute_mask(&self, candidates: ArrayView2<'_, f64>) -> Result<MaskVector> {
        Ok(self.mask_with_cache(candidates)?.mask)
    }

    fn mask_with_cache(&self, candidates: ArrayView2<'_, f64>) -> Result<MaskCache> {
        if candidates.nrows() == 0 {
            return Err(Error::dim("feature mask needs a non-empty batch"));
        }
        // W2·mean(W1·x + b1) + b2 equals the batch mean of W2(W1·x + b1) + b2.
        let mean_input = candidates
            .mean_axis(Axis(0))
            .expect("non-empty batch has a mean");
        let hidden = self.layer1.forward_vec(mean_input.view())?;
        let logits = self.layer2.forward_vec(hidden.view())?;
        let mask = nn::softmax(logits.view())?;
        Ok(MaskCache {
            mean_input,
            hidden,
            mask: MaskVector(mask),
        })
    }
}

struct MaskCache {
    mean_input: Array1<f64>,
    hidden: Array1<f64>,
    mask: MaskVector,
}

/// Output of [`CvsModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub prediction: Array2<f64>,
    pub mask: MaskVector,
    /// Fused representation `[h_p | h_c]`.
    pub fused: Array2<f64>,
}

/// Per-layer gradients in the order of [`CvsModel::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrads>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|g| g.slices()).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvsModel {
    pub dims: ModelDims,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub feature_mask: FeatureMaskModule,
    /// Absent when there are no preselected columns.
    pub preselected_encoder: Option<DenseLayer>,
    pub candidate_encoder: DenseLayer,
    pub hidden1: DenseLayer,
    pub hidden2: DenseLayer,
    pub output: DenseLayer,
}

struct Cache {
    mask: MaskCache,
    masked_candidates: Array2<f64>,
    pre_pre: Option<Array2<f64>>,
    cand_pre: Array2<f64>,
    fused: Array2<f64>,
    hidden1_pre: Array2<f64>,
    hidden1: Array2<f64>,
    hidden2_pre: Array2<f64>,
    dropped: nn::Dropped,
    prediction: Array2<f64>,
}

impl CvsModel {
    /// Glorot-uniform initialisation from `seed`, except the FM output layer,
    /// which starts at exactly zero so the initial mask is uniform.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        Self::init_with(dims, seed, nn::DEFAULT_LEAKY_SLOPE, DEFAULT_DROPOUT)
    }

    pub fn init_with(dims: ModelDims, seed: u64, leaky_slope: f64, dropout: f64) -> Result<Self> {
        dims.validate()?;
        if !(leaky_slope > 0.0 && leaky_slope < 1.0) {
            return Err(Error::config(format!("leaky slope must be in (0, 1), got {leaky_slope}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config(format!("dropout rate must be in [0, 1), got {dropout}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = dims.candidate_width();
        let d_c = dims.num_candidates();
        let layer1 = DenseLayer::glorot(width, dims.mask_hidden, &mut rng);
        let layer2 = DenseLayer::zeros(dims.mask_hidden, d_c);
        let preselected_encoder = (dims.preselected_width > 0).then(|| {
            DenseLayer::glorot(dims.preselected_width, dims.preselected_encoding, &mut rng)
        });
        let candidate_encoder = DenseLayer::glorot(width, dims.candidate_encoding, &mut rng);
        let [h1, h2] = dims.task_hidden;
        let hidden1 = DenseLayer::glorot(dims.fused_width(), h1, &mut rng);
        let hidden2 = DenseLayer::glorot(h1, h2, &mut rng);
        let output = DenseLayer::glorot(h2, 1, &mut rng);
        Ok(Self {
            dims,
            leaky_slope,
            dropout,
            feature_mask: FeatureMaskModule { layer1, layer2 },
            preselected_encoder,
            candidate_encoder,
            hidden1,
            hidden2,
            output,
        })
    }

    /// Named layers in the fixed parameter order used by gradients, the
    /// optimizer, and serialization.
    pub fn layers(&self) -> Vec<(&'static str, &DenseLayer)> {
        let mut out = vec![
            ("fm.layer1", &self.feature_mask.layer1),
            ("fm.layer2", &self.feature_mask.layer2),
        ];
        if let Some(enc) = &self.preselected_encoder {
            out.push(("encoder.preselected", enc));
        }
        out.extend([
            ("encoder.candidate", &self.candidate_encoder),
            ("task.hidden1", &self.hidden1),
            ("task.hidden2", &self.hidden2),
            ("task.output", &self.output),
        ]);
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut out = vec![&mut self.feature_mask.layer1, &mut self.feature_mask.layer2];
        if let Some(enc) = &mut self.preselected_encoder {
            out.push(enc);
        }
        out.extend([
            &mut self.candidate_encoder,
            &mut self.hidden1,
            &mut self.hidden2,
            &mut self.output,
        ]);
        out
    }

    /// Element count of every parameter tensor, in optimizer order.
    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.layers()
            .iter()
            .flat_map(|(_, l)| [l.weight.len(), l.bias.len()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensor_sizes().iter().sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers()
            .iter()
            .flat_map(|(_, l)| l.param_slices())
            .flat_map(|s| s.iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::dim(format!(
                "model has {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut offset = 0;
        for layer in self.layers_mut() {
            for slice in layer.param_slices_mut() {
                slice.copy_from_slice(&values[offset..offset + slice.len()]);
                offset += slice.len();
            }
        }
        Ok(())
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| l.param_slices_mut())
            .collect()
    }

    pub fn compute_mask(&self, candidates: ArrayView2<'_, f64>) -> Result<MaskVector> {
        self.check_candidates(candidates)?;
        self.feature_mask.compute_mask(candidates)
    }

    fn check_candidates(&self, candidates: ArrayView2<'_, f64>) -> Result<()> {
        if candidates.ncols() != self.dims.candidate_width() {
            return Err(Error::dim(format!(
                "candidate block has width {}, model expects {}",
                candidates.ncols(),
                self.dims.candidate_width()
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, preselected: ArrayView2<'_, f64>, candidates: ArrayView2<'_, f64>) -> Result<()> {
        self.check_candidates(candidates)?;
        if preselected.ncols() != self.dims.preselected_width {
            return Err(Error::dim(format!(
                "preselected block has width {}, model expects {}",
                preselected.ncols(),
                self.dims.preselected_width
            )));
        }
        if preselected.nrows() != candidates.nrows() {
            return Err(Error::dim(format!(
                "preselected batch has {} rows but candidate batch has {}",
                preselected.nrows(),
                candidates.nrows()
            )));
        }
        Ok(())
    }

    fn forward_cached<R: Rng + ?Sized>(
        &self,
        preselected: ArrayView2<'_, f64>,
        candidates: ArrayView2<'_, f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Cache> {
        self.check_inputs(preselected, candidates)?;
        let slope = self.leaky_slope;
        let mask = self.feature_mask.mask_with_cache(candidates)?;
        let mask_expanded = mask.mask.expand(&self.dims.candidate_spans);
        let masked_candidates = &candidates * &mask_expanded;

        let cand_pre = self.candidate_encoder.forward(masked_candidates.view())?;
        let cand_enc = nn::leaky_relu(&cand_pre, slope);

        let (pre_pre, fused) = match &self.preselected_encoder {
            Some(enc) => {
                let pre_pre = enc.forward(preselected)?;
                let pre_enc = nn::leaky_relu(&pre_pre, slope);
                let fused = ndarray::concatenate(Axis(1), &[pre_enc.view(), cand_enc.view()])
                    .expect("row counts checked");
                (Some(pre_pre), fused)
            }
            None => (None, cand_enc),
        };

        let hidden1_pre = self.hidden1.forward(fused.view())?;
        let hidden1 = nn::leaky_relu(&hidden1_pre, slope);
        let hidden2_pre = self.hidden2.forward(hidden1.view())?;
        let hidden2 = nn::leaky_relu(&hidden2_pre, slope);
        let dropped = nn::dropout(&hidden2, self.dropout, mode, rng)?;
        let prediction = self.output.forward(dropped.output.view())?;

        Ok(Cache {
            mask,
            masked_candidates,
            pre_pre,
            cand_pre,
            fused,
            hidden1_pre,
            hidden1,
            hidden2_pre,
            dropped,
            prediction,
        })
    }

    /// Prediction, batch mask, and fused representation. Dropout is applied
    /// only in [`Mode::Train`].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        preselected: ArrayView2<'_, f64>,
        candidates: ArrayView2<'_, f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let cache = self.forward_cached(preselected, candidates, mode, rng)?;
        Ok(ForwardOutput {
            prediction: cache.prediction,
            mask: cache.mask.mask,
            fused: cache.fused,
        })
    }

    /// Deterministic (eval-mode) prediction.
    pub fn predict(&self, preselected: ArrayView2<'_, f64>, candidates: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(preselected, candidates, Mode::Eval, &mut rng)?.prediction)
    }

    /// Minibatch MSE and its gradient with respect to every parameter.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        preselected: ArrayView2<'_, f64>,
        candidates: ArrayView2<'_, f64>,
        target: ArrayView2<'_, f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(f64, Gradients)> {
        if target.nrows() != candidates.nrows() || target.ncols() != 1 {
            return Err(Error::dim(format!(
                "target must be {}×1, got {:?}",
                candidates.nrows(),
                target.dim()
            )));
        }
        let cache = self.forward_cached(preselected, candidates, mode, rng)?;
        let loss = nn::mse(target, cache.prediction.view())?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("loss is {loss}")));
        }
        let slope = self.leaky_slope;

        // Task network.
        let grad_pred = nn::mse_backward(target, cache.prediction.view());
        let (g_output, grad_dropped) = self.output.backward(cache.dropped.output.view(), grad_pred.view());
        let mut grad_h2 = match &cache.dropped.scale {
            Some(scale) => grad_dropped * scale,
            None => grad_dropped,
        };
        nn::leaky_relu_backward(&mut grad_h2, &cache.hidden2_pre, slope);
        let (g_hidden2, mut grad_h1) = self.hidden2.backward(cache.hidden1.view(), grad_h2.view());
        nn::leaky_relu_backward(&mut grad_h1, &cache.hidden1_pre, slope);
        let (g_hidden1, grad_fused) = self.hidden1.backward(cache.fused.view(), grad_h1.view());

        // Encoders.
        let split = self.dims.preselected_encoding;
        let g_pre = match (&self.preselected_encoder, &cache.pre_pre) {
            (Some(enc), Some(pre_pre)) => {
                let mut grad = grad_fused.slice(s![.., ..split]).to_owned();
                nn::leaky_relu_backward(&mut grad, pre_pre, slope);
                Some(enc.param_grads(preselected, grad.view()))
            }
            _ => None,
        };
        let mut grad_cand = grad_fused.slice(s![.., split..]).to_owned();
        nn::leaky_relu_backward(&mut grad_cand, &cache.cand_pre, slope);
        let (g_cand, grad_masked) = self
            .candidate_encoder
            .backward(cache.masked_candidates.view(), grad_cand.view());

        // Feature mask: masked = x ⊙ expand(m).
        let grad_expanded = (&grad_masked * &candidates).sum_axis(Axis(0));
        let grad_mask: Array1<f64> = self
            .dims
            .candidate_spans
            .iter()
            .map(|span| grad_expanded.slice(s![span.clone()]).sum())
            .collect();
        let grad_logits = nn::softmax_backward(cache.mask.mask.view(), grad_mask.view());
        let fm = &self.feature_mask;
        let g_fm2 = DenseGrads {
            weight: outer(&grad_logits, &cache.mask.hidden),
            bias: grad_logits.clone(),
        };
        let grad_hidden = fm.layer2.weight.t().dot(&grad_logits);
        let g_fm1 = DenseGrads {
            weight: outer(&grad_hidden, &cache.mask.mean_input),
            bias: grad_hidden,
        };

        let mut layers = vec![g_fm1, g_fm2];
        layers.extend(g_pre);
        layers.extend([g_cand, g_hidden1, g_hidden2, g_output]);
        let grads = Gradients { layers };
        if !grads.is_finite() {
            return Err(Error::numeric("non-finite gradient"));
        }
        Ok((loss, grads))
    }

    /// Eval-mode loss on a batch.
    pub fn eval_loss(
        &self,
        preselected: ArrayView2<'_, f64>,
        candidates: ArrayView2<'_, f64>,
        target: ArrayView2<'_, f64>,
    ) -> Result<f64> {
        nn::mse(target, self.predict(preselected, candidates)?.view())
    }

    pub fn to_manifest(&self) -> ParamManifest {
        ParamManifest {
            dims: self.dims.clone(),
            leaky_slope: self.leaky_slope,
            dropout: self.dropout,
            tensors: self
                .layers()
                .into_iter()
                .flat_map(|(name, layer)| {
                    [
                        NamedTensor {
                            name: format!("{name}.weight"),
                            shape: layer.weight.shape().to_vec(),
                            values: layer.weight.iter().copied().collect(),
                        },
                        NamedTensor {
                            name: format!("{name}.bias"),
                            shape: layer.bias.shape().to_vec(),
                            values: layer.bias.to_vec(),
                        },
                    ]
                })
                .collect(),
        }
    }

    pub fn from_manifest(manifest: &ParamManifest) -> Result<Self> {
        let mut model = Self::init_with(
            manifest.dims.clone(),
            0,
            manifest.leaky_slope,
            manifest.dropout,
        )?;
        let expected: Vec<(String, Vec<usize>)> = model
            .layers()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), l.weight.shape().to_vec()),
                    (format!("{name}.bias"), l.bias.shape().to_vec()),
                ]
            })
            .collect();
        if expected.len() != manifest.tensors.len() {
            return Err(Error::schema(format!(
                "manifest has {} tensors, model needs {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        let mut flat = Vec::with_capacity(model.num_params());
        for ((name, shape), tensor) in expected.iter().zip(&manifest.tensors) {
            if &tensor.name != name || &tensor.shape != shape {
                return Err(Error::schema(format!(
                    "expected tensor {name} {shape:?}, found {} {:?}",
                    tensor.name, tensor.shape
                )));
            }
            if tensor.values.len() != shape.iter().product::<usize>() {
                return Err(Error::schema(format!("tensor {name} has the wrong number of values")));
            }
            flat.extend_from_slice(&tensor.values);
        }
        model.set_flat_params(&flat)?;
        Ok(model)
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row).as_standard_layout().into_owned()
}

/// Flat JSON manifest of named row-major tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub dims: ModelDims,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.5..1.5))
    }

    fn tiny_dims() -> ModelDims {
        ModelDims {
            preselected_width: 2,
            candidate_spans: vec![0..1, 1..2, 2..3],
            mask_hidden: 4,
            preselected_encoding: 2,
            candidate_encoding: 2,
            task_hidden: [6, 5],
        }
    }

    fn randomize(model: &mut CvsModel, rng: &mut ChaCha8Rng) {
        for p in model.param_slices_mut() {
            for v in p.iter_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
    }

    #[test]
    fn initial_mask_is_exactly_uniform() {
        for d_c in [1, 3, 7, 14] {
            let model = CvsModel::init(ModelDims::numeric(1, d_c), 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x = random_batch(&mut rng, 5, d_c);
            let m = model.compute_mask(x.view()).unwrap();
            assert!(m.as_slice().iter().all(|&v| v == 1.0 / d_c as f64), "{m:?}");
        }
    }

    #[test]
    fn single_candidate_mask_is_one() {
        let mut model = CvsModel::init(ModelDims::numeric(2, 1), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        randomize(&mut model, &mut rng);
        let m = model.compute_mask(random_batch(&mut rng, 4, 1).view()).unwrap();
        assert_eq!(m.as_slice(), &[1.0]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = CvsModel::init(ModelDims::numeric(1, 14), 42).unwrap();
        let b = CvsModel::init(ModelDims::numeric(1, 14), 42).unwrap();
        let bits = |m: &CvsModel| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = CvsModel::init(ModelDims::numeric(1, 14), 43).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(matches!(CvsModel::init(ModelDims::numeric(1, 0), 0), Err(Error::Config(_))));
        let mut dims = ModelDims::numeric(1, 3);
        dims.candidate_spans = vec![0..1, 2..3];
        assert!(CvsModel::init(dims, 0).is_err());
    }

    #[test]
    fn mask_matches_symbolwise_oracle() {
        // Evaluate W2(W1·x_i + b1) + b2 per row, average, then softmax.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut model = CvsModel::init(ModelDims::numeric(1, 4), 1).unwrap();
        randomize(&mut model, &mut rng);
        let x = random_batch(&mut rng, 3, 4);
        let fm = &model.feature_mask;
        let (l, d) = (fm.layer1.out_dim(), 4);
        let mut mean_logit = vec![0.0; d];
        for r in 0..3 {
            let mut hidden = vec![0.0; l];
            for j in 0..l {
                hidden[j] = fm.layer1.bias[j];
                for i in 0..d {
                    hidden[j] += fm.layer1.weight[[j, i]] * x[[r, i]];
                }
            }
            for k in 0..d {
                let mut v = 0.0;
                for j in 0..l {
                    v += fm.layer2.weight[[k, j]] * hidden[j];
                }
                mean_logit[k] += v / 3.0;
            }
        }
        let exp: Vec<f64> = (0..d).map(|k| (mean_logit[k] + fm.layer2.bias[k]).exp()).collect();
        let total: f64 = exp.iter().sum();
        let m = model.compute_mask(x.view()).unwrap();
        for k in 0..d {
            assert_abs_diff_eq!(m.as_slice()[k], exp[k] / total, epsilon = 1e-12);
        }
    }

    #[test]
    fn mask_of_repeated_rows_equals_single_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = CvsModel::init(ModelDims::numeric(0, 5), 2).unwrap();
        randomize(&mut model, &mut rng);
        let row = random_batch(&mut rng, 1, 5);
        let repeated = ndarray::concatenate(Axis(0), &[row.view(), row.view(), row.view()]).unwrap();
        let a = model.compute_mask(row.view()).unwrap();
        let b = model.compute_mask(repeated.view()).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
        assert!(model.compute_mask(Array2::zeros((0, 5)).view()).is_err());
    }

    #[test]
    fn unconditional_model_runs() {
        let model = CvsModel::init(ModelDims::numeric(0, 4), 5).unwrap();
        assert!(model.preselected_encoder.is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_batch(&mut rng, 6, 4);
        let out = model
            .forward(Array2::zeros((6, 0)).view(), x.view(), Mode::Train, &mut rng)
            .unwrap();
        assert_eq!(out.prediction.dim(), (6, 1));
        assert_eq!(out.fused.ncols(), model.dims.candidate_encoding);
    }

    #[test]
    fn eval_forward_is_deterministic_and_checks_batch_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = CvsModel::init(ModelDims::numeric(2, 3), 5).unwrap();
        let xp = random_batch(&mut rng, 7, 2);
        let xc = random_batch(&mut rng, 7, 3);
        let a = model.forward(xp.view(), xc.view(), Mode::Eval, &mut rng).unwrap();
        let b = model.forward(xp.view(), xc.view(), Mode::Eval, &mut rng).unwrap();
        assert_eq!(a.prediction, b.prediction);
        let short = random_batch(&mut rng, 6, 2);
        assert!(matches!(
            model.forward(short.view(), xc.view(), Mode::Eval, &mut rng),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn candidate_encoding_with_uniform_mask_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = CvsModel::init(ModelDims::numeric(1, 3), 7).unwrap();
        let xp = random_batch(&mut rng, 2, 1);
        let xc = random_batch(&mut rng, 2, 3);
        let out = model.forward(xp.view(), xc.view(), Mode::Eval, &mut rng).unwrap();
        let enc = &model.candidate_encoder;
        let split = model.dims.preselected_encoding;
        for r in 0..2 {
            for j in 0..enc.out_dim() {
                let mut u = enc.bias[j];
                for i in 0..3 {
                    u += enc.weight[[j, i]] * xc[[r, i]] / 3.0;
                }
                let h = if u > 0.0 { u } else { 0.02 * u };
                assert_abs_diff_eq!(out.fused[[r, split + j]], h, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fused_layout_puts_preselected_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = CvsModel::init(ModelDims::numeric(2, 3), 8).unwrap();
        let xp = random_batch(&mut rng, 4, 2);
        let xc = random_batch(&mut rng, 4, 3);
        let out = model.forward(xp.view(), xc.view(), Mode::Eval, &mut rng).unwrap();
        let enc = model.preselected_encoder.as_ref().unwrap();
        let h_p = nn::leaky_relu(&enc.forward(xp.view()).unwrap(), 0.02);
        assert_eq!(out.fused.slice(s![.., ..h_p.ncols()]), h_p);

        let mut swapped = out.fused.clone();
        let lp = h_p.ncols();
        let lc = out.fused.ncols() - lp;
        swapped.slice_mut(s![.., ..lc]).assign(&out.fused.slice(s![.., lp..]));
        swapped.slice_mut(s![.., lc..]).assign(&out.fused.slice(s![.., ..lp]));
        let via_swap = model
            .output
            .forward(
                nn::leaky_relu(
                    &model
                        .hidden2
                        .forward(nn::leaky_relu(&model.hidden1.forward(swapped.view()).unwrap(), 0.02).view())
                        .unwrap(),
                    0.02,
                )
                .view(),
            )
            .unwrap();
        assert_ne!(via_swap, out.prediction);
    }

    fn check_gradients(model: &CvsModel, xp: &Array2<f64>, xc: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, grads) = model
            .loss_and_grads(xp.view(), xc.view(), y.view(), Mode::Eval, &mut rng)
            .unwrap();
        let analytic = grads.flatten();
        let mut flat = model.flat_params();
        let mut probe = model.clone();
        nn::grad_check(&mut flat, &analytic, 1e-5, |p| {
            probe.set_flat_params(p)?;
            probe.eval_loss(xp.view(), xc.view(), y.view())
        })
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences_on_tiny_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut model = CvsModel::init(tiny_dims(), 3).unwrap();
        randomize(&mut model, &mut rng);
        let xp = random_batch(&mut rng, 5, 2);
        let xc = random_batch(&mut rng, 5, 3);
        let y = random_batch(&mut rng, 5, 1);
        let err = check_gradients(&model, &xp, &xc, &y);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradients_match_with_one_hot_spans_and_no_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut dims = ModelDims::new(0, vec![0..1, 1..4, 4..5]);
        dims.task_hidden = [5, 4];
        let mut model = CvsModel::init(dims, 3).unwrap();
        randomize(&mut model, &mut rng);
        let xp = Array2::zeros((4, 0));
        let xc = random_batch(&mut rng, 4, 5);
        let y = random_batch(&mut rng, 4, 1);
        let err = check_gradients(&model, &xp, &xc, &y);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn zero_residual_gives_zero_loss_and_output_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = CvsModel::init(tiny_dims(), 4).unwrap();
        let xp = random_batch(&mut rng, 5, 2);
        let xc = random_batch(&mut rng, 5, 3);
        let y = model.predict(xp.view(), xc.view()).unwrap();
        let (loss, grads) = model
            .loss_and_grads(xp.view(), xc.view(), y.view(), Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(loss, 0.0);
        let out = grads.layers.last().unwrap();
        assert!(out.weight.iter().chain(out.bias.iter()).all(|&g| g == 0.0));
    }

    #[test]
    fn duplicating_the_batch_leaves_gradients_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut model = CvsModel::init(tiny_dims(), 4).unwrap();
        randomize(&mut model, &mut rng);
        let xp = random_batch(&mut rng, 3, 2);
        let xc = random_batch(&mut rng, 3, 3);
        let y = random_batch(&mut rng, 3, 1);
        let twice = |a: &Array2<f64>| ndarray::concatenate(Axis(0), &[a.view(), a.view()]).unwrap();
        let (l1, g1) = model
            .loss_and_grads(xp.view(), xc.view(), y.view(), Mode::Eval, &mut rng)
            .unwrap();
        let (l2, g2) = model
            .loss_and_grads(twice(&xp).view(), twice(&xc).view(), twice(&y).view(), Mode::Eval, &mut rng)
            .unwrap();
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-12);
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn fm_output_layer_gets_gradient_at_uniform_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let model = CvsModel::init(ModelDims::numeric(1, 6), 11).unwrap();
        let xp = random_batch(&mut rng, 32, 1);
        let xc = random_batch(&mut rng, 32, 6);
        let y = xc.column(0).mapv(|v| 3.0 * v).insert_axis(Axis(1));
        let (_, grads) = model
            .loss_and_grads(xp.view(), xc.view(), y.view(), Mode::Eval, &mut rng)
            .unwrap();
        let fm2 = &grads.layers[1];
        assert!(fm2.bias.iter().any(|&g| g.abs() > 1e-8));
        assert!(fm2.weight.iter().any(|&g| g.abs() > 1e-10));
    }

    #[test]
    fn manifest_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = CvsModel::init(ModelDims::new(2, vec![0..2, 2..3]), 4).unwrap();
        randomize(&mut model, &mut rng);
        let json = serde_json::to_string(&model.to_manifest()).unwrap();
        let back = CvsModel::from_manifest(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, model);

        let mut broken = model.to_manifest();
        broken.tensors[0].shape = vec![1, 1];
        assert!(matches!(CvsModel::from_manifest(&broken), Err(Error::Schema(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn mask_is_row_permutation_invariant_and_normalised(seed in 0u64..10_000, rows in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = CvsModel::init(ModelDims::numeric(1, 5), seed).unwrap();
            randomize(&mut model, &mut rng);
            let x = random_batch(&mut rng, rows, 5);
            let mut order: Vec<usize> = (0..rows).collect();
            order.reverse();
            let permuted = x.select(Axis(0), &order);
            let a = model.compute_mask(x.view()).unwrap();
            let b = model.compute_mask(permuted.view()).unwrap();
            prop_assert!((a.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
            for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((p - q).abs() < 1e-14);
            }
        }
    }
}
