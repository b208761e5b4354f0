//! 1-Lipschitz classifiers built from orthogonal affine layers and GroupSort2.
//!
//! A [`LipschitzClassifier`] is a stack `A_k ∘ σ ∘ A_{k-1} ∘ … ∘ σ ∘ A_1` where
//! each `A_i` is an [`AffineLayer`] and `σ` is GroupSort2 (sort each disjoint
//! pair of coordinates ascending). GroupSort2 is a permutation of its input, so
//! it is norm preserving and 1-Lipschitz, and the network's Lipschitz constant
//! is bounded by the product of the layers' spectral norms. Layers flagged
//! orthogonal have orthonormal rows and contribute a factor of exactly 1.
//!
//! Gradients are exact reverse-mode derivatives. At a GroupSort tie the pair is
//! left in input order, which fixes the subgradient that is returned.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SpectralNorm};
use crate::rng;

/// Maximum `|W Wᵀ − I|` entry accepted for a layer flagged orthogonal.
pub const ORTHOGONALITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    weight: Matrix,
    bias: Vec<f64>,
    orthogonal: bool,
}

impl AffineLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, orthogonal: bool) -> Result<Self> {
        if weight.rows() == 0 || weight.cols() == 0 {
            return Err(Error::Model("empty weight matrix".into()));
        }
        if bias.len() != weight.rows() {
            return Err(Error::Dimension(format!(
                "bias has {} entries for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Model("non-finite parameter".into()));
        }
        if orthogonal {
            if weight.rows() > weight.cols() {
                return Err(Error::Dimension(format!(
                    "orthogonal layer needs out_dim <= in_dim, got {}x{}",
                    weight.rows(),
                    weight.cols()
                )));
            }
            let residual = weight.row_orthonormality_residual();
            if residual > ORTHOGONALITY_TOL {
                return Err(Error::Model(format!(
                    "layer flagged orthogonal but |WWᵀ - I| = {residual:e}"
                )));
            }
        }
        Ok(Self {
            weight,
            bias,
            orthogonal,
        })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn is_orthogonal(&self) -> bool {
        self.orthogonal
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.weight.mul_vec(x);
        z.iter_mut().zip(&self.bias).for_each(|(z, b)| *z += b);
        z
    }

    /// Spectral norm; exactly 1 for orthogonal layers.
    pub fn operator_norm(&self) -> SpectralNorm {
        if self.orthogonal {
            SpectralNorm {
                value: 1.0,
                iterations: 0,
                converged: true,
            }
        } else {
            linalg::spectral_norm(&self.weight)
        }
    }
}

/// `H_1 H_2 ⋯ H_k` with `H_i = I − 2 v_i v_iᵀ / ‖v_i‖²`. Zero vectors are skipped.
pub fn householder_product(dim: usize, reflectors: &[Vec<f64>]) -> Result<Matrix> {
    let mut q = Matrix::identity(dim);
    for v in reflectors {
        if v.len() != dim {
            return Err(Error::Dimension(format!(
                "reflector of length {} in dimension {dim}",
                v.len()
            )));
        }
        let vv = linalg::dot(v, v);
        if vv == 0.0 {
            continue;
        }
        // Q ← Q H: each row r becomes r − 2 (r·v / v·v) v.
        for i in 0..dim {
            let coef = 2.0 * linalg::dot(q.row(i), v) / vv;
            for (j, vj) in v.iter().enumerate() {
                q[(i, j)] -= coef * vj;
            }
        }
    }
    Ok(q)
}

/// Random layer with orthonormal rows and zero bias: the first `out_dim` rows
/// of a product of `in_dim` Householder reflectors drawn from `seed`.
pub fn build_orthogonal(in_dim: usize, out_dim: usize, seed: u64) -> Result<AffineLayer> {
    if out_dim == 0 || out_dim > in_dim {
        return Err(Error::Dimension(format!(
            "orthogonal layer needs 1 <= out_dim <= in_dim, got out={out_dim} in={in_dim}"
        )));
    }
    let mut rng = rng::substream(seed, "householder");
    let reflectors: Vec<Vec<f64>> = (0..in_dim)
        .map(|_| {
            (0..in_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();
    let q = householder_product(in_dim, &reflectors)?;
    let w = Matrix::from_row_major(out_dim, in_dim, q.as_slice()[..out_dim * in_dim].to_vec())?;
    AffineLayer::new(w, vec![0.0; out_dim], true)
}

/// Sort each disjoint pair ascending; a trailing odd coordinate passes through.
/// Returns, per pair, whether it was swapped (strictly out of order).
pub fn group_sort2(v: &mut [f64]) -> Vec<bool> {
    v.chunks_exact_mut(2)
        .map(|p| {
            let swap = p[0] > p[1];
            if swap {
                p.swap(0, 1);
            }
            swap
        })
        .collect()
}

fn group_sort2_backward(g: &mut [f64], swaps: &[bool]) {
    for (p, &s) in g.chunks_exact_mut(2).zip(swaps) {
        if s {
            p.swap(0, 1);
        }
    }
}

/// Certified Lipschitz product of a model. `valid` is false when some layer's
/// power iteration did not converge and `value` is only a partial estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub input_gradient: Vec<f64>,
    pub output_index: usize,
}

/// Intermediate values recorded by a forward pass.
struct Trace {
    /// Input to each affine layer.
    layer_inputs: Vec<Vec<f64>>,
    /// GroupSort swap pattern after each non-final layer.
    swaps: Vec<Vec<bool>>,
    logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzClassifier {
    layers: Vec<AffineLayer>,
    lipschitz: LipschitzEstimate,
}

impl LipschitzClassifier {
    pub fn new(layers: Vec<AffineLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Model("model has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        let lipschitz = layers.iter().fold(
            LipschitzEstimate {
                value: 1.0,
                valid: true,
            },
            |acc, l| {
                let n = l.operator_norm();
                LipschitzEstimate {
                    value: acc.value * n.value,
                    valid: acc.valid && n.converged,
                }
            },
        );
        Ok(Self { layers, lipschitz })
    }

    /// Random all-orthogonal network with the given layer widths
    /// (`widths[0]` inputs, `widths.last()` classes). Widths must not increase.
    pub fn orthogonal(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Dimension(
                "need at least input and output widths".into(),
            ));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| build_orthogonal(w[0], w[1], seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn lipschitz_constant(&self) -> LipschitzEstimate {
        self.lipschitz
    }

    pub fn lipschitz_product(&self) -> f64 {
        self.lipschitz.value
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let last = self.layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut swaps = Vec::with_capacity(last);
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(&a);
            layer_inputs.push(a);
            if i < last {
                swaps.push(group_sort2(&mut z));
            }
            a = z;
        }
        Trace {
            layer_inputs,
            swaps,
            logits: a,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    /// Logits of many rows, computed in parallel; order is preserved.
    pub fn forward_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        use rayon::prelude::*;
        rows.par_iter().map(|x| self.forward(x)).collect()
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            a = layer.apply(&a);
            if i < last {
                group_sort2(&mut a);
            }
        }
        a
    }

    fn backward(&self, trace: &Trace, cotangent: &[f64]) -> Vec<f64> {
        let mut g = cotangent.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = layer.weight.mul_vec_t(&g);
            if i > 0 {
                group_sort2_backward(&mut g, &trace.swaps[i - 1]);
            }
        }
        g
    }

    /// Vector-Jacobian product `cotangentᵀ · ∂logits/∂x`, plus the logits.
    pub fn vjp(&self, x: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        if cotangent.len() != self.num_classes() {
            return Err(Error::Dimension(format!(
                "cotangent has {} entries for {} classes",
                cotangent.len(),
                self.num_classes()
            )));
        }
        let trace = self.trace(x);
        let g = self.backward(&trace, cotangent);
        Ok((g, trace.logits))
    }

    /// Gradient of `logits[class_index]` with respect to the input.
    pub fn input_gradient(&self, x: &[f64], class_index: usize) -> Result<GradientRecord> {
        let c = self.num_classes();
        if class_index >= c {
            return Err(Error::InvalidArgument(format!(
                "class {class_index} out of range for {c} classes"
            )));
        }
        let mut e = vec![0.0; c];
        e[class_index] = 1.0;
        let (g, _) = self.vjp(x, &e)?;
        Ok(GradientRecord {
            input_gradient: g,
            output_index: class_index,
        })
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        let n = data.len();
        if n == 0 {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for (x, &y) in data.features().iter().zip(data.labels()) {
            hits += usize::from(self.predict_class(x)? == y);
        }
        Ok(hits as f64 / n as f64)
    }

    /// Largest `|W Wᵀ − I|` entry over layers flagged orthogonal.
    pub fn orthogonality_residual(&self) -> f64 {
        self.layers
            .iter()
            .filter(|l| l.orthogonal)
            .map(|l| l.weight.row_orthonormality_residual())
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc {
            layers: self
                .layers
                .iter()
                .map(|l| LayerDoc {
                    weight: l.weight.to_rows(),
                    bias: l.bias.clone(),
                    orthogonal: l.orthogonal,
                })
                .collect(),
            activation: GROUPSORT2.to_string(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        if doc.activation != GROUPSORT2 {
            return Err(Error::Model(format!(
                "unsupported activation {:?}",
                doc.activation
            )));
        }
        let layers = doc
            .layers
            .into_iter()
            .map(|l| AffineLayer::new(Matrix::from_rows(&l.weight)?, l.bias, l.orthogonal))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }
}

const GROUPSORT2: &str = "groupsort2";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    orthogonal: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    layers: Vec<LayerDoc>,
    activation: String,
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Björck iteration `W ← W + ½ (I − W Wᵀ) W` until the rows are orthonormal to `tol`.
/// Returns the final residual.
pub fn project_rows_orthonormal(w: &mut Matrix, tol: f64, max_iters: usize) -> f64 {
    let mut residual = w.row_orthonormality_residual();
    if !residual.is_finite() {
        return residual;
    }
    // Björck only converges for spectral norm < √3.
    if residual > 0.5 {
        let s = linalg::spectral_norm(w).value;
        if s > 0.0 {
            w.scale(1.0 / s);
        }
        residual = w.row_orthonormality_residual();
    }
    let mut iters = 0;
    while residual > tol && iters < max_iters {
        let wwt = w.matmul(&w.transpose());
        let correction = wwt.matmul(w);
        for (x, c) in w.as_mut_slice().iter_mut().zip(correction.as_slice()) {
            *x = 1.5 * *x - 0.5 * c;
        }
        residual = w.row_orthonormality_residual();
        iters += 1;
    }
    residual
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Logits are divided by this before the softmax cross-entropy.
    pub temperature: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            temperature: 0.25,
            batch_size: 32,
            seed: 0,
        }
    }
}

const PROJECTION_TOL: f64 = 1e-12;
const PROJECTION_MAX_ITERS: usize = 100;

/// Minibatch SGD on temperature-scaled cross-entropy. Orthogonal layers are
/// projected back onto the orthonormal-row manifold after every step.
pub fn train_toy(
    model: &LipschitzClassifier,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<LipschitzClassifier> {
    if cfg.epochs == 0 {
        return Ok(model.clone());
    }
    if !(cfg.temperature > 0.0) || !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "training needs temperature > 0, learning rate > 0 and batch size >= 1".into(),
        ));
    }
    if data.feature_dim() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "dataset has {} features, model expects {}",
            data.feature_dim(),
            model.input_dim()
        )));
    }
    let c = model.num_classes();
    if let Some(&bad) = data.labels().iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} for {c} classes"
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }

    let mut layers = model.layers.clone();
    let mut rng = rng::substream(cfg.seed, "train");
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let current = LipschitzClassifier {
                layers: layers.clone(),
                lipschitz: model.lipschitz,
            };
            let mut grad_w: Vec<Matrix> = layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect();
            let mut grad_b: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.out_dim()]).collect();

            for &i in batch {
                let trace = current.trace(&data.features()[i]);
                let (loss, mut g) = softmax_xent(&trace.logits, data.labels()[i], cfg.temperature);
                epoch_loss += loss;
                for (li, layer) in layers.iter().enumerate().rev() {
                    let input = &trace.layer_inputs[li];
                    let gw = &mut grad_w[li];
                    for (r, &gr) in g.iter().enumerate() {
                        grad_b[li][r] += gr;
                        if gr != 0.0 {
                            for (col, &a) in input.iter().enumerate() {
                                gw[(r, col)] += gr * a;
                            }
                        }
                    }
                    if li > 0 {
                        g = layer.weight.mul_vec_t(&g);
                        group_sort2_backward(&mut g, &trace.swaps[li - 1]);
                    }
                }
            }

            let step = cfg.learning_rate / batch.len() as f64;
            for ((layer, gw), gb) in layers.iter_mut().zip(&grad_w).zip(&grad_b) {
                for (w, g) in layer.weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                    *w -= step * g;
                }
                for (b, g) in layer.bias.iter_mut().zip(gb) {
                    *b -= step * g;
                }
                if layer.orthogonal {
                    project_rows_orthonormal(
                        &mut layer.weight,
                        PROJECTION_TOL,
                        PROJECTION_MAX_ITERS,
                    );
                }
            }
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("loss = {epoch_loss}"),
            });
        }
        if layers.iter().any(|l| !l.weight.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                detail: "non-finite weights".into(),
            });
        }
    }

    let layers = layers
        .into_iter()
        .map(|l| AffineLayer::new(l.weight, l.bias, l.orthogonal))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Divergence {
            epoch: cfg.epochs,
            detail: e.to_string(),
        })?;
    LipschitzClassifier::new(layers)
}

/// Cross-entropy of `softmax(logits / t)` at `label`, and its gradient in the logits.
fn softmax_xent(logits: &[f64], label: usize, t: f64) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / t).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (logits[label] - max) / t;
    let grad = exps
        .iter()
        .enumerate()
        .map(|(j, e)| (e / z - f64::from(u8::from(j == label))) / t)
        .collect();
    (loss, grad)
}
