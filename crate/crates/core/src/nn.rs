//! Dense feed-forward networks with hand-written backward passes.
//!
//! The layer vocabulary is fixed: `Linear`, `ReLU` and `Softmax`. Linear
//! layers may carry a weight quantizer (weights are fake-quantized at use
//! time from a latent full-precision copy) and ReLU layers may carry an
//! activation quantizer applied to their output.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quant::{calibrate_scale, QuantNode, QuantSpec};
use crate::tensor::{softmax_rows, Tensor};

/// Probability floor applied before taking a log in the loss.
pub const PROB_FLOOR: f64 = 1e-300;

/// The generator used for every seeded stream in the crate.
pub type SeededRng = Xoshiro256PlusPlus;

pub fn seeded_rng(seed: u64) -> SeededRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear {
        input: usize,
        output: usize,
        has_bias: bool,
    },
    Relu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    kind: LayerKind,
    /// `[out, in]`, row-major.
    weight: Option<Tensor>,
    bias: Option<Tensor>,
    /// Weight quantizer for `Linear`, output quantizer for `Relu`.
    quant: Option<QuantNode>,
}

impl Layer {
    pub fn linear(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::shape("linear weight", &[0, 0], weight.shape()));
        }
        let (output, input) = (weight.shape()[0], weight.shape()[1]);
        if let Some(b) = &bias {
            if b.shape() != [output] {
                return Err(Error::shape("linear bias", &[output], b.shape()));
            }
        }
        Ok(Self {
            kind: LayerKind::Linear {
                input,
                output,
                has_bias: bias.is_some(),
            },
            weight: Some(weight),
            bias,
            quant: None,
        })
    }

    pub fn relu() -> Self {
        Self {
            kind: LayerKind::Relu,
            weight: None,
            bias: None,
            quant: None,
        }
    }

    pub fn softmax() -> Self {
        Self {
            kind: LayerKind::Softmax,
            weight: None,
            bias: None,
            quant: None,
        }
    }

    pub fn with_quant(mut self, node: QuantNode) -> Result<Self> {
        if matches!(self.kind, LayerKind::Softmax) {
            return Err(Error::InvalidConfig(
                "softmax layers cannot be quantized".into(),
            ));
        }
        self.quant = Some(node);
        Ok(self)
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn weight(&self) -> Option<&Tensor> {
        self.weight.as_ref()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn quant(&self) -> Option<&QuantNode> {
        self.quant.as_ref()
    }

    fn effective_weight(&self) -> Result<Tensor> {
        let w = self.weight.as_ref().expect("linear layer has weights");
        match &self.quant {
            Some(q) => q.quantize(w),
            None => Ok(w.clone()),
        }
    }
}

/// Per-layer values saved by a training forward pass.
#[derive(Debug, Clone)]
enum LayerCache {
    Linear { input: Tensor, weight_used: Tensor },
    Relu { pre: Tensor, post: Tensor },
    Softmax { probs: Tensor },
}

#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    batch: usize,
}

/// Gradients aligned with [`Model::params`] and [`Model::quant_nodes`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    /// Step-size gradients, one per quantizer; zero for fixed-scale nodes.
    pub scales: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            params: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            scales: vec![0.0; model.quant_nodes().len()],
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) -> Result<()> {
        if self.params.len() != other.params.len() || self.scales.len() != other.scales.len() {
            return Err(Error::shape(
                "gradient accumulation",
                &[self.params.len(), self.scales.len()],
                &[other.params.len(), other.scales.len()],
            ));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.shape() != b.shape() {
                return Err(Error::shape("gradient accumulation", a.shape(), b.shape()));
            }
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += factor * y;
            }
        }
        for (a, b) in self.scales.iter_mut().zip(&other.scales) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn scale_by(&mut self, factor: f64) {
        for p in &mut self.params {
            for v in p.data_mut() {
                *v *= factor;
            }
        }
        for s in &mut self.scales {
            *s *= factor;
        }
    }

    /// Concatenation of every parameter gradient in flat order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }
}

/// Global L2 norm over all parameter gradients. Quantizer step-size
/// gradients are not model parameters and are excluded.
pub fn grad_norm(grads: &Gradients) -> f64 {
    grads.params.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<Layer>,
    cache: Option<ForwardCache>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Model {
    /// Validates that consecutive layer widths compose.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layer stack"));
        }
        let mut width: Option<usize> = None;
        for layer in &layers {
            if let LayerKind::Linear { input, output, .. } = layer.kind {
                if input == 0 || output == 0 {
                    return Err(Error::InvalidConfig(
                        "linear layers need positive widths".into(),
                    ));
                }
                if let Some(w) = width {
                    if w != input {
                        return Err(Error::shape("layer composition", &[w], &[input]));
                    }
                }
                width = Some(output);
            }
        }
        if width.is_none() {
            return Err(Error::InvalidConfig(
                "model needs at least one linear layer".into(),
            ));
        }
        Ok(Self {
            layers,
            cache: None,
        })
    }

    /// A ReLU MLP ending in a bias-carrying linear logit layer. Weights use
    /// He-uniform initialisation and zero biases. When `quant` is given,
    /// weights and/or post-ReLU activations get quantizers according to its
    /// target; learnable scales start from [`calibrate_scale`] on the initial
    /// weights and at 1 for activations until [`Model::calibrate`] runs.
    pub fn mlp<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        classes: usize,
        quant: Option<QuantSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        if let Some(q) = &quant {
            q.validate()?;
        }
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        if widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer widths must be positive, got {widths:?}"
            )));
        }
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            let weight = Tensor::new(vec![fan_out, fan_in], data)?;
            let mut linear = Layer::linear(weight, Some(Tensor::zeros(&[fan_out])))?;
            if let Some(q) = quant.filter(|q| q.target.weights()) {
                let s = calibrate_scale(linear.weight.as_ref().unwrap(), q.bits);
                linear = linear.with_quant(QuantNode::new(q, s)?)?;
            }
            layers.push(linear);
            if i + 2 < widths.len() {
                let mut relu = Layer::relu();
                if let Some(q) = quant.filter(|q| q.target.activations()) {
                    relu = relu.with_quant(QuantNode::new(q, 1.0)?)?;
                }
                layers.push(relu);
            }
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l.kind {
                LayerKind::Linear { input, .. } => Some(input),
                _ => None,
            })
            .expect("validated at construction")
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l.kind {
                LayerKind::Linear { output, .. } => Some(output),
                _ => None,
            })
            .expect("validated at construction")
    }

    pub fn is_quantized(&self) -> bool {
        self.layers.iter().any(|l| l.quant.is_some())
    }

    /// Parameters in flat order: each linear layer's weight, then its bias.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn quant_nodes(&self) -> Vec<&QuantNode> {
        self.layers.iter().filter_map(|l| l.quant.as_ref()).collect()
    }

    /// Flat parameter vector, same order as [`Model::params`].
    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect()
    }

    /// Overwrites parameters from a flat vector.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                "flat parameters",
                &[self.param_count()],
                &[flat.len()],
            ));
        }
        if let Some(index) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "parameter update",
                index,
            });
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// SHA-256 over parameter and scale bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.flat_params() {
            h.update(v.to_bits().to_le_bytes());
        }
        for q in self.quant_nodes() {
            h.update(q.scale().to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Re-initialises learnable scales from data: weight quantizers from the
    /// current latent weights, activation quantizers from the activations
    /// `batch` produces. Fixed scales are left alone.
    pub fn calibrate(&mut self, batch: &Tensor) -> Result<()> {
        let mut x = self.check_input(batch)?.clone();
        for layer in &mut self.layers {
            match layer.kind {
                LayerKind::Linear { .. } => {
                    if let Some(q) = layer.quant.as_mut() {
                        let s = calibrate_scale(layer.weight.as_ref().unwrap(), q.bits());
                        q.set_scale(s);
                    }
                    x = linear_forward(&x, &layer.effective_weight()?, layer.bias.as_ref())?;
                }
                LayerKind::Relu => {
                    x = x.map(|v| v.max(0.0));
                    if let Some(q) = layer.quant.as_mut() {
                        q.set_scale(calibrate_scale(&x, q.bits()));
                        x = q.quantize(&x)?;
                    }
                }
                LayerKind::Softmax => x = softmax_rows(&x),
            }
        }
        Ok(())
    }

    fn check_input<'a>(&self, batch: &'a Tensor) -> Result<&'a Tensor> {
        let d = self.input_dim();
        if batch.shape().len() != 2 || batch.shape()[1] != d {
            return Err(Error::shape("model input", &[batch.rows(), d], batch.shape()));
        }
        Ok(batch)
    }

    /// Inference forward pass; returns the output of the last layer.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut x = self.check_input(batch)?.clone();
        for layer in &self.layers {
            x = match layer.kind {
                LayerKind::Linear { .. } => {
                    linear_forward(&x, &layer.effective_weight()?, layer.bias.as_ref())?
                }
                LayerKind::Relu => {
                    let a = x.map(|v| v.max(0.0));
                    match &layer.quant {
                        Some(q) => q.quantize(&a)?,
                        None => a,
                    }
                }
                LayerKind::Softmax => softmax_rows(&x),
            };
        }
        Ok(x)
    }

    /// Class probabilities: the forward output if the stack already ends in
    /// a softmax, otherwise the softmax of the logits.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        let out = self.forward(batch)?;
        if matches!(self.layers.last().map(|l| l.kind), Some(LayerKind::Softmax)) {
            Ok(out)
        } else {
            Ok(softmax_rows(&out))
        }
    }

    /// Training forward pass; keeps the cache needed by [`Model::backward`].
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<Tensor> {
        let mut x = self.check_input(batch)?.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = match layer.kind {
                LayerKind::Linear { .. } => {
                    let w = layer.effective_weight()?;
                    let out = linear_forward(&x, &w, layer.bias.as_ref())?;
                    caches.push(LayerCache::Linear {
                        input: x,
                        weight_used: w,
                    });
                    out
                }
                LayerKind::Relu => {
                    let post = x.map(|v| v.max(0.0));
                    let out = match &layer.quant {
                        Some(q) => q.quantize(&post)?,
                        None => post.clone(),
                    };
                    caches.push(LayerCache::Relu { pre: x, post });
                    out
                }
                LayerKind::Softmax => {
                    let probs = softmax_rows(&x);
                    caches.push(LayerCache::Softmax {
                        probs: probs.clone(),
                    });
                    probs
                }
            };
        }
        self.cache = Some(ForwardCache {
            layers: caches,
            batch: batch.rows(),
        });
        Ok(x)
    }

    /// Backpropagates `upstream` (gradient w.r.t. the forward output) through
    /// the cached pass. Consumes the cache.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Gradients> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        let out_shape = [cache.batch, self.output_dim()];
        if upstream.shape() != out_shape {
            return Err(Error::shape("backward upstream", &out_shape, upstream.shape()));
        }
        let mut param_grads: Vec<Tensor> = Vec::new();
        let mut scale_grads: Vec<f64> = Vec::new();
        let mut grad = upstream.clone();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            match lc {
                LayerCache::Linear { input, weight_used } => {
                    let grad_wq = grad.transposed_matmul(input)?;
                    if let Some(b) = &layer.bias {
                        let gb = grad.sum_rows()?;
                        debug_assert_eq!(gb.shape(), b.shape());
                        param_grads.push(gb);
                    }
                    let w = layer.weight.as_ref().unwrap();
                    let grad_w = match &layer.quant {
                        Some(q) => {
                            scale_grads.push(if q.is_learnable() {
                                q.lsq_scale_grad(w, &grad_wq)?
                            } else {
                                0.0
                            });
                            q.ste_backward(w, &grad_wq)?
                        }
                        None => grad_wq,
                    };
                    param_grads.push(grad_w);
                    grad = grad.matmul(weight_used)?;
                }
                LayerCache::Relu { pre, post } => {
                    if let Some(q) = &layer.quant {
                        scale_grads.push(if q.is_learnable() {
                            q.lsq_scale_grad(post, &grad)?
                        } else {
                            0.0
                        });
                        grad = q.ste_backward(post, &grad)?;
                    }
                    grad = grad.zip_map(pre, |g, z| if z > 0.0 { g } else { 0.0 })?;
                }
                LayerCache::Softmax { probs } => {
                    let c = probs.cols();
                    let mut out = grad.clone();
                    for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
                        let p = probs.row(r);
                        let inner: f64 = row.iter().zip(p).map(|(g, p)| g * p).sum();
                        for (g, &pv) in row.iter_mut().zip(p) {
                            *g = pv * (*g - inner);
                        }
                    }
                    grad = out;
                }
            }
        }
        param_grads.reverse();
        scale_grads.reverse();
        Ok(Gradients {
            params: param_grads,
            scales: scale_grads,
        })
    }

    /// `w <- w - lr * g` on the latent weights; learnable scales take the
    /// same step and are clamped positive.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) -> Result<()> {
        let nodes = self.quant_nodes().len();
        if grads.params.len() != self.params().len() || grads.scales.len() != nodes {
            return Err(Error::shape(
                "sgd gradients",
                &[self.params().len(), nodes],
                &[grads.params.len(), grads.scales.len()],
            ));
        }
        for (p, g) in self.params_mut().into_iter().zip(&grads.params) {
            if p.shape() != g.shape() {
                return Err(Error::shape("sgd gradient", p.shape(), g.shape()));
            }
            for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= learning_rate * gv;
            }
        }
        for (q, &ds) in self
            .layers
            .iter_mut()
            .filter_map(|l| l.quant.as_mut())
            .zip(&grads.scales)
        {
            if q.is_learnable() {
                q.set_scale(q.scale() - learning_rate * ds);
            }
        }
        if let Some(index) = self.flat_params().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "sgd step",
                index,
            });
        }
        Ok(())
    }

}

/// Architecture of a ReLU MLP classifier, independent of the data it is
/// built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub quant: Option<QuantSpec>,
}

impl ModelSpec {
    /// Fresh seeded initialisation. Learnable activation scales are
    /// calibrated on `calibration` when given.
    pub fn build(
        &self,
        input: usize,
        classes: usize,
        seed: u64,
        calibration: Option<&Tensor>,
    ) -> Result<Model> {
        let mut rng = seeded_rng(seed);
        let mut model = Model::mlp(input, &self.hidden, classes, self.quant, &mut rng)?;
        if let Some(x) = calibration {
            model.calibrate(x)?;
        }
        Ok(model)
    }

    /// Same architecture without quantizers.
    pub fn float_twin(&self) -> Self {
        Self {
            hidden: self.hidden.clone(),
            quant: None,
        }
    }
}

fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut out = x.matmul_transposed(w)?;
    if let Some(b) = b {
        let n = b.len();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

/// Weighted mean cross-entropy `(1/B) * sum_i w_i * -log softmax(z_i)[y_i]`
/// and its gradient w.r.t. the logits. The log is floored at
/// [`PROB_FLOOR`]; the returned gradient is that of the unfloored loss.
pub fn cross_entropy_loss(
    logits: &Tensor,
    labels: &[usize],
    sample_weights: &[f64],
) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::shape("logits", &[0, 0], logits.shape()));
    }
    let (b, k) = (logits.rows(), logits.cols());
    if labels.len() != b || sample_weights.len() != b {
        return Err(Error::shape(
            "loss targets",
            &[b, b],
            &[labels.len(), sample_weights.len()],
        ));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: k,
            row,
        });
    }
    if sample_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidConfig(
            "sample weights must be finite and non-negative".into(),
        ));
    }
    let max_nll = -PROB_FLOOR.ln();
    let inv_b = 1.0 / b as f64;
    let mut grad = Tensor::zeros(&[b, k]);
    let mut loss = 0.0;
    for i in 0..b {
        let z = logits.row(i);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let nll = (lse - z[labels[i]]).min(max_nll);
        let w = sample_weights[i];
        loss += w * nll;
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (z[j] - lse).exp();
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            *gj = w * inv_b * (p - target);
        }
    }
    Ok((loss * inv_b, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr_t = lr_0 * (1 + cos(pi * t / T)) / 2` with `t` the epoch index.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.learning_rate, self.schedule, epoch, self.epochs)
    }
}

pub fn lr_at(base: f64, schedule: LrSchedule, epoch: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let t = epoch as f64 / total.max(1) as f64;
            base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Shuffles `indices` in place and splits them into batches.
pub fn shuffled_batches<R: Rng + ?Sized>(
    indices: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Sign applied to the gradient before the SGD step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

/// Options for one pass over a subset of the data.
pub struct EpochPlan<'a> {
    pub indices: &'a [usize],
    pub labels: &'a [usize],
    /// Per-sample loss weights indexed like `labels`; `None` means all ones.
    pub weights: Option<&'a [f64]>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub direction: Direction,
}

/// Runs one shuffled epoch of minibatch SGD. `adjust` may edit each batch's
/// gradient (masking, penalties) before the step.
pub fn run_epoch<R: Rng + ?Sized>(
    model: &mut Model,
    features: &Tensor,
    plan: &EpochPlan<'_>,
    rng: &mut R,
    mut adjust: impl FnMut(&Model, &mut Gradients),
) -> Result<f64> {
    let batches = shuffled_batches(plan.indices, plan.batch_size, rng);
    let mut total = 0.0;
    for batch in &batches {
        let x = features.select_rows(batch)?;
        let y: Vec<usize> = batch.iter().map(|&i| plan.labels[i]).collect();
        let w: Vec<f64> = match plan.weights {
            Some(ws) => batch.iter().map(|&i| ws[i]).collect(),
            None => vec![1.0; batch.len()],
        };
        let logits = model.forward_train(&x)?;
        let (loss, up) = cross_entropy_loss(&logits, &y, &w)?;
        let mut grads = model.backward(&up)?;
        if plan.direction == Direction::Ascent {
            grads.scale_by(-1.0);
        }
        adjust(model, &mut grads);
        model.sgd_step(&grads, plan.learning_rate)?;
        total += loss * batch.len() as f64;
    }
    Ok(total / plan.indices.len().max(1) as f64)
}

/// Plain mini-batch training on the given rows with unit weights.
pub fn train(
    model: &mut Model,
    features: &Tensor,
    labels: &[usize],
    indices: &[usize],
    config: &SgdConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed);
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let plan = EpochPlan {
            indices,
            labels,
            weights: None,
            batch_size: config.batch_size,
            learning_rate: config.lr_at(epoch),
            direction: Direction::Descent,
        };
        losses.push(run_epoch(model, features, &plan, &mut rng, |_, _| {})?);
    }
    Ok(losses)
}

/// Gradient of the weighted mean loss over `indices`, accumulated in chunks
/// so the result equals the single full-batch gradient.
pub fn full_gradient(
    model: &mut Model,
    features: &Tensor,
    labels: &[usize],
    indices: &[usize],
) -> Result<Gradients> {
    if indices.is_empty() {
        return Err(Error::Empty("gradient subset"));
    }
    const CHUNK: usize = 512;
    let mut acc = Gradients::zeros_like(model);
    for chunk in indices.chunks(CHUNK) {
        let x = features.select_rows(chunk)?;
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let logits = model.forward_train(&x)?;
        let (_, up) = cross_entropy_loss(&logits, &y, &vec![1.0; chunk.len()])?;
        let g = model.backward(&up)?;
        acc.add_scaled(&g, chunk.len() as f64 / indices.len() as f64)?;
    }
    Ok(acc)
}

/// Norm of each listed row's own loss gradient (parameters only), in
/// `indices` order.
pub fn per_sample_grad_norms(
    model: &mut Model,
    features: &Tensor,
    labels: &[usize],
    indices: &[usize],
) -> Result<Vec<f64>> {
    indices
        .iter()
        .map(|&i| {
            let x = features.select_rows(&[i])?;
            let logits = model.forward_train(&x)?;
            let (_, up) = cross_entropy_loss(&logits, &[labels[i]], &[1.0])?;
            Ok(grad_norm(&model.backward(&up)?))
        })
        .collect()
}

/// Mean cross-entropy over the given rows, without gradients.
pub fn mean_loss(model: &Model, features: &Tensor, labels: &[usize], indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Empty("loss subset"));
    }
    let x = features.select_rows(indices)?;
    let y: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
    let logits = model.forward(&x)?;
    let (loss, _) = cross_entropy_loss(&logits, &y, &vec![1.0; indices.len()])?;
    Ok(loss)
}
