//! Unlearning procedures.
//!
//! Q-MUL relabels every forget sample with its *similar label*, the
//! non-true class whose predicted probability is closest to the true
//! class's, and trains on the relabelled set with per-sample loss weights
//! `alpha_f = G_r / (G_f + G_r)` for forget rows and
//! `alpha_r = G_f / (G_f + G_r)` for retain rows, where `G_f` and `G_r` are
//! the gradient norms of the mean loss on each subset, recomputed before
//! every epoch.
//!
//! Baselines: Retrain (from scratch on the retain set), FT (fine-tune on
//! the retain set), GA (gradient ascent on the forget set), RL (random
//! labels on the forget set, then train on everything), l1-sparse (FT with
//! an L1 penalty) and SalUn (RL restricted to the most salient weights).
//!
//! Every method is a deterministic function of its inputs and seed. The
//! minibatch order comes from one seeded stream and label draws from a
//! second, so methods that share a training set also share a batch order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Partition};
use crate::error::{Error, Result};
use crate::metrics::{gradient_norms, EpochDiagnostics, GradientNorms, NormEstimate};
use crate::nn::{
    full_gradient, lr_at, run_epoch, seeded_rng, Direction, EpochPlan, Gradients, LrSchedule,
    Model, ModelSpec, SeededRng, SgdConfig,
};
use crate::tensor::{dot, Tensor};

/// Sums below this are treated as a zero total gradient norm.
pub const AGR_EPS: f64 = 1e-12;
const LABEL_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Retrain,
    Ft,
    Ga,
    Rl,
    L1Sparse {
        gamma: f64,
    },
    Salun {
        sparsity: f64,
    },
    Qmul {
        /// Replace forget labels by similar labels (random labels if false).
        #[serde(default = "yes")]
        similar_labels: bool,
        /// Adaptive gradient reweighting (fixed 0.5/0.5 if false).
        #[serde(default = "yes")]
        reweight: bool,
    },
}

fn yes() -> bool {
    true
}

impl Method {
    pub fn qmul() -> Self {
        Method::Qmul {
            similar_labels: true,
            reweight: true,
        }
    }

    /// Short display name, also used for file names and seed derivation.
    pub fn name(&self) -> String {
        match self {
            Method::Retrain => "retrain".into(),
            Method::Ft => "ft".into(),
            Method::Ga => "ga".into(),
            Method::Rl => "rl".into(),
            Method::L1Sparse { .. } => "l1_sparse".into(),
            Method::Salun { .. } => "salun".into(),
            Method::Qmul {
                similar_labels,
                reweight,
            } => match (similar_labels, reweight) {
                (true, true) => "qmul".into(),
                (false, true) => "qmul_wo_sl".into(),
                (true, false) => "qmul_wo_agr".into(),
                (false, false) => "qmul_wo_sl_agr".into(),
            },
        }
    }

    /// Name as printed in result tables.
    pub fn display_name(&self) -> String {
        match self {
            Method::Retrain => "Retrain".into(),
            Method::Ft => "FT".into(),
            Method::Ga => "GA".into(),
            Method::Rl => "RL".into(),
            Method::L1Sparse { .. } => "l1-sparse".into(),
            Method::Salun { .. } => "SalUn".into(),
            Method::Qmul { .. } => match self.name().as_str() {
                "qmul" => "Q-MUL".into(),
                "qmul_wo_sl" => "Q-MUL w/o SL".into(),
                "qmul_wo_agr" => "Q-MUL w/o AGR".into(),
                _ => "Q-MUL w/o SL+AGR".into(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelRefresh {
    /// Re-derive forget labels at the start of every epoch.
    #[default]
    PerEpoch,
    /// Derive them once before the first epoch.
    Once,
}

fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    #[serde(flatten)]
    pub method: Method,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub label_refresh: LabelRefresh,
    /// Estimator of the per-epoch forget/retain gradient norms.
    #[serde(default)]
    pub grad_norm: NormEstimate,
    /// Seed of this run; the harness derives one per method when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl UnlearnConfig {
    pub fn new(method: Method, epochs: usize, learning_rate: f64) -> Self {
        Self {
            method,
            epochs,
            learning_rate,
            schedule: LrSchedule::Constant,
            batch_size: default_batch(),
            label_refresh: LabelRefresh::PerEpoch,
            grad_norm: NormEstimate::PerSample,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "unlearning learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        match self.method {
            Method::L1Sparse { gamma } if !(gamma.is_finite() && gamma >= 0.0) => Err(
                Error::InvalidConfig(format!("l1 strength must be non-negative, got {gamma}")),
            ),
            Method::Salun { sparsity } if !(sparsity > 0.0 && sparsity <= 1.0) => {
                Err(Error::InvalidConfig(format!(
                    "saliency ratio must lie in (0, 1], got {sparsity}"
                )))
            }
            _ => Ok(()),
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// Similar label of one sample: the class `k != label` minimising
/// `|p_k - p_label|`, lowest index on ties, with that distance.
pub fn similar_label(probs: &[f64], label: usize) -> Result<(usize, f64)> {
    if probs.len() < 2 {
        return Err(Error::InvalidConfig(
            "similar labels need at least two classes".into(),
        ));
    }
    if label >= probs.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: probs.len(),
            row: 0,
        });
    }
    let p_true = probs[label];
    let mut best: Option<(usize, f64)> = None;
    for (k, &p) in probs.iter().enumerate() {
        if k == label {
            continue;
        }
        let d = (p - p_true).abs();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    Ok(best.expect("at least one alternative class"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarLabelAssignment {
    /// Forget-set row indices, in partition order.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub distances: Vec<f64>,
}

/// Builds the unlearning label vector: forget rows get their similar label
/// under `model`, retain rows keep theirs.
pub fn assign_similar_labels(
    model: &Model,
    dataset: &LabeledDataset,
    partition: &Partition,
) -> Result<(Vec<usize>, SimilarLabelAssignment)> {
    if dataset.classes() < 2 {
        return Err(Error::InvalidConfig(
            "similar labels need at least two classes".into(),
        ));
    }
    let mut labels = dataset.labels().to_vec();
    let mut out = SimilarLabelAssignment {
        indices: partition.forget.clone(),
        labels: Vec::with_capacity(partition.forget.len()),
        distances: Vec::with_capacity(partition.forget.len()),
    };
    if partition.forget.is_empty() {
        return Ok((labels, out));
    }
    let probs = model.predict_proba(&dataset.features().select_rows(&partition.forget)?)?;
    for (r, &i) in partition.forget.iter().enumerate() {
        let (k, d) = similar_label(probs.row(r), labels[i])?;
        labels[i] = k;
        out.labels.push(k);
        out.distances.push(d);
    }
    Ok((labels, out))
}

/// Uniform draw from `{0..classes} \ {label}`.
pub fn random_other_label<R: Rng + ?Sized>(label: usize, classes: usize, rng: &mut R) -> usize {
    let r = rng.random_range(0..classes - 1);
    if r >= label {
        r + 1
    } else {
        r
    }
}

pub fn assign_random_labels<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    partition: &Partition,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if dataset.classes() < 2 {
        return Err(Error::InvalidConfig(
            "random labels need at least two classes".into(),
        ));
    }
    let mut labels = dataset.labels().to_vec();
    for &i in &partition.forget {
        labels[i] = random_other_label(labels[i], dataset.classes(), rng);
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgrWeights {
    pub alpha_f: f64,
    pub alpha_r: f64,
    pub g_f: f64,
    pub g_r: f64,
}

impl AgrWeights {
    pub fn from_norms(g_f: f64, g_r: f64) -> Self {
        let total = g_f + g_r;
        let (alpha_f, alpha_r) = if total < AGR_EPS {
            (0.5, 0.5)
        } else {
            (g_r / total, g_f / total)
        };
        Self {
            alpha_f,
            alpha_r,
            g_f,
            g_r,
        }
    }
}

/// Weights from the full-subset gradient norms under `labels`.
pub fn compute_agr_weights(
    model: &mut Model,
    features: &Tensor,
    labels: &[usize],
    partition: &Partition,
    estimate: NormEstimate,
) -> Result<AgrWeights> {
    let GradientNorms { g_f, g_r } = gradient_norms(model, features, labels, partition, estimate)?;
    Ok(AgrWeights::from_norms(g_f, g_r))
}

/// Result of an unlearning run.
#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub model: Model,
    pub diagnostics: Vec<EpochDiagnostics>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum LabelSource {
    Original,
    Random,
    Similar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Weighting {
    /// Constant weights `(alpha_f, alpha_r)` as reported in diagnostics;
    /// the loss itself uses unit weights on the trained rows.
    Reported(f64, f64),
    Fixed(f64, f64),
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rows {
    Retain,
    Forget,
    All,
}

struct Recipe {
    rows: Rows,
    direction: Direction,
    labels: LabelSource,
    weighting: Weighting,
    l1: f64,
    mask: Option<Vec<bool>>,
}

fn run_recipe(
    model: &Model,
    dataset: &LabeledDataset,
    partition: &Partition,
    cfg: &UnlearnConfig,
    recipe: &Recipe,
) -> Result<UnlearnOutcome> {
    if partition.len() != dataset.len() {
        return Err(Error::shape(
            "partition",
            &[dataset.len()],
            &[partition.len()],
        ));
    }
    let mut model = model.clone();
    let features = dataset.features();
    let mut shuffle_rng = seeded_rng(cfg.seed());
    let mut label_rng = seeded_rng(cfg.seed() ^ LABEL_STREAM);
    let rows: Vec<usize> = match recipe.rows {
        Rows::Retain => partition.retain.clone(),
        Rows::Forget => partition.forget.clone(),
        Rows::All => (0..dataset.len()).collect(),
    };
    let forget_mask = partition.forget_mask();
    let mut labels = dataset.labels().to_vec();
    let mut diagnostics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if epoch == 0 || cfg.label_refresh == LabelRefresh::PerEpoch {
            labels = relabel(&model, dataset, partition, recipe.labels, &mut label_rng)?;
        }
        let norms = if partition.forget.is_empty() || partition.retain.is_empty() {
            GradientNorms { g_f: 0.0, g_r: 0.0 }
        } else {
            gradient_norms(&mut model, features, &labels, partition, cfg.grad_norm)?
        };
        let (alpha_f, alpha_r, weights) = match recipe.weighting {
            Weighting::Reported(af, ar) => (af, ar, None),
            Weighting::Fixed(af, ar) => (af, ar, Some((af, ar))),
            Weighting::Adaptive => {
                let w = AgrWeights::from_norms(norms.g_f, norms.g_r);
                (w.alpha_f, w.alpha_r, Some((w.alpha_f, w.alpha_r)))
            }
        };
        diagnostics.push(EpochDiagnostics {
            epoch,
            g_f: norms.g_f,
            g_r: norms.g_r,
            ratio: norms.ratio(),
            alpha_f,
            alpha_r,
        });
        let sample_weights: Option<Vec<f64>> = weights.map(|(af, ar)| {
            forget_mask
                .iter()
                .map(|&f| if f { af } else { ar })
                .collect()
        });
        let plan = EpochPlan {
            indices: &rows,
            labels: &labels,
            weights: sample_weights.as_deref(),
            batch_size: cfg.batch_size,
            learning_rate: lr_at(cfg.learning_rate, cfg.schedule, epoch, cfg.epochs),
            direction: recipe.direction,
        };
        run_epoch(&mut model, features, &plan, &mut shuffle_rng, |m, g| {
            if recipe.l1 > 0.0 {
                add_l1_subgradient(m, g, recipe.l1);
            }
            if let Some(mask) = &recipe.mask {
                apply_mask(g, mask);
            }
        })?;
    }
    Ok(UnlearnOutcome { model, diagnostics })
}

fn relabel(
    model: &Model,
    dataset: &LabeledDataset,
    partition: &Partition,
    source: LabelSource,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    match source {
        LabelSource::Original => Ok(dataset.labels().to_vec()),
        LabelSource::Random => assign_random_labels(dataset, partition, rng),
        LabelSource::Similar => assign_similar_labels(model, dataset, partition).map(|(l, _)| l),
    }
}

/// Adds `gamma * sign(w)` to every parameter gradient; the subgradient at
/// exactly zero is zero.
fn add_l1_subgradient(model: &Model, grads: &mut Gradients, gamma: f64) {
    for (p, g) in model.params().into_iter().zip(grads.params.iter_mut()) {
        for (&w, gv) in p.data().iter().zip(g.data_mut()) {
            if w > 0.0 {
                *gv += gamma;
            } else if w < 0.0 {
                *gv -= gamma;
            }
        }
    }
}

fn apply_mask(grads: &mut Gradients, mask: &[bool]) {
    let mut offset = 0;
    for g in &mut grads.params {
        let n = g.len();
        for (gv, &keep) in g.data_mut().iter_mut().zip(&mask[offset..offset + n]) {
            if !keep {
                *gv = 0.0;
            }
        }
        offset += n;
    }
}

/// Flat-parameter mask selecting the `ceil(ratio * P)` entries with the
/// largest `|grad|` of the forget-set loss; ties go to the lower flat index.
pub fn saliency_mask(
    model: &Model,
    dataset: &LabeledDataset,
    partition: &Partition,
    ratio: f64,
) -> Result<Vec<bool>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "saliency ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let mut scratch = model.clone();
    let grads = full_gradient(
        &mut scratch,
        dataset.features(),
        dataset.labels(),
        &partition.forget,
    )?;
    let magnitude: Vec<f64> = grads.flatten().iter().map(|v| v.abs()).collect();
    let count = ((ratio * magnitude.len() as f64).ceil() as usize).clamp(1, magnitude.len());
    let mut order: Vec<usize> = (0..magnitude.len()).collect();
    order.sort_by(|&a, &b| magnitude[b].total_cmp(&magnitude[a]).then(a.cmp(&b)));
    let mut mask = vec![false; magnitude.len()];
    for &i in &order[..count] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Fresh model trained on `indices`; learnable activation scales are
/// calibrated on up to 512 of those rows first.
pub fn train_from_scratch(
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    indices: &[usize],
    sgd: &SgdConfig,
) -> Result<Model> {
    if indices.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let calibration = dataset
        .features()
        .select_rows(&indices[..indices.len().min(512)])?;
    let mut model = spec.build(
        dataset.dim(),
        dataset.classes(),
        sgd.seed,
        Some(&calibration),
    )?;
    crate::nn::train(
        &mut model,
        dataset.features(),
        dataset.labels(),
        indices,
        sgd,
    )?;
    Ok(model)
}

/// Retrain from scratch on the retain rows with the original training
/// recipe.
pub fn retrain(
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    partition: &Partition,
    sgd: &SgdConfig,
) -> Result<Model> {
    train_from_scratch(spec, dataset, &partition.retain, sgd)
}

pub fn finetune_ft(
    model: &Model,
    dataset: &LabeledDataset,
    partition: &Partition,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    run_recipe(model, dataset, partition, cfg, &ft_recipe(0.0))
}

fn ft_recipe(l1: f64) -> Recipe {
    Recipe {
        rows: Rows::Retain,
        direction: Direction::Descent,
        labels: LabelSource::Original,
        weighting: Weighting::Reported(0.0, 1.0),
        l1,
        mask: None,
    }
}

/// Gradient ascent on the forget rows. Diagnostics report the forget
/// weight as -1.
pub fn gradient_ascent_ga(
    model: &Model,
    dataset: &LabeledDataset,
    partition: &Partition,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    let recipe = Recipe {
        rows: Rows::Forget,
        direction: Direction::Ascent,
        labels: LabelSource::Original,
        weighting: Weighting::Reported(-1.0, 0.0),
        l1: 0.0,
        mask: None,
    };
    run_recipe(model, dataset, partition, cfg, &recipe)
}

fn rl_recipe(mask: Option<Vec<bool>>) -> Recipe {
    Recipe {
        rows: Rows::All,
        direction: Direction::Descent,
        labels: LabelSource::Random,
        weighting: Weighting::Reported(1.0, 1.0),
        l1: 0.0,
        mask,
    }
}

pub fn random_labels_rl(
    model: &Model,
    dataset: &LabeledDataset,
    partition: &Partition,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    run_recipe(model, dataset, partition, cfg, &rl_recipe(None))
}

pub fn l1_sparse(
    model: &Model,
    dataset: &LabeledDataset,
    partition: &Partition,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    let gamma = match cfg.method {
        Method::L1Sparse { gamma } => gamma,
        _ => 0.0,
    };
    run_recipe(model, dataset, partition, cfg, &ft_recipe(gamma))
}

pub fn salun(
    model: &Model,
    dataset: &LabeledDataset,
    partition: &Partition,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    let ratio = match cfg.method {
        Method::Salun { sparsity } => sparsity,
        _ => 1.0,
    };
    let mask = saliency_mask(model, dataset, partition, ratio)?;
    run_recipe(model, dataset, partition, cfg, &rl_recipe(Some(mask)))
}

pub fn qmul_unlearn(
    model: &Model,
    dataset: &LabeledDataset,
    partition: &Partition,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    let Method::Qmul {
        similar_labels,
        reweight,
    } = cfg.method
    else {
        return Err(Error::InvalidConfig(format!(
            "qmul_unlearn called with method {}",
            cfg.method.name()
        )));
    };
    if partition.forget.is_empty() || partition.retain.is_empty() {
        return Err(Error::Empty("forget or retain subset"));
    }
    let recipe = Recipe {
        rows: Rows::All,
        direction: Direction::Descent,
        labels: if similar_labels {
            LabelSource::Similar
        } else {
            LabelSource::Random
        },
        weighting: if reweight {
            Weighting::Adaptive
        } else {
            Weighting::Fixed(0.5, 0.5)
        },
        l1: 0.0,
        mask: None,
    };
    run_recipe(model, dataset, partition, cfg, &recipe)
}

/// Everything [`unlearn`] needs to run the Retrain reference.
#[derive(Debug, Clone)]
pub struct RetrainRecipe {
    pub spec: ModelSpec,
    pub sgd: SgdConfig,
}

/// Dispatches on `cfg.method`. Retrain ignores `model` and the epoch and
/// learning-rate fields of `cfg`, using `recipe` with `cfg`'s seed instead.
pub fn unlearn(
    model: &Model,
    dataset: &LabeledDataset,
    partition: &Partition,
    cfg: &UnlearnConfig,
    recipe: &RetrainRecipe,
) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    match cfg.method {
        Method::Retrain => {
            let sgd = SgdConfig {
                seed: cfg.seed(),
                ..recipe.sgd
            };
            let model = retrain(&recipe.spec, dataset, partition, &sgd)?;
            Ok(UnlearnOutcome {
                model,
                diagnostics: Vec::new(),
            })
        }
        Method::Ft => finetune_ft(model, dataset, partition, cfg),
        Method::Ga => gradient_ascent_ga(model, dataset, partition, cfg),
        Method::Rl => random_labels_rl(model, dataset, partition, cfg),
        Method::L1Sparse { .. } => l1_sparse(model, dataset, partition, cfg),
        Method::Salun { .. } => salun(model, dataset, partition, cfg),
        Method::Qmul { .. } => qmul_unlearn(model, dataset, partition, cfg),
    }
}

/// Gradient of `log p(class | x)` w.r.t. the flat parameters for one row.
pub fn log_prob_gradient(model: &Model, x: &[f64], class: usize) -> Result<Vec<f64>> {
    let mut scratch = model.clone();
    let row = Tensor::new(vec![1, x.len()], x.to_vec())?;
    let out = scratch.forward_train(&row)?;
    let k = out.cols();
    if class >= k {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: k,
            row: 0,
        });
    }
    let probs = crate::tensor::softmax_rows(&out);
    let upstream: Vec<f64> = (0..k)
        .map(|j| f64::from(u8::from(j == class)) - probs.row(0)[j])
        .collect();
    let grads = scratch.backward(&Tensor::new(vec![1, k], upstream)?)?;
    Ok(grads.flatten())
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelAlignment {
    pub index: usize,
    pub label: usize,
    pub similar_label: usize,
    pub random_label: usize,
    /// Cosine between the true-label and similar-label gradients.
    pub cos_sl: f64,
    /// Cosine between the true-label and random-label gradients.
    pub cos_rl: f64,
    /// A zero-norm gradient made one of the cosines undefined (reported 0).
    pub degenerate: bool,
}

/// Per forget sample, how well the gradients of `log p(k_sl | x)` and of
/// `log p(k_rl | x)` align with that of `log p(y | x)`.
pub fn measure_label_gradient_alignment(
    model: &Model,
    dataset: &LabeledDataset,
    partition: &Partition,
    seed: u64,
) -> Result<Vec<LabelAlignment>> {
    let (_, sl) = assign_similar_labels(model, dataset, partition)?;
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(sl.indices.len());
    for (&i, &k_sl) in sl.indices.iter().zip(&sl.labels) {
        let y = dataset.labels()[i];
        let k_rl = random_other_label(y, dataset.classes(), &mut rng);
        let x = dataset.features().row(i);
        let g_y = log_prob_gradient(model, x, y)?;
        let c_sl = cosine(&g_y, &log_prob_gradient(model, x, k_sl)?);
        let c_rl = cosine(&g_y, &log_prob_gradient(model, x, k_rl)?);
        out.push(LabelAlignment {
            index: i,
            label: y,
            similar_label: k_sl,
            random_label: k_rl,
            cos_sl: c_sl.unwrap_or(0.0),
            cos_rl: c_rl.unwrap_or(0.0),
            degenerate: c_sl.is_none() || c_rl.is_none(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_gaussian_blobs, split, BlobSpec, SplitMode, SplitSpec};
    use crate::nn::Layer;

    fn toy() -> (LabeledDataset, Partition, Model) {
        let g = generate_gaussian_blobs(
            &BlobSpec {
                classes: 3,
                per_class: 30,
                test_per_class: 5,
                dim: 4,
                spread: 0.4,
            },
            7,
        )
        .unwrap();
        let p = split(
            &g.train,
            &SplitSpec {
                mode: SplitMode::RandomFraction { fraction: 0.2 },
                seed: 1,
            },
        )
        .unwrap();
        let spec = ModelSpec {
            hidden: vec![8],
            quant: None,
        };
        let sgd = SgdConfig {
            learning_rate: 0.1,
            schedule: LrSchedule::Constant,
            batch_size: 16,
            epochs: 5,
            seed: 3,
        };
        let all: Vec<usize> = (0..g.train.len()).collect();
        let m = train_from_scratch(&spec, &g.train, &all, &sgd).unwrap();
        (g.train, p, m)
    }

    fn cfg(method: Method, epochs: usize, lr: f64) -> UnlearnConfig {
        UnlearnConfig {
            batch_size: 16,
            seed: Some(5),
            ..UnlearnConfig::new(method, epochs, lr)
        }
    }

    #[test]
    fn similar_label_examples() {
        let (k, d) = similar_label(&[0.1, 0.6, 0.25, 0.05], 1).unwrap();
        assert_eq!(k, 2);
        assert!((d - 0.35).abs() < 1e-12);
        assert_eq!(similar_label(&[0.3, 0.4, 0.3], 1).unwrap().0, 0);
        assert!(similar_label(&[1.0], 0).is_err());
        assert!(similar_label(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn similar_labels_leave_retain_untouched() {
        let (ds, p, m) = toy();
        let (labels, sl) = assign_similar_labels(&m, &ds, &p).unwrap();
        for &i in &p.retain {
            assert_eq!(labels[i], ds.labels()[i]);
        }
        for (&i, &k) in sl.indices.iter().zip(&sl.labels) {
            assert_ne!(k, ds.labels()[i]);
            assert_eq!(labels[i], k);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let ds = LabeledDataset::new(Tensor::zeros(&[2, 1]), vec![0, 0], 1).unwrap();
        let m = Model::new(vec![Layer::linear(Tensor::zeros(&[1, 1]), None).unwrap()]).unwrap();
        let p = Partition {
            forget: vec![0],
            retain: vec![1],
        };
        assert!(assign_similar_labels(&m, &ds, &p).is_err());
    }

    #[test]
    fn agr_weight_examples() {
        let w = AgrWeights::from_norms(3.0, 1.0);
        assert_eq!((w.alpha_f, w.alpha_r), (0.25, 0.75));
        let w = AgrWeights::from_norms(2.0, 2.0);
        assert_eq!((w.alpha_f, w.alpha_r), (0.5, 0.5));
        let w = AgrWeights::from_norms(0.0, 0.0);
        assert_eq!((w.alpha_f, w.alpha_r), (0.5, 0.5));
    }

    #[test]
    fn random_label_exclusion() {
        let mut rng = seeded_rng(0);
        for _ in 0..200 {
            assert_eq!(random_other_label(0, 2, &mut rng), 1);
            assert_eq!(random_other_label(1, 2, &mut rng), 0);
            let y = rng.random_range(0..7);
            assert_ne!(random_other_label(y, 7, &mut rng), y);
        }
    }

    #[test]
    fn rl_is_seeded() {
        let (ds, p, m) = toy();
        let a = random_labels_rl(&m, &ds, &p, &cfg(Method::Rl, 2, 0.05)).unwrap();
        let b = random_labels_rl(&m, &ds, &p, &cfg(Method::Rl, 2, 0.05)).unwrap();
        assert_eq!(a.model.fingerprint(), b.model.fingerprint());
        let c = random_labels_rl(
            &m,
            &ds,
            &p,
            &UnlearnConfig {
                seed: Some(6),
                ..cfg(Method::Rl, 2, 0.05)
            },
        )
        .unwrap();
        assert_ne!(a.model.fingerprint(), c.model.fingerprint());
    }

    #[test]
    fn zero_epochs_or_zero_lr_leave_model_unchanged() {
        let (ds, p, m) = toy();
        for method in [
            Method::Ft,
            Method::Ga,
            Method::Rl,
            Method::L1Sparse { gamma: 0.0 },
            Method::Salun { sparsity: 0.5 },
            Method::qmul(),
        ] {
            let out = unlearn(
                &m,
                &ds,
                &p,
                &cfg(method, 0, 0.1),
                &RetrainRecipe {
                    spec: ModelSpec {
                        hidden: vec![2],
                        quant: None,
                    },
                    sgd: SgdConfig {
                        learning_rate: 0.1,
                        schedule: LrSchedule::Constant,
                        batch_size: 4,
                        epochs: 1,
                        seed: 0,
                    },
                },
            )
            .unwrap();
            assert_eq!(out.model.fingerprint(), m.fingerprint(), "{method:?}");
            assert!(out.diagnostics.is_empty());

            let out = unlearn(
                &m,
                &ds,
                &p,
                &cfg(method, 1, 0.0),
                &RetrainRecipe {
                    spec: ModelSpec {
                        hidden: vec![2],
                        quant: None,
                    },
                    sgd: SgdConfig {
                        learning_rate: 0.1,
                        schedule: LrSchedule::Constant,
                        batch_size: 4,
                        epochs: 1,
                        seed: 0,
                    },
                },
            )
            .unwrap();
            assert_eq!(out.model.fingerprint(), m.fingerprint(), "{method:?}");
            assert_eq!(out.diagnostics.len(), 1);
        }
    }

    #[test]
    fn qmul_logs_balanced_weights() {
        let (ds, p, m) = toy();
        let out = qmul_unlearn(&m, &ds, &p, &cfg(Method::qmul(), 3, 0.05)).unwrap();
        assert_eq!(out.diagnostics.len(), 3);
        for (t, d) in out.diagnostics.iter().enumerate() {
            assert_eq!(d.epoch, t);
            assert!((d.alpha_f + d.alpha_r - 1.0).abs() < 1e-12);
            assert!((d.alpha_f * d.g_f - d.alpha_r * d.g_r).abs() <= 1e-9 * d.g_f.max(d.g_r));
        }
        assert!(qmul_unlearn(&m, &ds, &p, &cfg(Method::Rl, 1, 0.1)).is_err());
    }

    #[test]
    fn qmul_label_refresh_modes_differ() {
        let (ds, p, m) = toy();
        let per_epoch = qmul_unlearn(&m, &ds, &p, &cfg(Method::qmul(), 3, 0.2)).unwrap();
        let once = qmul_unlearn(
            &m,
            &ds,
            &p,
            &UnlearnConfig {
                label_refresh: LabelRefresh::Once,
                ..cfg(Method::qmul(), 3, 0.2)
            },
        )
        .unwrap();
        // identical first epoch, then labels may diverge
        assert_eq!(per_epoch.diagnostics[0], once.diagnostics[0]);
    }

    #[test]
    fn qmul_without_agr_is_halved_uniform_training() {
        let (ds, p, m) = toy();
        let ablation = qmul_unlearn(
            &m,
            &ds,
            &p,
            &UnlearnConfig {
                label_refresh: LabelRefresh::Once,
                ..cfg(
                    Method::Qmul {
                        similar_labels: true,
                        reweight: false,
                    },
                    3,
                    0.1,
                )
            },
        )
        .unwrap();
        let uniform = Recipe {
            rows: Rows::All,
            direction: Direction::Descent,
            labels: LabelSource::Similar,
            weighting: Weighting::Reported(1.0, 1.0),
            l1: 0.0,
            mask: None,
        };
        let reference = run_recipe(
            &m,
            &ds,
            &p,
            &UnlearnConfig {
                label_refresh: LabelRefresh::Once,
                ..cfg(Method::Rl, 3, 0.05)
            },
            &uniform,
        )
        .unwrap();
        assert_eq!(ablation.model.fingerprint(), reference.model.fingerprint());
    }

    #[test]
    fn ga_step_is_negated_forget_descent() {
        let (ds, p, m) = toy();
        let c = UnlearnConfig {
            batch_size: p.forget.len(),
            ..cfg(Method::Ga, 1, 0.1)
        };
        let ga = gradient_ascent_ga(&m, &ds, &p, &c).unwrap();
        let mut probe = m.clone();
        let g = full_gradient(&mut probe, ds.features(), ds.labels(), &p.forget).unwrap();
        let before = m.flat_params();
        let after = ga.model.flat_params();
        for ((a, b), gv) in after.iter().zip(&before).zip(g.flatten()) {
            assert!((a - (b + 0.1 * gv)).abs() < 1e-12);
        }
    }

    #[test]
    fn l1_single_weight_step() {
        let m = Model::new(vec![Layer::linear(Tensor::from_rows(&[vec![1.0]]).unwrap(), None).unwrap()])
            .unwrap();
        let mut g = Gradients::zeros_like(&m);
        add_l1_subgradient(&m, &mut g, 1.0);
        let mut m2 = m.clone();
        m2.sgd_step(&g, 0.1).unwrap();
        assert!((m2.params()[0].data()[0] - 0.9).abs() < 1e-15);

        let z = Model::new(vec![Layer::linear(Tensor::from_rows(&[vec![0.0]]).unwrap(), None).unwrap()])
            .unwrap();
        let mut g = Gradients::zeros_like(&z);
        add_l1_subgradient(&z, &mut g, 1.0);
        assert_eq!(g.params[0].data()[0], 0.0);
    }

    #[test]
    fn l1_shrinks_toward_zero() {
        let mut m = Model::new(vec![Layer::linear(
            Tensor::from_rows(&[vec![0.8, -0.6, 0.3]]).unwrap(),
            None,
        )
        .unwrap()])
        .unwrap();
        let mut prev: Vec<f64> = m.flat_params().iter().map(|v| v.abs()).collect();
        for _ in 0..5 {
            let mut g = Gradients::zeros_like(&m);
            add_l1_subgradient(&m, &mut g, 1.0);
            m.sgd_step(&g, 0.05).unwrap();
            let now: Vec<f64> = m.flat_params().iter().map(|v| v.abs()).collect();
            assert!(now.iter().zip(&prev).all(|(a, b)| a <= b));
            prev = now;
        }
    }

    #[test]
    fn saliency_mask_counts_and_ties() {
        let (ds, p, m) = toy();
        let total = m.param_count();
        for ratio in [0.1, 0.33, 0.5, 1.0] {
            let mask = saliency_mask(&m, &ds, &p, ratio).unwrap();
            let expected = (ratio * total as f64).ceil() as usize;
            assert_eq!(mask.iter().filter(|&&b| b).count(), expected);
        }
        // sort oracle: flat gradient magnitudes, stable order on ties
        let mut probe = m.clone();
        let mag: Vec<f64> = full_gradient(&mut probe, ds.features(), ds.labels(), &p.forget)
            .unwrap()
            .flatten()
            .iter()
            .map(|v| v.abs())
            .collect();
        let count = (0.25 * total as f64).ceil() as usize;
        let mut pairs: Vec<(f64, usize)> = mag.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut expected = vec![false; total];
        for &(_, i) in &pairs[..count] {
            expected[i] = true;
        }
        assert_eq!(saliency_mask(&m, &ds, &p, 0.25).unwrap(), expected);
        assert!(saliency_mask(&m, &ds, &p, 0.0).is_err());
    }

    #[test]
    fn salun_single_salient_weight() {
        let (ds, p, m) = toy();
        let ratio = 0.5 / m.param_count() as f64;
        let mask = saliency_mask(&m, &ds, &p, ratio).unwrap();
        assert_eq!(mask.iter().filter(|&&b| b).count(), 1);
        let out = salun(&m, &ds, &p, &cfg(Method::Salun { sparsity: ratio }, 3, 0.1)).unwrap();
        let before = m.flat_params();
        let after = out.model.flat_params();
        for (i, (a, b)) in after.iter().zip(&before).enumerate() {
            if !mask[i] {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert!(after.iter().zip(&before).any(|(a, b)| a != b));
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_none());
    }

    #[test]
    fn self_alignment_is_one() {
        let (ds, _, m) = toy();
        let x = ds.features().row(0);
        let g = log_prob_gradient(&m, x, ds.labels()[0]).unwrap();
        assert!((cosine(&g, &g).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_prob_gradient_matches_finite_difference() {
        let (ds, _, m) = toy();
        let x = ds.features().row(3);
        let g = log_prob_gradient(&m, x, 1).unwrap();
        let base = m.flat_params();
        let h = 1e-5;
        let logp = |params: &[f64]| {
            let mut mm = m.clone();
            mm.set_flat_params(params).unwrap();
            let row = Tensor::new(vec![1, x.len()], x.to_vec()).unwrap();
            mm.predict_proba(&row).unwrap().row(0)[1].ln()
        };
        for i in (0..base.len()).step_by(7) {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fd = (logp(&plus) - logp(&minus)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn config_json_shape() {
        let c: UnlearnConfig = serde_json::from_str(
            r#"{"method":"salun","sparsity":0.5,"epochs":10,"learning_rate":0.01}"#,
        )
        .unwrap();
        assert_eq!(c.method, Method::Salun { sparsity: 0.5 });
        assert_eq!(c.label_refresh, LabelRefresh::PerEpoch);
        let q: UnlearnConfig = serde_json::from_str(
            r#"{"method":"qmul","epochs":10,"learning_rate":0.01,"label_refresh":"once"}"#,
        )
        .unwrap();
        assert_eq!(q.method, Method::qmul());
        assert_eq!(q.label_refresh, LabelRefresh::Once);
        assert!(UnlearnConfig::new(Method::Salun { sparsity: 1.5 }, 1, 0.1)
            .validate()
            .is_err());
        assert!(UnlearnConfig::new(Method::L1Sparse { gamma: -1.0 }, 1, 0.1)
            .validate()
            .is_err());
    }
}
