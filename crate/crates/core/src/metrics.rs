//! Evaluation: forget/retain/test accuracy, a loss-threshold membership
//! inference attack, gradient-norm diagnostics and the average gap against
//! a reference run.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Partition};
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy_loss, full_gradient, grad_norm, per_sample_grad_norms, seeded_rng, Model,
};
use crate::tensor::Tensor;

/// Below this gradient norm the retain side is treated as zero.
pub const NORM_EPS: f64 = 1e-12;
/// Minimum size of each MIA calibration set.
pub const MIA_MIN_CALIBRATION: usize = 50;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Percentage of rows whose argmax equals the label.
pub fn accuracy(model: &Model, features: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let out = model.forward(features)?;
    if out.rows() != labels.len() {
        return Err(Error::shape("accuracy labels", &[out.rows()], &[labels.len()]));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(out.row(i)) == y)
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

pub fn accuracy_on(model: &Model, ds: &LabeledDataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let sub = ds.subset(idx)?;
    accuracy(model, sub.features(), sub.labels())
}

/// Unweighted cross-entropy of every row.
pub fn per_sample_losses(model: &Model, ds: &LabeledDataset, idx: &[usize]) -> Result<Vec<f64>> {
    if idx.is_empty() {
        return Err(Error::Empty("loss set"));
    }
    let sub = ds.subset(idx)?;
    let logits = model.forward(sub.features())?;
    (0..sub.len())
        .map(|i| {
            let row = Tensor::new(vec![1, logits.cols()], logits.row(i).to_vec())?;
            cross_entropy_loss(&row, &sub.labels()[i..=i], &[1.0]).map(|(l, _)| l)
        })
        .collect()
}

/// A fitted loss threshold: losses `<= threshold` are called members.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAttack {
    pub threshold: f64,
    /// Balanced accuracy on the calibration sets, in `[0, 1]`.
    pub calibration_accuracy: f64,
    /// All calibration losses were equal; no threshold carries information.
    pub degenerate: bool,
}

impl ThresholdAttack {
    /// Searches every distinct calibration loss as a candidate cut, keeps the
    /// one with the best balanced accuracy (smallest cut on ties), then moves
    /// the threshold to the midpoint between that cut and the next larger
    /// calibration loss. A cut at the largest loss stays where it is.
    pub fn fit(members: &[f64], non_members: &[f64]) -> Result<Self> {
        if members.is_empty() || non_members.is_empty() {
            return Err(Error::Empty("membership calibration set"));
        }
        let mut all: Vec<f64> = members.iter().chain(non_members).copied().collect();
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "membership calibration",
                index: 0,
            });
        }
        all.sort_by(f64::total_cmp);
        all.dedup();
        if all.len() == 1 {
            return Ok(Self {
                threshold: all[0],
                calibration_accuracy: 0.5,
                degenerate: true,
            });
        }
        let mut m = members.to_vec();
        let mut nm = non_members.to_vec();
        m.sort_by(f64::total_cmp);
        nm.sort_by(f64::total_cmp);
        let (mut im, mut inm) = (0, 0);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (c, &cut) in all.iter().enumerate() {
            while im < m.len() && m[im] <= cut {
                im += 1;
            }
            while inm < nm.len() && nm[inm] <= cut {
                inm += 1;
            }
            let tpr = im as f64 / m.len() as f64;
            let tnr = (nm.len() - inm) as f64 / nm.len() as f64;
            let ba = 0.5 * (tpr + tnr);
            if ba > best.0 {
                best = (ba, c);
            }
        }
        let (ba, c) = best;
        let threshold = match all.get(c + 1) {
            Some(next) => 0.5 * (all[c] + next),
            None => all[c],
        };
        Ok(Self {
            threshold,
            calibration_accuracy: ba,
            degenerate: false,
        })
    }

    /// Percentage of `losses` classified as members.
    pub fn member_rate(&self, losses: &[f64]) -> f64 {
        if self.degenerate {
            return 50.0;
        }
        if losses.is_empty() {
            return 0.0;
        }
        let members = losses.iter().filter(|&&l| l <= self.threshold).count();
        100.0 * members as f64 / losses.len() as f64
    }
}

/// Which rows calibrate the attack and which rows are probed.
///
/// Members are a seeded random half of the retain set. The test set is
/// split in two seeded halves: one calibrates the non-member side, the other
/// is a non-member probe whose member rate is the attack's false-positive
/// baseline. Both calibration sides must hold at least
/// [`MIA_MIN_CALIBRATION`] rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiaSplit {
    pub members: Vec<usize>,
    pub calibration_non_members: Vec<usize>,
    pub probe_non_members: Vec<usize>,
}

impl MiaSplit {
    pub fn new(partition: &Partition, test_len: usize, seed: u64) -> Result<Self> {
        use rand::seq::SliceRandom;
        let mut rng = seeded_rng(seed);
        let mut retain = partition.retain.clone();
        retain.shuffle(&mut rng);
        let mut members = retain[..retain.len() / 2].to_vec();
        let mut test: Vec<usize> = (0..test_len).collect();
        test.shuffle(&mut rng);
        let half = test_len / 2;
        let mut calibration_non_members = test[..half].to_vec();
        let mut probe_non_members = test[half..].to_vec();
        if members.len() < MIA_MIN_CALIBRATION || calibration_non_members.len() < MIA_MIN_CALIBRATION
        {
            return Err(Error::InvalidConfig(format!(
                "membership calibration needs {MIA_MIN_CALIBRATION} members and non-members, \
                 got {} and {}",
                members.len(),
                calibration_non_members.len()
            )));
        }
        members.sort_unstable();
        calibration_non_members.sort_unstable();
        probe_non_members.sort_unstable();
        Ok(Self {
            members,
            calibration_non_members,
            probe_non_members,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiaResult {
    /// Percentage of forget samples called members.
    pub score: f64,
    /// Same attack applied to the held-out non-member probe.
    pub probe_score: f64,
    pub attack: ThresholdAttack,
}

pub fn mia_score(
    model: &Model,
    train: &LabeledDataset,
    test: &LabeledDataset,
    forget: &[usize],
    split: &MiaSplit,
) -> Result<MiaResult> {
    let member_losses = per_sample_losses(model, train, &split.members)?;
    let non_member_losses = per_sample_losses(model, test, &split.calibration_non_members)?;
    let attack = ThresholdAttack::fit(&member_losses, &non_member_losses)?;
    if attack.degenerate {
        log::warn!("membership calibration losses are all equal; reporting 50%");
    }
    let forget_losses = per_sample_losses(model, train, forget)?;
    let probe_score = if split.probe_non_members.is_empty() {
        attack.member_rate(&[])
    } else {
        attack.member_rate(&per_sample_losses(model, test, &split.probe_non_members)?)
    };
    Ok(MiaResult {
        score: attack.member_rate(&forget_losses),
        probe_score,
        attack,
    })
}

/// Gradient norms of the mean loss on the forget and retain subsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientNorms {
    pub g_f: f64,
    pub g_r: f64,
}

impl GradientNorms {
    /// `g_f / g_r`, or `+inf` when `g_r` is numerically zero.
    pub fn ratio(&self) -> f64 {
        if self.g_r < NORM_EPS {
            f64::INFINITY
        } else {
            self.g_f / self.g_r
        }
    }
}

/// How a subset's gradient norm `G` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormEstimate {
    /// Mean over the subset of each sample's own gradient norm.
    #[default]
    PerSample,
    /// Norm of the gradient of the subset's mean loss. This shrinks towards
    /// zero on data the model already fits, however large the individual
    /// gradients are.
    MeanGradient,
}

fn subset_norm(
    model: &mut Model,
    features: &Tensor,
    labels: &[usize],
    indices: &[usize],
    estimate: NormEstimate,
) -> Result<f64> {
    match estimate {
        NormEstimate::PerSample => {
            let norms = per_sample_grad_norms(model, features, labels, indices)?;
            Ok(norms.iter().sum::<f64>() / norms.len() as f64)
        }
        NormEstimate::MeanGradient => Ok(grad_norm(&full_gradient(
            model, features, labels, indices,
        )?)),
    }
}

/// Gradient norms of the forget and retain subsets under the given
/// (possibly relabelled) training labels.
pub fn gradient_norms(
    model: &mut Model,
    features: &Tensor,
    labels: &[usize],
    partition: &Partition,
    estimate: NormEstimate,
) -> Result<GradientNorms> {
    if partition.forget.is_empty() || partition.retain.is_empty() {
        return Err(Error::Empty("forget or retain subset"));
    }
    let g_f = subset_norm(model, features, labels, &partition.forget, estimate)?;
    let g_r = subset_norm(model, features, labels, &partition.retain, estimate)?;
    Ok(GradientNorms { g_f, g_r })
}

pub fn gradient_ratio_diag(
    model: &mut Model,
    features: &Tensor,
    labels: &[usize],
    partition: &Partition,
    estimate: NormEstimate,
) -> Result<f64> {
    gradient_norms(model, features, labels, partition, estimate).map(|n| n.ratio())
}

/// One row of the per-epoch diagnostics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub g_f: f64,
    pub g_r: f64,
    pub ratio: f64,
    /// Loss weight applied to forget samples during the epoch.
    pub alpha_f: f64,
    /// Loss weight applied to retain samples during the epoch.
    pub alpha_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fa: f64,
    pub ra: f64,
    pub ta: f64,
    pub mia: f64,
    /// Member rate of the non-member probe under the same attack.
    pub mia_probe: f64,
    pub diagnostics: Vec<EpochDiagnostics>,
}

pub fn evaluate(
    model: &Model,
    train: &LabeledDataset,
    test: &LabeledDataset,
    partition: &Partition,
    mia_split: &MiaSplit,
) -> Result<MetricsReport> {
    let all_test: Vec<usize> = (0..test.len()).collect();
    let mia = mia_score(model, train, test, &partition.forget, mia_split)?;
    Ok(MetricsReport {
        fa: accuracy_on(model, train, &partition.forget)?,
        ra: accuracy_on(model, train, &partition.retain)?,
        ta: accuracy_on(model, test, &all_test)?,
        mia: mia.score,
        mia_probe: mia.probe_score,
        diagnostics: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub fa: f64,
    pub ra: f64,
    pub ta: f64,
    pub mia: f64,
    pub ag: f64,
}

impl GapReport {
    pub fn from_gaps(fa: f64, ra: f64, ta: f64, mia: f64) -> Self {
        Self {
            fa,
            ra,
            ta,
            mia,
            ag: (fa + ra + ta + mia) / 4.0,
        }
    }
}

pub fn average_gap(report: &MetricsReport, reference: &MetricsReport) -> GapReport {
    GapReport::from_gaps(
        (report.fa - reference.fa).abs(),
        (report.ra - reference.ra).abs(),
        (report.ta - reference.ta).abs(),
        (report.mia - reference.mia).abs(),
    )
}

/// Two decimals, the way result tables print percentages.
pub fn fmt_percent(v: f64) -> String {
    format!("{v:.2}")
}

/// `"75.71 (0.95)"`.
pub fn fmt_with_gap(value: f64, gap: f64) -> String {
    format!("{value:.2} ({gap:.2})")
}
