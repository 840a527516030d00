//! Labelled datasets and forget/retain partitioning.
//!
//! Two sources are supported: a seeded Gaussian-blob generator and a plain
//! CSV reader. The CSV grammar is UTF-8, comma separated, one sample per
//! row, decimal feature columns followed by a final integer label column,
//! and no header unless the caller asks to skip one. Labels are re-indexed
//! to the dense range `0..K` in ascending order of their original value.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    /// Original label value for each dense class index, when re-indexed.
    label_map: Option<Vec<i64>>,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::shape("dataset features", &[0, 0], features.shape()));
        }
        if features.rows() != labels.len() {
            return Err(Error::shape("dataset labels", &[features.rows()], &[labels.len()]));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes,
                row,
            });
        }
        Ok(Self {
            features,
            labels,
            classes,
            label_map: None,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn label_map(&self) -> Option<&[i64]> {
        self.label_map.as_deref()
    }

    /// Copy of the rows at `idx`, keeping the class count.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            label_map: self.label_map.clone(),
        })
    }
}

/// A generated training set with a held-out test set from the same
/// distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

/// Isotropic Gaussian clusters. Class `k` is centred on the unit basis
/// vector `e_k` (any remaining dimensions are pure noise), so every pair of
/// means is the same distance apart. Samples are emitted class by class.
pub fn generate_gaussian_blobs(spec: &BlobSpec, seed: u64) -> Result<GeneratedData> {
    if spec.classes < 2 || spec.per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::InvalidConfig(
            "blobs need at least two classes and one sample per class".into(),
        ));
    }
    if spec.dim < spec.classes {
        return Err(Error::InvalidConfig(format!(
            "blob dimension {} must be at least the class count {}",
            spec.dim, spec.classes
        )));
    }
    if !(spec.spread.is_finite() && spec.spread >= 0.0) {
        return Err(Error::InvalidConfig("blob spread must be non-negative".into()));
    }
    let normal = Normal::new(0.0, spec.spread)
        .map_err(|e| Error::InvalidConfig(format!("blob spread: {e}")))?;
    let mut rng = seeded_rng(seed);
    let mut draw = |per_class: usize| -> Result<LabeledDataset> {
        let mut data = Vec::with_capacity(spec.classes * per_class * spec.dim);
        let mut labels = Vec::with_capacity(spec.classes * per_class);
        for k in 0..spec.classes {
            for _ in 0..per_class {
                for j in 0..spec.dim {
                    let mean = if j == k { 1.0 } else { 0.0 };
                    data.push(mean + normal.sample(&mut rng));
                }
                labels.push(k);
            }
        }
        let features = Tensor::new(vec![labels.len(), spec.dim], data)?;
        LabeledDataset::new(features, labels, spec.classes)
    };
    let train = draw(spec.per_class)?;
    let test = draw(spec.test_per_class)?;
    Ok(GeneratedData { train, test })
}

/// Reads `f_1,...,f_d,label` rows. `header` skips the first line.
pub fn load_csv(path: &Path, header: bool) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("{other:?}"),
            },
        })?;
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() < 2 {
            return Err(parse_err(
                line,
                "expected at least one feature and a label".into(),
            ));
        }
        let d = record.len() - 1;
        match width {
            None => width = Some(d),
            Some(w) if w != d => {
                return Err(parse_err(
                    line,
                    format!("expected {w} features, found {d}"),
                ))
            }
            _ => {}
        }
        for (col, field) in record.iter().take(d).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                parse_err(line, format!("column {}: '{field}' is not a number", col + 1))
            })?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column {}: non-finite value", col + 1)));
            }
            data.push(v);
        }
        let label_field = &record[d];
        let label: i64 = label_field
            .parse()
            .map_err(|_| parse_err(line, format!("label '{label_field}' is not an integer")))?;
        raw_labels.push(label);
    }
    let Some(d) = width else {
        return Err(Error::Empty("csv file"));
    };
    let distinct: Vec<i64> = raw_labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let labels = raw_labels
        .iter()
        .map(|l| distinct.binary_search(l).expect("label collected above"))
        .collect::<Vec<_>>();
    let features = Tensor::new(vec![labels.len(), d], data)?;
    let mut ds = LabeledDataset::new(features, labels, distinct.len())?;
    ds.label_map = Some(distinct);
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitMode {
    RandomFraction { fraction: f64 },
    ClassWise { class: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(flatten)]
    pub mode: SplitMode,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if let SplitMode::RandomFraction { fraction } = self.mode {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "forget fraction must lie strictly between 0 and 1, got {fraction}"
                )));
            }
        }
        Ok(())
    }
}

/// Disjoint forget/retain index sets covering `0..N`, both sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub forget: Vec<usize>,
    pub retain: Vec<usize>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.forget.len() + self.retain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `mask[i]` is true for forget samples.
    pub fn forget_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for &i in &self.forget {
            mask[i] = true;
        }
        mask
    }

    fn from_forget(n: usize, mut forget: Vec<usize>) -> Self {
        forget.sort_unstable();
        let set: BTreeSet<usize> = forget.iter().copied().collect();
        let retain = (0..n).filter(|i| !set.contains(i)).collect();
        Self { forget, retain }
    }
}

pub fn split(dataset: &LabeledDataset, spec: &SplitSpec) -> Result<Partition> {
    spec.validate()?;
    let n = dataset.len();
    match spec.mode {
        SplitMode::RandomFraction { fraction } => {
            let count = (fraction * n as f64).floor() as usize;
            if count < 1 {
                return Err(Error::InvalidConfig(format!(
                    "forget fraction {fraction} of {n} samples selects nothing"
                )));
            }
            let mut rng = seeded_rng(spec.seed);
            let forget = index::sample(&mut rng, n, count).into_vec();
            Ok(Partition::from_forget(n, forget))
        }
        SplitMode::ClassWise { class } => {
            if class >= dataset.classes() {
                return Err(Error::LabelOutOfRange {
                    label: class,
                    classes: dataset.classes(),
                    row: 0,
                });
            }
            let forget: Vec<usize> = (0..n).filter(|&i| dataset.labels()[i] == class).collect();
            if forget.is_empty() {
                return Err(Error::Empty("forget class"));
            }
            Ok(Partition::from_forget(n, forget))
        }
    }
}
