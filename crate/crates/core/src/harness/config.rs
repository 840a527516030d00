//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "seed": 0,
//!   "output_dir": "runs/blobs",
//!   "dataset": { "kind": "blobs", "classes": 5, "per_class": 500,
//!                "test_per_class": 200, "dim": 30, "spread": 0.4 },
//!   "model": { "hidden": [64, 64],
//!              "quant": { "bits": 4, "scale_mode": "learnable_lsq", "target": "both" } },
//!   "train": { "learning_rate": 0.1, "schedule": "cosine", "batch_size": 64, "epochs": 100 },
//!   "split": { "mode": "random_fraction", "fraction": 0.1 },
//!   "methods": [ { "method": "qmul", "epochs": 10, "learning_rate": 0.1,
//!                  "batch_size": 16 } ],
//!   "ratio_study": true
//! }
//! ```
//!
//! `dataset.kind` is `blobs` or `csv` (`train`, `test`, `header`). Every
//! seed used by a run (data, split, training, membership calibration, each
//! method) is derived from the global `seed`; seeds written inside the
//! sub-configs are overwritten, except a method's explicit `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BlobSpec, SplitMode, SplitSpec};
use crate::error::{Error, Result};
use crate::nn::{LrSchedule, ModelSpec, SgdConfig};
use crate::quant::{QuantSpec, QuantTarget, ScaleMode};
use crate::unlearn::{Method, UnlearnConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Blobs(BlobSpec),
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        header: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub train: SgdConfig,
    pub split: SplitSpec,
    pub methods: Vec<UnlearnConfig>,
    /// Also run RL on a float twin of the model and log both gradient-norm
    /// ratio curves.
    #[serde(default = "yes")]
    pub ratio_study: bool,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let Some(q) = &self.model.quant {
            q.validate()?;
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        self.train.validate()?;
        self.split.validate()?;
        let mut names = std::collections::BTreeSet::new();
        for m in &self.methods {
            m.validate()?;
            if !names.insert(m.method.name()) {
                return Err(Error::InvalidConfig(format!(
                    "method {} listed twice",
                    m.method.name()
                )));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical (compact, field-ordered) JSON, with the
    /// output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Keeps only the listed method names, in config order.
    pub fn select_methods(&mut self, names: &[String]) -> Result<()> {
        for n in names {
            if !self.methods.iter().any(|m| &m.method.name() == n) {
                return Err(Error::InvalidConfig(format!(
                    "method {n} is not in the config"
                )));
            }
        }
        self.methods.retain(|m| names.contains(&m.method.name()));
        Ok(())
    }

    /// The desk-scale blob setup: 5 classes, 2,500 training samples in 30
    /// dimensions, a 4-bit weight+activation MLP and 10% random forgetting,
    /// with the seven compared methods at 10 unlearning epochs each.
    /// Learning rates were picked per method from a grid on seeds that the
    /// acceptance suite does not use.
    pub fn default_blobs() -> Self {
        let quant = QuantSpec {
            bits: 4,
            scale_mode: ScaleMode::LearnableLsq,
            target: QuantTarget::Both,
        };
        let method = |method, learning_rate| UnlearnConfig {
            batch_size: 16,
            ..UnlearnConfig::new(method, 10, learning_rate)
        };
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: None,
            dataset: DatasetConfig::Blobs(BlobSpec {
                classes: 5,
                per_class: 500,
                test_per_class: 200,
                dim: 30,
                spread: 0.4,
            }),
            model: ModelSpec {
                hidden: vec![64, 64],
                quant: Some(quant),
            },
            train: SgdConfig {
                learning_rate: 0.1,
                schedule: LrSchedule::Cosine,
                batch_size: 64,
                epochs: 100,
                seed: 0,
            },
            split: SplitSpec {
                mode: SplitMode::RandomFraction { fraction: 0.1 },
                seed: 0,
            },
            methods: vec![
                UnlearnConfig::new(Method::Retrain, 0, 0.0),
                method(Method::Ft, 0.05),
                method(Method::Ga, 0.003),
                method(Method::Rl, 0.02),
                method(Method::L1Sparse { gamma: 1e-4 }, 0.05),
                method(Method::Salun { sparsity: 0.5 }, 0.02),
                method(Method::qmul(), 0.1),
            ],
            ratio_study: true,
        }
    }
}

/// `seed` for a named sub-stream: the first eight bytes (little-endian) of
/// SHA-256 over the global seed's little-endian bytes followed by the name.
pub fn derive_seed(global: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let c = ExperimentConfig::default_blobs();
        c.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_tracks_content_not_output_dir() {
        let a = ExperimentConfig::default_blobs();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ExperimentConfig::default_blobs();
        c.schema_version = 2;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default_blobs();
        c.methods.push(c.methods[1]);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default_blobs();
        c.train.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn method_selection() {
        let mut c = ExperimentConfig::default_blobs();
        c.select_methods(&["qmul".into(), "retrain".into()]).unwrap();
        let names: Vec<String> = c.methods.iter().map(|m| m.method.name()).collect();
        assert_eq!(names, ["retrain", "qmul"]);
        assert!(c.select_methods(&["iu".into()]).is_err());
    }

    #[test]
    fn parses_csv_dataset() {
        let d: DatasetConfig =
            serde_json::from_str(r#"{"kind":"csv","train":"a.csv","test":"b.csv"}"#).unwrap();
        assert_eq!(
            d,
            DatasetConfig::Csv {
                train: "a.csv".into(),
                test: "b.csv".into(),
                header: false
            }
        );
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(0, "qmul"), derive_seed(0, "qmul"));
        assert_ne!(derive_seed(0, "qmul"), derive_seed(0, "rl"));
        assert_ne!(derive_seed(0, "qmul"), derive_seed(1, "qmul"));
    }
}
