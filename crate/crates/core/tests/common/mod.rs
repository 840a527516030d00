//! Small, fast experiment shared by the integration tests.

#![allow(dead_code)]

use qmul::data::{BlobSpec, SplitMode, SplitSpec};
use qmul::harness::{DatasetConfig, ExperimentConfig};
use qmul::nn::{LrSchedule, ModelSpec, SgdConfig};
use qmul::quant::{QuantSpec, QuantTarget, ScaleMode};
use qmul::unlearn::{Method, UnlearnConfig};

pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default_blobs();
    cfg.dataset = DatasetConfig::Blobs(BlobSpec {
        classes: 3,
        per_class: 80,
        test_per_class: 80,
        dim: 6,
        spread: 0.5,
    });
    cfg.model = ModelSpec {
        hidden: vec![12],
        quant: Some(QuantSpec {
            bits: 4,
            scale_mode: ScaleMode::LearnableLsq,
            target: QuantTarget::Both,
        }),
    };
    cfg.train = SgdConfig {
        learning_rate: 0.1,
        schedule: LrSchedule::Cosine,
        batch_size: 32,
        epochs: 15,
        seed: 0,
    };
    cfg.split = SplitSpec {
        mode: SplitMode::RandomFraction { fraction: 0.2 },
        seed: 0,
    };
    let m = |method, lr| UnlearnConfig {
        batch_size: 16,
        ..UnlearnConfig::new(method, 2, lr)
    };
    cfg.methods = vec![
        UnlearnConfig::new(Method::Retrain, 0, 0.0),
        m(Method::Ft, 0.05),
        m(Method::Rl, 0.02),
        m(Method::qmul(), 0.1),
    ];
    cfg
}
