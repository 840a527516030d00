//! End-to-end runs: data, original model, unlearning, evaluation.
//!
//! The stages are exposed separately so the CLI can persist and resume
//! between them; [`run_experiment`] chains them in memory.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_gaussian_blobs, load_csv, split, LabeledDataset, Partition, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{average_gap, evaluate, EpochDiagnostics, GapReport, MetricsReport, MiaSplit};
use crate::nn::{Model, SgdConfig};
use crate::unlearn::{train_from_scratch, unlearn, Method, RetrainRecipe, UnlearnConfig};

use super::config::{derive_seed, DatasetConfig, ExperimentConfig};

/// Everything that is a pure function of the config: data, partition and
/// membership-attack split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub partition: Partition,
    pub mia_split: MiaSplit,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Blobs(spec) => {
            let g = generate_gaussian_blobs(spec, derive_seed(cfg.seed, "dataset"))?;
            (g.train, g.test)
        }
        DatasetConfig::Csv {
            train,
            test,
            header,
        } => {
            let tr = load_csv(train, *header)?;
            let te = load_csv(test, *header)?;
            if tr.dim() != te.dim() || tr.label_map() != te.label_map() {
                return Err(Error::InvalidConfig(
                    "train and test CSV files disagree on feature count or label set".into(),
                ));
            }
            (tr, te)
        }
    };
    let partition = split(
        &train,
        &SplitSpec {
            seed: derive_seed(cfg.seed, "split"),
            ..cfg.split
        },
    )?;
    if partition.forget.is_empty() || partition.retain.is_empty() {
        return Err(Error::Empty("forget or retain subset"));
    }
    let mia_split = MiaSplit::new(&partition, test.len(), derive_seed(cfg.seed, "mia"))?;
    Ok(Prepared {
        train,
        test,
        partition,
        mia_split,
    })
}

/// Training recipe of the original model (and of Retrain).
pub fn original_sgd(cfg: &ExperimentConfig) -> SgdConfig {
    SgdConfig {
        seed: derive_seed(cfg.seed, "original"),
        ..cfg.train
    }
}

pub fn train_original(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Model> {
    let all: Vec<usize> = (0..prep.train.len()).collect();
    train_from_scratch(&cfg.model, &prep.train, &all, &original_sgd(cfg))
}

/// The method configs actually run: Retrain is prepended when missing
/// (it is the reference for every gap) and absent seeds are derived.
pub fn planned_methods(cfg: &ExperimentConfig) -> Vec<UnlearnConfig> {
    let mut methods = cfg.methods.clone();
    if !methods.iter().any(|m| m.method == Method::Retrain) {
        methods.insert(0, UnlearnConfig::new(Method::Retrain, 0, 0.0));
    }
    for m in &mut methods {
        if m.seed.is_none() {
            m.seed = Some(derive_seed(cfg.seed, &m.method.name()));
        }
    }
    methods
}

fn recipe(cfg: &ExperimentConfig) -> RetrainRecipe {
    RetrainRecipe {
        spec: cfg.model.clone(),
        sgd: original_sgd(cfg),
    }
}

/// Result of one method; failures are kept as messages so the other
/// methods still report.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub config: UnlearnConfig,
    pub outcome: std::result::Result<(Model, Vec<EpochDiagnostics>), String>,
}

impl MethodRun {
    pub fn name(&self) -> String {
        self.config.method.name()
    }
}

/// Runs every planned method from a copy of `original`, in parallel. The
/// output order follows the plan, and each run is seeded on its own, so
/// results do not depend on thread scheduling.
pub fn run_methods(cfg: &ExperimentConfig, prep: &Prepared, original: &Model) -> Vec<MethodRun> {
    let recipe = recipe(cfg);
    planned_methods(cfg)
        .into_par_iter()
        .map(|config| {
            let outcome = unlearn(original, &prep.train, &prep.partition, &config, &recipe)
                .map(|o| (o.model, o.diagnostics))
                .map_err(|e| {
                    log::error!("{} failed: {e}", config.method.name());
                    e.to_string()
                });
            MethodRun { config, outcome }
        })
        .collect()
}

/// Gradient-norm ratio curves of matched RL runs on a float model and on
/// the configured quantized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioStudy {
    pub float: Vec<EpochDiagnostics>,
    pub quantized: Vec<EpochDiagnostics>,
}

pub const RATIO_FLOAT: &str = "rl_float";
pub const RATIO_QUANT: &str = "rl_quant";

/// Returns `None` when the model is not quantized (there is nothing to
/// compare) or the study is disabled.
pub fn ratio_study(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    original: &Model,
) -> Result<Option<RatioStudy>> {
    if !cfg.ratio_study || cfg.model.quant.is_none() {
        return Ok(None);
    }
    let mut rl = cfg
        .methods
        .iter()
        .find(|m| m.method == Method::Rl)
        .copied()
        .unwrap_or_else(|| UnlearnConfig::new(Method::Rl, 10, 0.02));
    rl.seed = Some(rl.seed.unwrap_or_else(|| derive_seed(cfg.seed, "ratio_study")));
    let float_cfg = ExperimentConfig {
        model: cfg.model.float_twin(),
        ..cfg.clone()
    };
    let float_original = train_original(&float_cfg, prep)?;
    let recipe = recipe(cfg);
    let float = unlearn(&float_original, &prep.train, &prep.partition, &rl, &recipe)?;
    let quantized = unlearn(original, &prep.train, &prep.partition, &rl, &recipe)?;
    Ok(Some(RatioStudy {
        float: float.diagnostics,
        quantized: quantized.diagnostics,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub display: String,
    pub report: Option<MetricsReport>,
    pub gap: Option<GapReport>,
    pub error: Option<String>,
}

/// Evaluates each model and its gaps against the Retrain row, which must
/// be present and successful.
pub fn evaluate_runs(prep: &Prepared, runs: &[MethodRun]) -> Result<Vec<MethodRow>> {
    let eval = |m: &Model| evaluate(m, &prep.train, &prep.test, &prep.partition, &prep.mia_split);
    let reference = runs
        .iter()
        .find(|r| r.config.method == Method::Retrain)
        .ok_or_else(|| Error::InvalidConfig("no Retrain run to compare against".into()))?;
    let reference = match &reference.outcome {
        Ok((m, _)) => eval(m)?,
        Err(e) => {
            return Err(Error::InvalidConfig(format!(
                "Retrain reference failed: {e}"
            )))
        }
    };
    runs.iter()
        .map(|run| {
            let mut row = MethodRow {
                method: run.name(),
                display: run.config.method.display_name(),
                report: None,
                gap: None,
                error: None,
            };
            match &run.outcome {
                Ok((model, diagnostics)) => match eval(model) {
                    Ok(mut report) => {
                        report.diagnostics = diagnostics.clone();
                        row.gap = Some(average_gap(&report, &reference));
                        row.report = Some(report);
                    }
                    Err(e) => row.error = Some(e.to_string()),
                },
                Err(e) => row.error = Some(e.clone()),
            }
            Ok(row)
        })
        .collect()
}

/// Serializable summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub original: MetricsReport,
    pub rows: Vec<MethodRow>,
    pub ratio_study: Option<RatioStudy>,
}

impl RunRecord {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// A finished run with its models.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub record: RunRecord,
    pub original: Model,
    pub runs: Vec<MethodRun>,
}

/// Evaluates finished runs into a [`RunRecord`].
pub fn assemble_record(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    original: &Model,
    runs: &[MethodRun],
    ratio_study: Option<RatioStudy>,
) -> Result<RunRecord> {
    let rows = evaluate_runs(prep, runs)?;
    let original = evaluate(
        original,
        &prep.train,
        &prep.test,
        &prep.partition,
        &prep.mia_split,
    )?;
    Ok(RunRecord {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        original,
        rows,
        ratio_study,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    let prep = prepare(cfg)?;
    log::info!(
        "data: {} train, {} test, {} forget",
        prep.train.len(),
        prep.test.len(),
        prep.partition.forget.len()
    );
    let original = train_original(cfg, &prep)?;
    let runs = run_methods(cfg, &prep, &original);
    let study = ratio_study(cfg, &prep, &original)?;
    let record = assemble_record(cfg, &prep, &original, &runs, study)?;
    Ok(Experiment {
        record,
        original,
        runs,
    })
}
