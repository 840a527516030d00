//! `qmul` command line: run the unlearning experiment end to end or one
//! stage at a time.
//!
//! Stages share an output directory. `train` writes `config.json` there, and
//! later stages reuse it when `--config` is not given, so a staged run and
//! `run-all` produce the same files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qmul::harness::checkpoint::{load_checkpoint, save_checkpoint};
use qmul::harness::experiment::{
    assemble_record, planned_methods, prepare, ratio_study, run_methods, train_original,
    MethodRun, RatioStudy, RATIO_FLOAT, RATIO_QUANT,
};
use qmul::harness::report::{
    checkpoint_path, diagnostics_path, read_diagnostics_csv, write_config, write_diagnostics_csv,
    write_experiment, write_metadata, write_ratio_study, write_record,
};
use qmul::harness::{emit_report, run_experiment, DatasetConfig, ExperimentConfig};
use qmul::metrics::{fmt_percent, fmt_with_gap};
use qmul::Result;

#[derive(Debug, Parser)]
#[command(name = "qmul", version, about = "Machine unlearning for fake-quantized networks")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Opts {
    /// Experiment config (JSON). Defaults to <out>/config.json if present,
    /// else the built-in blob setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated method names to run, e.g. `qmul,rl,ga`.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Treat the first line of CSV datasets as a header.
    #[arg(long, global = true)]
    header: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the original model and save it.
    Train,
    /// Unlearn from the saved original model with every configured method.
    Unlearn,
    /// Evaluate saved models and write results.csv.
    Eval,
    /// Render report.md and ratio_plot.svg from the CSV files.
    Report,
    /// All stages in one go.
    RunAll,
    /// Print the built-in config as JSON.
    DefaultConfig,
}

const DEFAULT_OUT: &str = "runs/qmul";

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::DefaultConfig = cli.command {
        println!("{}", ExperimentConfig::default_blobs().to_json());
        return Ok(());
    }
    let (cfg, out) = resolve(&cli.opts)?;
    match cli.command {
        Command::Train => train(&cfg, &out),
        Command::Unlearn => unlearn(&cfg, &out),
        Command::Eval => eval(&cfg, &out),
        Command::Report => report(&out),
        Command::RunAll => {
            let exp = run_experiment(&cfg)?;
            write_experiment(&out, &cfg, &exp)?;
            print_summary(&out)
        }
        Command::DefaultConfig => unreachable!(),
    }
}

fn resolve(opts: &Opts) -> Result<(ExperimentConfig, PathBuf)> {
    let stored = opts.out.as_ref().map(|o| o.join("config.json"));
    let mut cfg = match (&opts.config, &stored) {
        (Some(p), _) => ExperimentConfig::from_path(p)?,
        (None, Some(p)) if p.is_file() => ExperimentConfig::from_path(p)?,
        _ => ExperimentConfig::default_blobs(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(names) = &opts.methods {
        cfg.select_methods(names)?;
    }
    if opts.header {
        if let DatasetConfig::Csv { header, .. } = &mut cfg.dataset {
            *header = true;
        }
    }
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    cfg.validate()?;
    Ok((cfg, out))
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prep = prepare(cfg)?;
    let model = train_original(cfg, &prep)?;
    write_config(out, cfg)?;
    let path = checkpoint_path(out, "original");
    save_checkpoint(&model, &path)?;
    println!("original model: {}", path.display());
    Ok(())
}

fn unlearn(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prep = prepare(cfg)?;
    let original = load_checkpoint(&checkpoint_path(out, "original"))?;
    let runs = run_methods(cfg, &prep, &original);
    for run in &runs {
        match &run.outcome {
            Ok((model, diagnostics)) => {
                save_checkpoint(model, &checkpoint_path(out, &run.name()))?;
                write_diagnostics_csv(&diagnostics_path(out, &run.name()), diagnostics)?;
                println!("{}: done", run.name());
            }
            Err(e) => println!("{}: failed: {e}", run.name()),
        }
    }
    if let Some(study) = ratio_study(cfg, &prep, &original)? {
        write_diagnostics_csv(&diagnostics_path(out, RATIO_FLOAT), &study.float)?;
        write_diagnostics_csv(&diagnostics_path(out, RATIO_QUANT), &study.quantized)?;
    }
    Ok(())
}

fn eval(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prep = prepare(cfg)?;
    let original = load_checkpoint(&checkpoint_path(out, "original"))?;
    let runs: Vec<MethodRun> = planned_methods(cfg)
        .into_iter()
        .map(|config| {
            let name = config.method.name();
            let outcome = load_checkpoint(&checkpoint_path(out, &name))
                .and_then(|m| Ok((m, read_diagnostics_csv(&diagnostics_path(out, &name))?)))
                .map_err(|e| e.to_string());
            MethodRun { config, outcome }
        })
        .collect();
    let float = diagnostics_path(out, RATIO_FLOAT);
    let quant = diagnostics_path(out, RATIO_QUANT);
    let study = if cfg.ratio_study && float.is_file() && quant.is_file() {
        Some(RatioStudy {
            float: read_diagnostics_csv(&float)?,
            quantized: read_diagnostics_csv(&quant)?,
        })
    } else {
        None
    };
    let record = assemble_record(cfg, &prep, &original, &runs, study)?;
    write_ratio_study(out, &record)?;
    write_record(out, &record)?;
    write_metadata(out, &record.config_hash)?;
    print_summary(out)
}

fn report(out: &Path) -> Result<()> {
    emit_report(out)?;
    print_summary(out)
}

fn print_summary(out: &Path) -> Result<()> {
    let lines = qmul::harness::report::read_results_csv(&out.join("results.csv"))?;
    println!("{:<16} {:>14} {:>14} {:>14} {:>14} {:>6}", "method", "FA", "RA", "TA", "MIA", "AG");
    for l in &lines {
        let cell = |v: Option<f64>, g: Option<f64>| match (v, g) {
            (Some(v), Some(g)) => fmt_with_gap(v, g),
            _ => "failed".into(),
        };
        println!(
            "{:<16} {:>14} {:>14} {:>14} {:>14} {:>6}",
            l.method,
            cell(l.fa, l.gap_fa),
            cell(l.ra, l.gap_ra),
            cell(l.ta, l.gap_ta),
            cell(l.mia, l.gap_mia),
            l.ag.map(fmt_percent).unwrap_or_else(|| "-".into())
        );
    }
    println!("results in {}", out.display());
    Ok(())
}
