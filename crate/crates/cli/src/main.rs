//! `socialnav`: dataset generation, the three training stages, evaluation,
//! benchmarking and ablation sweeps.
//!
//! Exit codes: 0 success, 2 usage error, 3 validation error (bad config,
//! stage order, refusing to overwrite), 4 runtime error.
//! Log verbosity comes from `SOCIALNAV_LOG` (e.g. `debug`, `warn`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::info;

use socialnav_core::config::RunConfig;
use socialnav_core::experiment::{run_sweep, write_sweep_csv, Experiment, StageLog, SweepAxis};
use socialnav_core::metrics::{
    check_disjoint, render_table, write_examples_csv, write_summary_csv, write_timing_csv,
};
use socialnav_core::navsim::{build_dataset, Dataset};
use socialnav_core::pipeline::{write_epoch_log, write_rft_log, Stage};
use socialnav_core::policy::{load_checkpoint, save_checkpoint, PolicyModel};
use socialnav_core::Error;

const LOG_ENV: &str = "SOCIALNAV_LOG";

#[derive(Parser)]
#[command(
    name = "socialnav",
    version,
    about = "Desk-scale social navigation MoE policy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, test and augmented-train dataset files.
    GenData(GenDataArgs),
    /// Supervised fine-tuning from a fresh model (or --in-ckpt).
    Sft(StageArgs),
    /// Reinforcement fine-tuning of an SFT checkpoint.
    Rft(StageArgs),
    /// Multi-turn MoE fine-tuning of an RFT checkpoint.
    Moeft(StageArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Print parameter count and action-generation FPS.
    Bench(BenchArgs),
    /// Run an ablation sweep and write a summary CSV.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Run config (TOML); flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    train_n: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    test_n: Option<u64>,
    /// Overwrite existing files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Input checkpoint; sft starts from a fresh model when omitted.
    #[arg(long)]
    in_ckpt: Option<PathBuf>,
    #[arg(long)]
    out_ckpt: PathBuf,
    /// Training log CSV (default: <out-ckpt>.log.csv).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Skip the sft -> rft -> moeft order check.
    #[arg(long)]
    allow_out_of_order: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for examples.csv, summary.csv and timing.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint to time; a freshly initialized model when omitted.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset directory; generated in memory from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// experts, topk, reward or turns.
    #[arg(long)]
    axis: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; generated in memory from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for sweep_<axis>.csv.
    #[arg(long)]
    out: PathBuf,
    /// Number of configurations to run concurrently.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    parallel: u64,
    #[arg(long)]
    force: bool,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let validation = e
            .chain()
            .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
        if validation {
            Failure::Validation(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn validation(msg: String) -> Failure {
    Failure::Validation(anyhow::anyhow!(msg))
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn refuse_overwrite(paths: &[PathBuf], force: bool) -> CliResult<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(validation(format!(
            "{} already exists (pass --force to overwrite)",
            p.display()
        ))),
        None => Ok(()),
    }
}

fn read_dataset(dir: &Path) -> CliResult<Dataset> {
    Dataset::read(dir)
        .with_context(|| format!("reading dataset from {}", dir.display()))
        .map_err(Failure::from)
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.run.seed = s;
    }
    if let Some(n) = a.train_n {
        cfg.data.train_n = n as usize;
    }
    if let Some(n) = a.test_n {
        cfg.data.test_n = n as usize;
    }
    cfg.validate()?;
    let files: Vec<PathBuf> = [
        Dataset::TRAIN_FILE,
        Dataset::TEST_FILE,
        Dataset::TRAIN_AUGMENTED_FILE,
    ]
    .iter()
    .map(|f| a.out.join(f))
    .collect();
    refuse_overwrite(&files, a.force)?;
    let data = build_dataset(cfg.data.train_n, cfg.data.test_n, cfg.run.seed)?;
    data.write(&a.out, &cfg.hash())?;
    println!(
        "wrote {} train, {} test, {} augmented train records to {} (seed {}, config {})",
        data.train.len(),
        data.test.len(),
        data.train_augmented.len(),
        a.out.display(),
        cfg.run.seed,
        cfg.hash()
    );
    Ok(())
}

fn stage(stage: Stage, a: StageArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let exp = Experiment::new(cfg)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out_ckpt.clone().into_os_string();
        s.push(".log.csv");
        PathBuf::from(s)
    });
    refuse_overwrite(&[a.out_ckpt.clone(), log_path.clone()], a.force)?;
    info!("config hash {}", exp.config_hash());
    let input = match (&a.in_ckpt, stage) {
        (Some(p), _) => load_checkpoint(p)?,
        (None, Stage::Sft) => exp.initial_checkpoint()?,
        (None, _) => {
            return Err(validation(format!(
                "stage order: {stage} needs --in-ckpt with a {} checkpoint",
                stage.previous().expect("not the first stage")
            )))
        }
    };
    let data = read_dataset(&a.data)?;
    let (out, log) = exp.run_stage(&input, stage, &data, a.allow_out_of_order, |m| info!("{m}"))?;
    save_checkpoint(&a.out_ckpt, &out)?;
    match &log {
        StageLog::Supervised(epochs) => {
            write_epoch_log(&log_path, exp.config_hash(), epochs, stage == Stage::Moeft)?
        }
        StageLog::Rft(rows) => write_rft_log(&log_path, exp.config_hash(), rows)?,
    }
    let what = if stage == Stage::Rft { "J" } else { "loss" };
    println!(
        "{stage} done: final {what} {:.6}; checkpoint {}; log {}; config {}",
        log.final_value().unwrap_or(f64::NAN),
        a.out_ckpt.display(),
        log_path.display(),
        exp.config_hash()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let exp = Experiment::new(load_config(a.config.as_deref())?)?;
    let files: Vec<PathBuf> = ["examples.csv", "summary.csv", "timing.csv", "config.toml"]
        .iter()
        .map(|f| a.out.join(f))
        .collect();
    refuse_overwrite(&files, a.force)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    check_disjoint(&data.train, &data.test)?;
    let report = exp.evaluate(&ckpt.model, &data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let (hash, seed) = (exp.config_hash(), exp.config().run.seed);
    write_examples_csv(&files[0], hash, seed, &report.rows)?;
    write_summary_csv(&files[1], hash, seed, &report.aggregate)?;
    write_timing_csv(&files[2], hash, seed, &report.timing)?;
    std::fs::write(&files[3], exp.config().to_toml()).map_err(|e| Error::io(&files[3], e))?;
    if report.mover_warnings > 0 {
        log::warn!(
            "{} mover-similarity computations did not converge",
            report.mover_warnings
        );
    }
    print!("{}", render_table(&report.aggregate, Some(&report.timing)));
    println!("wrote {} (config {hash})", a.out.display());
    Ok(())
}

fn bench(a: BenchArgs) -> CliResult<()> {
    let exp = Experiment::new(load_config(a.config.as_deref())?)?;
    let model: PolicyModel = match &a.ckpt {
        Some(p) => load_checkpoint(p)?.model,
        None => exp.initial_checkpoint()?.model,
    };
    let data = match &a.data {
        Some(d) => read_dataset(d)?,
        None => exp.dataset()?,
    };
    let report = exp.evaluate(&model, &data)?;
    println!("parameters {}", model.parameter_count());
    println!(
        "fps {:.3} ({} actions in {:.3} s)",
        report.timing.fps, report.timing.actions, report.timing.seconds
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> CliResult<()> {
    let axis: SweepAxis = a
        .axis
        .parse()
        .map_err(|e: Error| validation(e.to_string()))?;
    let cfg = load_config(a.config.as_deref())?;
    let out = a.out.join(format!("sweep_{axis}.csv"));
    refuse_overwrite(std::slice::from_ref(&out), a.force)?;
    let data = match &a.data {
        Some(d) => read_dataset(d)?,
        None => Experiment::new(cfg.clone())?.dataset()?,
    };
    let rows = run_sweep(&cfg, axis, &data, a.parallel as usize, |m| info!("{m}"))?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_sweep_csv(&out, &cfg, &rows)?;
    println!(
        "{:<16} {:>8} {:>8} {:>8} {:>8}",
        axis.to_string(),
        "BS-F1",
        "SMS",
        "exact",
        "params"
    );
    for r in &rows {
        println!(
            "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8}",
            r.label, r.f1, r.sms, r.exact, r.parameters
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Sft(a) => stage(Stage::Sft, a),
        Command::Rft(a) => stage(Stage::Rft, a),
        Command::Moeft(a) => stage(Stage::Moeft, a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(4)
        }
    }
}
