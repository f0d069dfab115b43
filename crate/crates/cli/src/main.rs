//! Command-line driver: synthetic data generation, training, evaluation,
//! calibration reports, single-module ablations and gradient checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use refcod_core::config::RunConfig;
use refcod_core::data::write_folder;
use refcod_core::gradcheck;
use refcod_core::harness::{
    ablation_config, check_compatible, evaluate_predictions, load_dataset, write_calibration,
    Checkpoint, EvaluationReport, TrainOutput, Trainer,
};

#[derive(Parser)]
#[command(
    name = "refcod",
    version,
    about = "Reference-guided camouflaged object segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the on-disk folder layout.
    Generate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a model and write its loss log and checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the configured dataset.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Write the reliability diagram (CSV and SVG) of a checkpoint.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Train and evaluate with one module switched off.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// rgde, euqm, ega, umrm, barm, or uaed (its three parts at once).
        #[arg(long, required = true)]
        disable: String,
    },
    /// Run the finite-difference gradient suites; exits nonzero on any failure.
    Gradcheck,
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML file layered over the profile; it only needs the keys it changes.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in starting point: toy or full.
    #[arg(long, default_value = "toy")]
    profile: String,
    /// Override one key, e.g. `--set optim.max_steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed (initialisation and shuffling); for `generate`, the data seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "REFCOD_OUT", default_value = "runs")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate even if the checkpoint's architecture differs from the config.
    #[arg(long)]
    force: bool,
    #[arg(long, default_value_t = 10)]
    bins: usize,
}

impl RunArgs {
    fn explicit(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty()
    }

    fn resolve(&self) -> Result<RunConfig> {
        let profile = RunConfig::profile(&self.profile)?;
        let base = match &self.config {
            Some(path) => profile
                .overlay_file(path)
                .with_context(|| format!("loading {}", path.display()))?,
            None => profile,
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn generate(run: &RunArgs) -> Result<()> {
    let mut cfg = run.resolve()?;
    if let Some(seed) = run.seed {
        cfg.data.seed = seed;
    }
    cfg.data.folder = None;
    let samples = load_dataset(&cfg)?;
    create_dir(&run.out)?;
    write_folder(&samples, &run.out, &cfg.data.split, &cfg.data.layout)?;
    println!(
        "wrote {} samples to {}",
        samples.len(),
        run.out.join(&cfg.data.split).display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<Trainer> {
    let data = load_dataset(cfg)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            check_compatible(&ckpt.config, cfg, false)?;
            let mut t = Trainer::from_checkpoint(&ckpt)?;
            t.config = cfg.clone();
            t
        }
        None => Trainer::new(cfg)?,
    };
    create_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.canonical())?;
    log::info!(
        "training `{}` ({} parameters, {} samples, fingerprint {})",
        cfg.name,
        trainer.num_parameters(),
        data.len(),
        &cfg.fingerprint_hex()[..12]
    );
    trainer.train(&data, &TrainOutput::to_dir(out))?;
    if let Some(last) = trainer.log.last() {
        println!("step {} loss {:.6}", last.step, last.report.total);
    }
    println!("checkpoint {}", out.join("checkpoint.bin").display());
    Ok(trainer)
}

/// The checkpoint's model under the requested data and ablation settings.
fn load_for_eval(run: &RunArgs, args: &CheckpointArgs) -> Result<(Trainer, RunConfig)> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let requested = if run.explicit() {
        run.resolve()?
    } else {
        ckpt.config.clone()
    };
    check_compatible(&ckpt.config, &requested, args.force)?;
    let mut trainer = Trainer::from_checkpoint(&ckpt)?;
    trainer.config.data = requested.data.clone();
    trainer.config.ablation = requested.ablation.clone();
    Ok((trainer, requested))
}

fn evaluate(trainer: &Trainer, cfg: &RunConfig, bins: usize) -> Result<EvaluationReport> {
    let data = load_dataset(cfg)?;
    let preds = trainer.predict(&data)?;
    Ok(evaluate_predictions(&preds, &data, bins)?)
}

fn write_report(out: &Path, report: &EvaluationReport) -> Result<()> {
    create_dir(out)?;
    write_text(&out.join("report.txt"), &report.to_text())?;
    write_text(&out.join("report.json"), &report.to_json())?;
    print!("{}", report.to_text());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { run } => generate(&run)?,
        Command::Train { run, resume } => {
            train(&run.resolve()?, &run.out, resume.as_deref())?;
        }
        Command::Eval { run, ckpt } => {
            let (trainer, cfg) = load_for_eval(&run, &ckpt)?;
            write_report(&run.out, &evaluate(&trainer, &cfg, ckpt.bins)?)?;
        }
        Command::Calibrate { run, ckpt } => {
            let (trainer, cfg) = load_for_eval(&run, &ckpt)?;
            let report = evaluate(&trainer, &cfg, ckpt.bins)?;
            let (csv, svg) = write_calibration(&run.out, &report.overall)?;
            println!("ece={:.6}", report.overall.ece);
            println!("wrote {} and {}", csv.display(), svg.display());
        }
        Command::Ablate { run, disable } => {
            let cfg = ablation_config(&run.resolve()?, &disable)?;
            let out = run.out.join(&cfg.name);
            let trainer = train(&cfg, &out, None)?;
            write_report(&out, &evaluate(&trainer, &cfg, 10)?)?;
        }
        Command::Gradcheck => {
            let mut ok = true;
            for suite in gradcheck::run_all() {
                println!(
                    "{:<26} points={:<4} max_rel_error={:.3e} tol={:.0e} {}",
                    suite.name,
                    suite.points,
                    suite.max_rel_error,
                    suite.tol,
                    if suite.passed { "PASS" } else { "FAIL" }
                );
                ok &= suite.passed;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Config { run } => print!("{}", run.resolve()?.canonical()),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
