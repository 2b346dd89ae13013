//! Command-line experiment runner.
//!
//! Every experiment command takes `--config <path>` plus optional `--seed`
//! and `--out` overrides; `verify` compares two checkpoints directly.
//! Exit codes: 0 on success, 1 for validation/usage errors, 2 when a
//! lossless-trim equivalence gate fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use csgd::checkpoint::load_checkpoint;
use csgd::config::{parse_config, ExperimentConfig};
use csgd::error::{Error, Result};
use csgd::pipelines::{
    compare_lasso, epsilon_sweep, load_datasets, prune_pretrained, scale_and_squeeze,
    slim_vs_clip, train_baseline, PruneRun, EQUIV_TOLERANCE, VERIFY_SAMPLES,
};
use csgd::trim::verify_equivalence;

#[derive(Parser)]
#[command(
    name = "csgd",
    version,
    about = "Centripetal SGD: train clustered filters identical, then prune losslessly"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seed override (default: the config's experiment.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override (default: the config's
    /// experiment.out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<(ExperimentConfig, u64, PathBuf)> {
        let cfg = parse_config(&self.config)?;
        let seed = self.seed.unwrap_or(cfg.experiment.seed);
        let out = self
            .out
            .clone()
            .unwrap_or_else(|| cfg.experiment.out_dir.clone());
        Ok((cfg, seed, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline with plain SGD and save a checkpoint.
    Train(RunArgs),
    /// Centripetally train a pretrained model, then snap, trim and verify.
    Prune {
        #[command(flatten)]
        run: RunArgs,
        /// Base checkpoint; defaults to <out>/baseline.ckpt, training one
        /// first if that file does not exist.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Snap and trim an already-converged checkpoint without training.
    Trim {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to trim.
        #[arg(long)]
        base: PathBuf,
    },
    /// Evaluate a checkpoint on the configured datasets.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate.
        #[arg(long)]
        base: PathBuf,
    },
    /// Train a wider model and squeeze it back to the original widths.
    ScaleSqueeze(RunArgs),
    /// Run centripetal SGD and group-Lasso side by side from one base.
    CompareLasso(RunArgs),
    /// Sweep the centripetal strength and record χ-threshold crossings.
    SweepEps(RunArgs),
    /// Prune globally vs internal-layers-only at matched FLOPs.
    SlimVsClip(RunArgs),
    /// Print the max absolute logit difference between two checkpoints on
    /// random inputs. Exits 2 if it exceeds the lossless-trim tolerance.
    Verify {
        first: PathBuf,
        second: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn base_model(
    cfg: &ExperimentConfig,
    out: &std::path::Path,
    seed: u64,
    base: &Option<PathBuf>,
) -> Result<csgd::model::Model> {
    let path = match base {
        Some(p) => p.clone(),
        None => {
            let default = out.join("baseline.ckpt");
            if !default.exists() {
                train_baseline(cfg, out, seed)?;
            }
            default
        }
    };
    Ok(load_checkpoint(&path)?.0)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => {
            let (cfg, seed, out) = args.load()?;
            let outcome = train_baseline(&cfg, &out, seed)?;
            println!(
                "baseline: train_accuracy {:.4} test_accuracy {:.4} checkpoint {}",
                outcome.train_accuracy,
                outcome.test_accuracy,
                outcome.checkpoint.display()
            );
        }
        Command::Prune { run, base } => {
            let (cfg, seed, out) = run.load()?;
            let model = base_model(&cfg, &out, seed, &base)?;
            let outcome = prune_pretrained(&cfg, &model, &out, seed, &PruneRun::default())?;
            println!(
                "prune: pre_trim_accuracy {:.4} post_trim_accuracy {:.4} \
                 max_logit_diff {:e} flops {} -> {}",
                outcome.pre_trim_accuracy,
                outcome.post_trim_accuracy,
                outcome.max_logit_diff,
                outcome.flops_before,
                outcome.flops_after
            );
        }
        Command::Trim { run, base } => {
            let (cfg, seed, out) = run.load()?;
            let model = base_model(&cfg, &out, seed, &Some(base))?;
            // A trim is a prune with zero centripetal epochs: snap what is
            // already converged and cut.
            let mut cfg = cfg;
            cfg.csgd.epochs = Some(0);
            let outcome = prune_pretrained(
                &cfg,
                &model,
                &out,
                seed,
                &PruneRun {
                    label: "trim",
                    targets: None,
                    epsilon: None,
                },
            )?;
            println!(
                "trim: max_logit_diff {:e} flops {} -> {} checkpoint {}",
                outcome.max_logit_diff,
                outcome.flops_before,
                outcome.flops_after,
                outcome.checkpoint.display()
            );
        }
        Command::Eval { run, base } => {
            let (cfg, seed, _) = run.load()?;
            let (model, _) = load_checkpoint(&base)?;
            let (train, test) = load_datasets(&cfg, seed)?;
            let train_accuracy = model.accuracy(&train.images, &train.labels, 256)?;
            let test_accuracy = model.accuracy(&test.images, &test.labels, 256)?;
            println!("eval: train_accuracy {train_accuracy:.4} test_accuracy {test_accuracy:.4}");
        }
        Command::ScaleSqueeze(args) => {
            let (cfg, seed, out) = args.load()?;
            let outcome = scale_and_squeeze(&cfg, &out, seed)?;
            println!(
                "scale-squeeze: baseline {:.4} wide {:.4} squeezed {:.4} widths_match {}",
                outcome.baseline_accuracy,
                outcome.wide_accuracy,
                outcome.squeezed_accuracy,
                outcome.widths_match
            );
        }
        Command::CompareLasso(args) => {
            let (cfg, seed, out) = args.load()?;
            let outcome = compare_lasso(&cfg, &out, seed)?;
            println!(
                "compare-lasso: csgd {:.4} -> {:.4} lasso {:.4} -> {:.4} \
                 chi {:.3e} -> {:.3e} phi {:.3e} -> {:.3e}",
                outcome.csgd_pre_accuracy,
                outcome.csgd_post_accuracy,
                outcome.lasso_pre_accuracy,
                outcome.lasso_post_accuracy,
                outcome.chi_initial,
                outcome.chi_final,
                outcome.phi_initial,
                outcome.phi_final
            );
        }
        Command::SweepEps(args) => {
            let (cfg, seed, out) = args.load()?;
            let outcome = epsilon_sweep(&cfg, &out, seed)?;
            for arm in &outcome.arms {
                match arm.crossing_step {
                    Some(step) => println!("sweep: eps {:e} crossed at step {step}", arm.epsilon),
                    None => println!("sweep: eps {:e} never crossed", arm.epsilon),
                }
            }
        }
        Command::SlimVsClip(args) => {
            let (cfg, seed, out) = args.load()?;
            let outcome = slim_vs_clip(&cfg, &out, seed)?;
            println!(
                "slim-vs-clip: slim {:.4} (flops {}) clip {:.4} (flops {}) gap {:.2}%",
                outcome.slim_accuracy,
                outcome.slim_flops,
                outcome.clip_accuracy,
                outcome.clip_flops,
                outcome.flops_gap * 100.0
            );
        }
        Command::Verify {
            first,
            second,
            seed,
        } => {
            let (a, _) = load_checkpoint(&first)?;
            let (b, _) = load_checkpoint(&second)?;
            let diff = verify_equivalence(&a, &b, VERIFY_SAMPLES, seed)?;
            println!("max_logit_diff {diff:e}");
            if diff > EQUIV_TOLERANCE {
                return Err(Error::EquivalenceGate {
                    max_diff: diff,
                    tolerance: EQUIV_TOLERANCE,
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
