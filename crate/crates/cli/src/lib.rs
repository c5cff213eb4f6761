//! Command-line driver: dataset generation, training, evaluation, the
//! loss-weight sweep and the task ablation.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::EvalRequest;
use crate::config::Config;

/// Exit status for invalid arguments or configuration.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for failures while running a command.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mtlseg", version, about = "Multi-task building footprint segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file; built-in defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory, overriding `dataset` in [data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    #[arg(short, long)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(Common),
    /// Train one model.
    Train(RunArgs),
    /// Score a checkpoint or a directory of predicted maps.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset directory, overriding `dataset` in [data].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint written by `train`.
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of `seg_<id>.pgm` (and `bnd_<id>.pgm`) probability maps.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// train, val or test.
        #[arg(long)]
        subset: Option<String>,
        /// Fuse with the boundary map and apply an opening before scoring.
        #[arg(long)]
        postprocess: bool,
    },
    /// Train over a grid of auxiliary loss weights.
    Sweep(RunArgs),
    /// Train the S, S+R, S+B and S+B+R variants and report all five rows.
    Ablation(RunArgs),
}

fn load_config(common: &Common, data: Option<&PathBuf>) -> anyhow::Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    if let Some(d) = data {
        cfg.data.dataset = Some(d.clone());
    }
    Ok(cfg)
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let usage = Failure::Usage;
    let runtime = Failure::Runtime;
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(&c, None).map_err(usage)?;
            let ds = commands::gen_data(&cfg, &c.out, c.force).map_err(runtime)?;
            let s = &ds.split;
            println!(
                "wrote {} scenes to {} (train {}, val {}, test {})",
                ds.len(),
                c.out.display(),
                s.train.len(),
                s.val.len(),
                s.test.len()
            );
        }
        Command::Train(a) => {
            let cfg = load_config(&a.common, a.data.as_ref()).map_err(usage)?;
            let r = commands::train_cmd(&cfg, &a.common.out, a.common.force, a.verbose).map_err(runtime)?;
            println!(
                "best epoch {}; test iou {:.4} f1 {:.4}; artifacts in {}",
                r.outcome.best_epoch,
                r.test.iou,
                r.test.f1,
                a.common.out.display()
            );
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            predictions,
            subset,
            postprocess,
        } => {
            let mut cfg = load_config(&common, data.as_ref()).map_err(usage)?;
            if let Some(s) = subset {
                cfg.eval.subset = s.parse().map_err(|e| usage(anyhow::Error::new(e)))?;
            }
            cfg.eval.postprocess |= postprocess;
            let req = EvalRequest {
                checkpoint: checkpoint.as_deref(),
                predictions: predictions.as_deref(),
            };
            if req.checkpoint.is_none() && req.predictions.is_none() {
                return Err(usage(anyhow::anyhow!("one of --checkpoint or --predictions is required")));
            }
            print!("{}", commands::eval_cmd(&cfg, &req, &common.out, common.force).map_err(runtime)?);
        }
        Command::Sweep(a) => {
            let cfg = load_config(&a.common, a.data.as_ref()).map_err(usage)?;
            print!("{}", commands::sweep_cmd(&cfg, &a.common.out, a.common.force, a.verbose).map_err(runtime)?);
        }
        Command::Ablation(a) => {
            let cfg = load_config(&a.common, a.data.as_ref()).map_err(usage)?;
            print!("{}", commands::ablation_cmd(&cfg, &a.common.out, a.common.force, a.verbose).map_err(runtime)?);
        }
    }
    Ok(())
}

/// Parse `args` (including the program name), run the command and return
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
