//! Command-line front end for the ShapePU toolkit: phantom data generation,
//! mixture-ratio estimation, training, evaluation and gradient checks.

pub mod commands;
pub mod config;
pub mod dataset;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{cmd_estimate_alpha, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train};
pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "shapepu",
    version,
    about = "Scribble-supervised segmentation with PU learning"
)]
pub struct Cli {
    /// Configuration file (key = value lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization and training order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output location: data root, run directory or report directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the train/val/test phantom splits.
    GenData {
        /// Image side length in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Estimate per-image mixture ratios of the unlabeled pixels.
    EstimateAlpha {
        /// Model checkpoint; without it a freshly initialized model is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the phantom generator's exact posteriors instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train a model on the train split.
    Train {
        /// Loss arm: l+, l+cutout, l+l-, l+cutout+l-, full.
        #[arg(long)]
        ablation: Option<String>,
        /// Continue an interrupted run from its last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Segment a split with a checkpoint and report Dice and Hausdorff distance.
    Eval {
        /// Defaults to best.ckpt in the run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Skip largest-component filtering.
        #[arg(long)]
        no_postprocess: bool,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// Corrupt one analytic gradient by this relative amount (harness self-test).
        #[arg(long, hide = true, num_args = 0..=1, default_missing_value = "0.01")]
        inject_fault: Option<f64>,
    },
}

/// Effective configuration: defaults, then the file, then `--set`, then
/// dedicated flags.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::GenData { size: Some(s) } => cfg.phantom.size = *s,
        Command::Train {
            ablation: Some(a), ..
        } => cfg.set("ablation", a)?,
        _ => {}
    }
    Ok(cfg)
}

fn configure_threads() {
    if let Ok(v) = std::env::var("SHAPEPU_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                {
                    log::warn!("could not size the worker pool: {e}");
                }
            }
            _ => log::warn!("ignoring SHAPEPU_THREADS={v:?}"),
        }
    }
}

fn execute(cli: &Cli, cfg: &RunConfig) -> anyhow::Result<i32> {
    match &cli.command {
        Command::GenData { .. } => {
            let root = cli.out.clone().unwrap_or_else(|| cfg.data_root.clone());
            let n = cmd_gen_data(cfg, &root, cli.force)?;
            println!("generated {n} phantoms in {}", root.display());
        }
        Command::EstimateAlpha {
            checkpoint,
            oracle,
            split,
        } => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.run_dir.join("alpha"));
            let rows = cmd_estimate_alpha(cfg, checkpoint.as_deref(), *oracle, split, &out)?;
            let mean = rows.iter().map(|r| r.l1).sum::<f64>() / rows.len() as f64;
            println!(
                "mean L1 error {mean:.4} over {} images ({})",
                rows.len(),
                out.join("alpha.csv").display()
            );
        }
        Command::Train { resume, .. } => {
            let dir = cli.out.clone().unwrap_or_else(|| cfg.run_dir.clone());
            let out = cmd_train(cfg, &dir, *resume, cli.force)?;
            match out.best_epoch {
                Some(e) => println!("best epoch {e}, run directory {}", dir.display()),
                None => println!("no epochs trained, run directory {}", dir.display()),
            }
        }
        Command::Eval {
            checkpoint,
            split,
            no_postprocess,
        } => {
            let ckpt = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.run_dir.join("best.ckpt"));
            let out = cli.out.clone().unwrap_or_else(|| cfg.run_dir.join("eval"));
            let s = cmd_eval(cfg, &ckpt, split, !no_postprocess, &out)?;
            println!("mean Dice {:.4} per class {:?}", s.mean_dice, s.class_dice);
        }
        Command::Gradcheck { inject_fault } => {
            let (ok, _) = cmd_gradcheck(cfg, *inject_fault, cli.out.as_deref())?;
            if !ok {
                eprintln!("gradient check failed");
                return Ok(EXIT_VERIFY);
            }
            println!("all gradient checks passed");
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    match execute(&cli, &cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
