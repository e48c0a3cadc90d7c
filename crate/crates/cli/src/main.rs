//! `omnimvs`: generate synthetic corpora, estimate depth, train and evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use omnimvs::ErrorKind;

use config::{FlagValues, Profile};

#[derive(Parser, Debug)]
#[command(name = "omnimvs", version, about = "Omnidirectional multi-view stereo from a fisheye rig")]
struct Cli {
    /// TOML run configuration; flags take precedence
    #[arg(long, global = true, env = "OMNIMVS_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, env = "OMNIMVS_PROFILE")]
    profile: Option<Profile>,
    /// rig calibration TOML
    #[arg(long, global = true, env = "OMNIMVS_RIG")]
    rig: Option<PathBuf>,
    /// sweep grid as HxWxN
    #[arg(long, global = true, env = "OMNIMVS_GRID")]
    grid: Option<String>,
    /// maximum inverse depth, 1/m
    #[arg(long, global = true, env = "OMNIMVS_DMAX")]
    dmax: Option<f64>,
    #[arg(long, global = true, env = "OMNIMVS_SEED")]
    seed: Option<u64>,
    /// output directory
    #[arg(long, global = true, env = "OMNIMVS_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic corpus with ground truth
    Generate {
        #[arg(long, default_value_t = 8)]
        frames: usize,
    },
    /// Estimate depth index maps for corpus frames
    Estimate {
        /// omnimvs, zncc-wta, zncc-sgm or stitch
        #[arg(long, env = "OMNIMVS_METHOD")]
        method: Option<String>,
        #[arg(long)]
        dataset: PathBuf,
        /// frame directory names (default: all)
        #[arg(long = "frame")]
        frames: Vec<String>,
        /// trained model for the omnimvs method
        #[arg(long, env = "OMNIMVS_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        /// also write the cost volume
        #[arg(long)]
        dump_cost: bool,
    },
    /// Train the network on a corpus
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// total optimization steps (overrides epochs)
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        /// train on the first K frames at a constant rate without augmentation
        #[arg(long)]
        overfit: Option<usize>,
        /// continue from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        no_augment: bool,
    },
    /// Score predictions against corpus ground truth
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let method = match &cli.command {
        Command::Estimate { method, .. } => method.clone(),
        _ => None,
    };
    let flags = FlagValues {
        profile: cli.profile,
        rig: cli.rig.clone(),
        grid: cli.grid.clone(),
        dmax: cli.dmax,
        method,
        seed: cli.seed,
        out: cli.out.clone(),
    };
    let mut cfg = config::resolve(&flags, cli.config.as_deref())?;
    match cli.command {
        Command::Generate { frames } => commands::generate(&cfg, frames),
        Command::Estimate { dataset, frames, checkpoint, dump_cost, .. } => {
            commands::estimate(cfg, &dataset, &frames, checkpoint.as_deref(), dump_cost)
        }
        Command::Train { dataset, steps, epochs, lr, overfit, resume, no_augment } => {
            if let Some(s) = steps {
                cfg.train.steps = Some(s);
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.train.steps = steps;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
                cfg.train.lr_late = lr;
            }
            if no_augment {
                cfg.train.permute_cameras = false;
                cfg.train.max_yaw_columns = 0;
            }
            commands::train(cfg, &dataset, &commands::TrainOptions { overfit, resume })
        }
        Command::Eval { predictions, dataset } => commands::evaluate(cfg, &predictions, &dataset),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<omnimvs::Error>()).map(|e| e.kind()) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Internal) => 4,
        // bare I/O failures are data problems; anything else is ours
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 3,
        None => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
