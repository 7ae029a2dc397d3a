//! `pulsemae`: data generation, training, fine-tuning, evaluation, classical
//! baselines and the gradient suite from the command line.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 numeric failure.

mod commands;
mod config;
mod dataset;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use pulsemae::teacher::TeacherKind;

#[derive(Parser)]
#[command(name = "pulsemae", version, about = "Self-supervised rPPG pretraining on synthetic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.pretrain.mask_ratio=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<config::RunConfig> {
        let mut cfg = config::load(self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic clips with ground truth and a split manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of clips; alone it means seeds `0..N` in one split.
        #[arg(long)]
        n_clips: Option<u64>,
        /// Scene spec (TOML); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// `name=A..B` seed range per split; repeatable, must be disjoint.
        #[arg(long = "seed-range", value_name = "NAME=A..B")]
        seed_ranges: Vec<String>,
        /// Override a scene-spec key, e.g. `--set noise_sigma=0`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Staged pretraining; writes history.csv and stage checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run stages up to and including this one.
        #[arg(long)]
        stage: Option<usize>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Supervised fine-tuning of a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-clip and aggregate HR metrics of a checkpoint or a predictions directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Restrict to one split of the dataset.
        #[arg(long)]
        split: Option<String>,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of `<id>.bvp.ndt1` predicted waveforms.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// CHROM or POS on a dataset.
    Baseline {
        #[arg(long, value_parser = parse_method)]
        method: TeacherKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value = "runs/baseline")]
        out: PathBuf,
    },
    /// Finite-difference checks of every registered gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Only cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value = "runs/gradcheck")]
        out: PathBuf,
    },
}

fn parse_method(s: &str) -> std::result::Result<TeacherKind, String> {
    match s {
        "chrom" => Ok(TeacherKind::Chrom),
        "pos" => Ok(TeacherKind::Pos),
        other => Err(format!("unknown method {other:?} (chrom|pos)")),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            n_clips,
            spec,
            seed_ranges,
            overrides,
        } => commands::gen_data(&out, n_clips, spec.as_deref(), &seed_ranges, &overrides),
        Command::Train { cfg, stage, resume } => commands::train(cfg.load()?, stage, resume.as_deref()),
        Command::Finetune { cfg, checkpoint } => commands::finetune_cmd(cfg.load()?, &checkpoint),
        Command::Eval {
            data,
            split,
            checkpoint,
            predictions,
            out,
        } => commands::eval(&data, split.as_deref(), checkpoint.as_deref(), predictions.as_deref(), &out),
        Command::Baseline {
            method,
            data,
            split,
            out,
        } => commands::baseline(method, &data, split.as_deref(), &out),
        Command::Gradcheck { seeds, filter, out } => commands::gradcheck(seeds, filter.as_deref(), &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        e.downcast_ref::<commands::NumericFailure>().is_some()
            || matches!(e.downcast_ref::<pulsemae::Error>(), Some(pulsemae::Error::NonFinite { .. }))
    });
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
