use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use modot::config::ExperimentConfig;
use modot::data::{generate_dataset, DatasetManifest, Split};
use modot::train::{self, Checkpoint, EvalOptions, Report, TrainOptions};
use modot::{Error, Result};

#[derive(Parser)]
#[command(name = "modot", about = "Joint depth and occlusion-boundary estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset and write its manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage one or the refinement stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate stage one even for a stage-two checkpoint.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: Option<u8>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
    },
    /// Predict depth and boundaries for one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a JSON report as markdown plus a precision/recall plot.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let m = generate_dataset(&cfg.data, cfg.seed, &out)?;
            log::info!(
                "{} samples ({} train, {} test) in {}",
                m.entries.len(),
                m.split(Split::Train).len(),
                m.split(Split::Test).len(),
                out.display()
            );
            for e in &m.errors {
                log::warn!("skipped {}: {}", e.sample_id, e.reason);
            }
        }
        Cmd::Train { stage, config, resume } => {
            let cfg = ExperimentConfig::load(&config)?;
            let manifest = DatasetManifest::load(&cfg.data.root)?;
            let opts = TrainOptions {
                resume,
                stage1_checkpoint: None,
            };
            let out = if stage == 1 {
                train::train_stage1(&cfg, &manifest, &opts)?
            } else {
                train::train_stage2(&cfg, &manifest, &opts)?
            };
            log::info!("final loss {:.4}, checkpoint {}", out.last.total, out.checkpoint.display());
        }
        Cmd::Eval {
            ckpt,
            data,
            out,
            stage,
            split,
            oracle,
        } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Config(format!("unknown split {other:?}"))),
            };
            let ck = Checkpoint::load(&ckpt)?;
            let manifest = DatasetManifest::load(&data)?;
            let report = train::evaluate(&ck, &manifest, EvalOptions { stage, split, oracle })?;
            report.save(&out)?;
            log::info!(
                "RMSE {:.4} delta1 {:.4} OB recall {:.4} F {:.4}",
                report.depth.rmse,
                report.depth.delta1,
                report.ob.recall,
                report.ob.fscore
            );
        }
        Cmd::Infer { ckpt, image, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let files = train::infer(&ck, &image, &out)?;
            log::info!("wrote {}", files.depth.display());
        }
        Cmd::Report { input, out } => {
            let report = Report::load(&input)?;
            let (md, _) = train::write_report(&report, &out)?;
            log::info!("wrote {}", md.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
