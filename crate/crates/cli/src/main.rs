use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparselabel_cli::bundle::ModelBundle;
use sparselabel_cli::commands::{self, BenchmarkReport, Detections};
use sparselabel_cli::config::{Overrides, RunConfig};
use sparselabel_cli::manifest::Manifest;
use sparselabel_cli::Result;

/// Sparse code transfer: learn patch dictionaries, learn a per-pixel
/// label transfer from sparse codes, and label new images.
#[derive(Parser)]
#[command(name = "sparselabel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        RunConfig::load(
            self.config.as_deref(),
            Overrides {
                seed: self.seed,
                workers: self.workers,
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn one dictionary per network path from the training split.
    TrainDicts {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the label transfer on the training split and write a bundle.
    TrainTransfer {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory of `train-dicts`.
        #[arg(long)]
        dicts: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Label images with a trained bundle.
    Infer {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score a bundle, or precomputed boundary maps, on the test split.
    Benchmark {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
        bundle: Option<PathBuf>,
        /// Directory of `<image stem>.png` boundary maps.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Describe a bundle, dictionary set or dictionary file and write
    /// atom mosaics.
    Inspect {
        target: PathBuf,
        /// Directory for `<path>_atoms.png` mosaics.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainDicts { manifest, common } => {
            let cfg = common.config()?;
            let manifest = Manifest::load(&manifest)?;
            let set = commands::with_workers(cfg.workers, || commands::train_dicts(&manifest, &cfg, &common.out))??;
            println!("wrote {} dictionaries to {}", set.dictionaries.len(), common.out.display());
        }
        Command::TrainTransfer { manifest, dicts, common } => {
            let cfg = common.config()?;
            let manifest = Manifest::load(&manifest)?;
            commands::with_workers(cfg.workers, || commands::train_transfer(&manifest, &dicts, &cfg, &common.out))??;
            println!(
                "wrote bundle {} (content hash {})",
                common.out.display(),
                ModelBundle::content_hash(&common.out)?
            );
        }
        Command::Infer { bundle, common, images } => {
            let cfg = common.config()?;
            let bundle = ModelBundle::load(&bundle)?;
            let outs = commands::with_workers(cfg.workers, || commands::infer(&bundle, &images, &common.out))??;
            println!("labeled {} images into {}", outs.len(), common.out.display());
        }
        Command::Benchmark {
            manifest,
            bundle,
            detections,
            common,
        } => {
            let cfg = common.config()?;
            let manifest = Manifest::load(&manifest)?;
            let bundle = bundle.map(|b| ModelBundle::load(&b)).transpose()?;
            let source = match (&bundle, &detections) {
                (Some(b), _) => Detections::Bundle(b),
                (None, Some(d)) => Detections::Directory(d),
                (None, None) => unreachable!("clap requires one source"),
            };
            let report = commands::with_workers(cfg.workers, || {
                commands::benchmark(&manifest, source, &cfg.benchmark, &common.out)
            })??;
            match report {
                BenchmarkReport::Boundaries(c) => {
                    println!("ODS {:.4} (threshold {}), OIS {:.4}, AP {:.4}", c.ods_f, c.ods_threshold, c.ois_f, c.ap)
                }
                BenchmarkReport::Segmentation(r) => println!("pixel accuracy {:.4}", r.overall_accuracy),
            }
        }
        Command::Inspect { target, out } => {
            print!("{}", commands::inspect(&target, out.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
