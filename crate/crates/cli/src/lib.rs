//! Command-line front end: experiment configuration, subcommands and the
//! stable exit-code contract (0 success, 2 configuration error, 3
//! data/I-O error, 4 numerical failure).

pub mod commands;
pub mod config;

use clap::{Parser, Subcommand};
use config::ConfigBuilder;
use ncd_core::Error;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "ncd",
    version,
    about = "Train small CNN classifiers and detect samples from unseen classes"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment configuration file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed from the configuration file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Additional `key=value` overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> ncd_core::Result<config::ExperimentConfig> {
        let mut builder = ConfigBuilder::from_file(&self.config)?;
        builder.apply_overrides(&self.sets)?;
        if let Some(seed) = self.seed {
            builder.set("seed", seed.to_string());
        }
        if let Some(out) = &self.out {
            builder.set("out", out.display().to_string());
        }
        builder.build()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and write a checkpoint plus a training log.
    Train(ConfigArgs),
    /// Run balanced K-fold cross-validation.
    Cv(ConfigArgs),
    /// Leave-classes-out training, scoring and new-class detection.
    Ood(ConfigArgs),
    /// Merge several run directories into comparison tables.
    Report {
        /// Output directory for the merged tables.
        #[arg(long)]
        out: PathBuf,
        /// Run directories (each containing a summary.json).
        runs: Vec<PathBuf>,
    },
    /// Render convolution feature maps of one image under a checkpoint.
    FeatureMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated layer names (conv1, mp2, ...).
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => 3,
        Error::Numerical(_) => 4,
    }
}

/// Runs a parsed invocation; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(args) => args.build().and_then(|cfg| {
            commands::train::cmd_train(&cfg).map(|outcome| {
                println!("checkpoint written to {}", outcome.checkpoint.display());
                if let Some(e) = outcome.log.epochs.last() {
                    println!(
                        "final epoch: loss {:.4}, train accuracy {:.4}",
                        e.mean_loss, e.accuracy
                    );
                }
            })
        }),
        Command::Cv(args) => args.build().and_then(|cfg| {
            commands::cv::cmd_cv(&cfg).map(|outcome| {
                for r in &outcome.summary.repeats {
                    println!(
                        "repeat {}: folds {:?} -> overall {:.4}",
                        r.repeat,
                        r.fold_accuracies
                            .iter()
                            .map(|a| format!("{a:.3}"))
                            .collect::<Vec<_>>(),
                        r.overall_accuracy
                    );
                }
                println!(
                    "mean overall accuracy: {:.4}",
                    outcome.summary.mean_overall_accuracy
                );
            })
        }),
        Command::Ood(args) => args.build().and_then(|cfg| {
            commands::ood::cmd_ood(&cfg).map(|summary| {
                println!("classifier accuracy on T: {:.4}", summary.cnn_accuracy);
                for m in &summary.modes {
                    let aucs: Vec<String> = m
                        .auc_full
                        .iter()
                        .map(|(l, a)| format!("{l} {a:.4}"))
                        .collect();
                    println!(
                        "{}: AUC [{}], TPR {:.3}, TNR {:.3}",
                        m.mode,
                        aucs.join(", "),
                        m.tpr,
                        m.tnr
                    );
                }
            })
        }),
        Command::Report { out, runs } => commands::report::cmd_report(runs, out).map(|written| {
            for p in written {
                println!("wrote {}", p.display());
            }
        }),
        Command::FeatureMaps {
            checkpoint,
            image,
            layers,
            out,
        } => commands::feature_maps::cmd_feature_maps(checkpoint, image, layers, out).map(
            |written| {
                for p in written {
                    println!("wrote {}", p.display());
                }
            },
        ),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
