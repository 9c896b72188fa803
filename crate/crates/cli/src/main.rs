use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ovseg::data::{generate_synthetic, SyntheticSpec};
use ovseg::runner::{self, EvalOptions, RunConfig, VizOptions};
use ovseg::Error;

/// Open-vocabulary segmentation of aerial imagery.
#[derive(Parser)]
#[command(name = "ovseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run config; writes loss.log and checkpoint.ovseg.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest split; writes metrics.txt and metrics.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Evaluate over seen classes only, ignoring unseen pixels.
        #[arg(long)]
        seen_only: bool,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
    /// Render the refined-correlation magnitude of one class as a heatmap.
    VizCorr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "class")]
        class_name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Write a synthetic shapes dataset and its manifest.
    Synth {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        image_px: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        train: usize,
        #[arg(long, default_value_t = 0)]
        val: usize,
    },
    /// Average several metrics.txt files into report.txt.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
}

fn run(cli: Cli) -> ovseg::Result<()> {
    match cli.command {
        Command::Train { config, seed, max_iters, output_dir } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if max_iters.is_some() {
                cfg.train.max_iters = max_iters;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let s = runner::run_train(&cfg)?;
            if let Some(last) = s.losses.last() {
                println!("trained {} steps, final loss {}", s.iterations, last.total);
            }
            println!("checkpoint: {}", s.checkpoint.display());
            println!("loss log: {}", s.loss_log.display());
        }
        Command::Eval { checkpoint, manifest, split, seen_only, output_dir } => {
            let r = runner::run_eval(&checkpoint, &manifest, &EvalOptions { split, seen_only, output_dir })?;
            print!("{}", r.to_text());
        }
        Command::VizCorr { checkpoint, manifest, image, class_name, out, overlay } => {
            runner::run_viz_corr(&checkpoint, &manifest, &image, &VizOptions { class_name, out_path: out.clone(), overlay })?;
            println!("heatmap: {}", out.display());
        }
        Command::Synth { out_dir, seed, image_px, classes, train, val } => {
            let spec = SyntheticSpec { seed, image_px, n_classes: classes, n_train: train, n_val: val, ..Default::default() };
            println!("manifest: {}", generate_synthetic(&spec, &out_dir)?.display());
        }
        Command::Report { inputs, output_dir } => {
            print!("{}", runner::run_report(&inputs, &output_dir)?.to_text());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_numerical() => 3,
        Error::Io { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
