//! `tongue`: train, extract, eval, experiment and synth workflows.
//!
//! Exit codes: 0 success, 2 invalid configuration or unreadable input,
//! 3 training divergence, 1 anything else.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "tongue", version, about = "Ultrasound tongue contour extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Debug, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// unet or dense_unet
    #[arg(long)]
    pub arch: Option<String>,
    /// dice, wce or compound
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(clap::Args, Clone, Debug, Default)]
pub struct PostprocessFlags {
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Spline residual budget; defaults to the number of skeleton columns.
    #[arg(long)]
    pub smoothing: Option<f64>,
    #[arg(long)]
    pub n_points: Option<usize>,
    /// largest or all
    #[arg(long)]
    pub component_policy: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Predict contours for every PNG frame in a directory.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        postprocess: PostprocessFlags,
        /// Also write frame overlays for visual QC.
        #[arg(long)]
        overlay: bool,
        /// Worker threads; defaults to the available cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score predicted contours against gold annotations.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        px_per_mm: Option<f64>,
        /// Also write an MSD histogram.
        #[arg(long)]
        plot: bool,
    },
    /// Run a sweep and write a results table plus plots.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset with manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_frames: usize,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        #[arg(long, default_value_t = 0.25)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        distractors: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tag items with train,val,test fractions, e.g. 0.45,0.05,0.5
        #[arg(long, value_delimiter = ',')]
        split: Option<Vec<f64>>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::check_device() {
        return e.exit();
    }
    let result = match cli.command {
        Command::Train {
            config,
            out,
            overrides,
        } => commands::train(&config, &out, &overrides),
        Command::Extract {
            checkpoint,
            input,
            out,
            postprocess,
            overlay,
            threads,
        } => commands::extract(&checkpoint, &input, &out, &postprocess, overlay, threads),
        Command::Eval {
            pred,
            gold,
            out,
            px_per_mm,
            plot,
        } => commands::eval(&pred, &gold, &out, px_per_mm, plot),
        Command::Experiment { config, out } => commands::experiment(&config, &out),
        Command::Synth {
            out,
            n_frames,
            image_size,
            noise,
            distractors,
            seed,
            split,
        } => commands::synth(&out, n_frames, image_size, noise, distractors, seed, split),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.exit(),
    }
}
