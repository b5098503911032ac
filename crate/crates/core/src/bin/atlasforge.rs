use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use atlasforge::geometry::{DEFAULT_DILATION_RADIUS, DEFAULT_TRAINING_PATCHES};
use atlasforge::pipeline::{self, PrepOptions, SampleOptions, SegmentOptions, TrainOptions, DEFAULT_VAL_FRACTION};
use atlasforge::sfcn::TrainConfig;

#[derive(Parser)]
#[command(name = "atlasforge", version, about = "Multi-atlas guided FCN ensembles for ROI segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Histogram-match all images and warp templates onto every grid.
    Prep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Template index used as the intensity reference.
        #[arg(long)]
        reference: Option<usize>,
    },
    /// Per-ROI patch sizes and centers from a prepared manifest.
    Geometry {
        /// The `prepared.json` written by `prep`.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DILATION_RADIUS)]
        dilation: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw and store training samples for one ROI.
    Sample {
        #[arg(long)]
        roi: u16,
        #[arg(long, default_value_t = DEFAULT_TRAINING_PATCHES)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        geometry: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
        val_fraction: f64,
        /// Offset stride of the atlas patch search.
        #[arg(long, default_value_t = 1)]
        search_stride: usize,
    },
    /// Train one ROI's ensemble from its samples.
    Train {
        #[arg(long)]
        roi: u16,
        #[arg(long, default_value_t = 3)]
        members: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        /// Same width multiplier for every member.
        #[arg(long)]
        width: Option<f64>,
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        #[arg(long, default_value_t = 5)]
        warmup_epochs: usize,
        #[arg(long, default_value_t = 15)]
        max_epochs: usize,
    },
    /// Segment a test volume listed in the prepared manifest.
    Segment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        confidence: Option<PathBuf>,
    },
    /// DSC report of a predicted label volume against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        rois: Vec<u16>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(command: Command) -> atlasforge::Result<()> {
    match command {
        Command::Prep { manifest, out, reference } => {
            let path = pipeline::prep(&PrepOptions { manifest, out, reference })?;
            println!("{}", path.display());
        }
        Command::Geometry { manifest, dilation, out } => {
            let g = pipeline::geometry(&manifest, dilation, &out)?;
            for r in &g.rois {
                println!("roi {} patch {:?}", r.roi, r.size);
            }
        }
        Command::Sample { roi, count, k, seed, out, manifest, geometry, val_fraction, search_stride } => {
            let index = pipeline::sample(&SampleOptions {
                prepared: manifest,
                geometry,
                roi,
                count,
                k,
                seed,
                val_fraction,
                search_stride,
                out,
            })?;
            println!("roi {roi}: {} samples of {:?}", index.samples.len(), index.patch_size);
        }
        Command::Train { roi, members, lr, seed, out, samples, width, batch_size, warmup_epochs, max_epochs } => {
            let config = TrainConfig {
                batch_size,
                warmup_epochs,
                learning_rate: lr,
                max_epochs,
                seed,
            };
            let index = pipeline::train(&TrainOptions { samples, roi, members, width, seed, config, out })?;
            for (m, e) in index.rois[&roi].iter().enumerate() {
                println!("roi {roi} member {m}: best epoch {} of {}", e.best_epoch, e.stopped_epoch);
            }
        }
        Command::Segment { image, models, out, confidence } => {
            pipeline::segment(&SegmentOptions { image, models, out, confidence })?;
        }
        Command::Evaluate { pred, truth, rois, out } => {
            let report = pipeline::evaluate_files(&pred, &truth, &rois, out.as_deref())?;
            for (roi, s) in &report.per_roi {
                println!("roi {roi}: {:.4}", s.mean);
            }
            println!("all labels: {:.4}", report.all_labels.mean);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
