//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.
//! Diagnostics go to the error stream; results (accuracies, summaries) go to
//! the output stream.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::noise::{GaussianScale, NoiseKind};
use crate::data::{self, netpbm, Dataset, SceneSpec, Split};
use crate::exec::Exec;
use crate::experiments::{
    self, NamedModel, SweepGrid, DEFAULT_LAMBDAS, DEFAULT_LEARNING_RATES, DEFAULT_SEEDS,
};
use crate::explain;
use crate::model::{EncoderConfig, ModelParams, Variant};
use crate::train::{self, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "maskselect",
    version,
    about = "Learnable spatial feature masks for scene recognition"
)]
struct Cli {
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Weight of the L1 mask regularizer.
    #[arg(long = "lambda", global = true)]
    lambda: Option<f64>,
    /// Adam learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Read Gaussian noise levels as standard deviations instead of variances.
    #[arg(long, global = true)]
    noise_as_stddev: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct TrainingFlags {
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Output channels of each conv block.
    #[arg(long, value_delimiter = ',', default_value = "8,16")]
    blocks: Vec<usize>,
    /// Nearest-neighbor resize on ingest, e.g. 224x224.
    #[arg(long, value_parser = parse_size)]
    resize: Option<(usize, usize)>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset with a 60/20/20 manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 6)]
        cue_size: usize,
        #[arg(long, default_value_t = 5)]
        clutter: usize,
        #[arg(long, default_value_t = 0.3)]
        occlusion: f64,
        /// Per-pixel texture amplitude on the 0-255 scale.
        #[arg(long, default_value_t = 0)]
        texture: u8,
    },
    /// Train a model and write its checkpoint and per-epoch record.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "masked")]
        variant: Variant,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        record: Option<PathBuf>,
        #[command(flatten)]
        training: TrainingFlags,
    },
    /// Print the accuracy of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Accuracy of checkpoints on noise-corrupted test images.
    Robustness {
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "gaussian")]
        kind: NoiseKind,
        /// Defaults to 0,5,10,15,20,25 (gaussian) or 0,…,0.005 (salt_pepper).
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learning-rate × λ sensitivity sweep of the masked model.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',')]
        lrs: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        training: TrainingFlags,
    },
    /// Write a Grad-CAM heatmap for one image as a PGM.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "class")]
        class: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-cell mask values and summary statistics as CSV.
    MaskReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(Error::at_path(path))
}

fn model_config_for(data: &Dataset, blocks: Vec<usize>) -> Result<EncoderConfig> {
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::config("manifest has an empty train split"))?;
    let cfg = EncoderConfig {
        height: first.raw.height,
        width: first.raw.width,
        channels: 3,
        block_channels: blocks,
        n_classes: data.n_classes,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(cli: &Cli, variant: Variant, flags: &TrainingFlags) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        learning_rate: cli.lr.unwrap_or(d.learning_rate),
        lambda: cli.lambda.unwrap_or(d.lambda),
        batch_size: flags.batch_size,
        max_epochs: flags.max_epochs,
        patience: flags.patience,
        seed: cli.seed.unwrap_or(d.seed),
        variant,
    }
}

fn load_for(params: &ModelParams, manifest: &Path) -> Result<Dataset> {
    Dataset::load(manifest, Some((params.config.height, params.config.width)))
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let exec = Exec::default();
    let scale = if cli.noise_as_stddev {
        GaussianScale::StdDev
    } else {
        GaussianScale::Variance
    };
    match &cli.command {
        Command::GenData {
            out: dir,
            classes,
            per_class,
            size,
            cue_size,
            clutter,
            occlusion,
            texture,
        } => {
            let spec = SceneSpec {
                n_classes: *classes,
                images_per_class: *per_class,
                height: *size,
                width: *size,
                cue_size: *cue_size,
                clutter_count: *clutter,
                occlusion_prob: *occlusion,
                seed: cli.seed.unwrap_or(0),
                texture_amplitude: *texture,
                ..Default::default()
            };
            let m = data::generate_dataset(&spec, dir, exec)?;
            writeln!(
                out,
                "wrote {} images: train {}, val {}, test {}",
                m.rows.len(),
                m.count(Split::Train),
                m.count(Split::Val),
                m.count(Split::Test)
            )?;
        }
        Command::Train {
            manifest,
            variant,
            checkpoint,
            record,
            training,
        } => {
            let data = Dataset::load(manifest, training.resize)?;
            let model = model_config_for(&data, training.blocks.clone())?;
            let config = train_config(cli, *variant, training);
            let (params, rec) = train::train(&config, &model, &data.train, &data.val)?;
            save_checkpoint(&params, checkpoint)?;
            if let Some(path) = record {
                write_file(path, rec.to_csv())?;
            }
            let best = &rec.epochs[rec.best_epoch - 1];
            writeln!(
                out,
                "best epoch {} of {}: val_loss {} val_acc {}",
                rec.best_epoch, rec.stopping_epoch, best.val_loss, best.val_acc
            )?;
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
        } => {
            let params = load_checkpoint(checkpoint)?;
            let data = load_for(&params, manifest)?;
            let eval = train::evaluate(&params, data.split(*split), exec)?;
            writeln!(out, "{}", eval.accuracy)?;
        }
        Command::Robustness {
            checkpoints,
            manifest,
            kind,
            levels,
            seeds,
            out: csv,
        } => {
            let models = checkpoints
                .iter()
                .map(|p| {
                    Ok(NamedModel {
                        name: p
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_default(),
                        params: load_checkpoint(p)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let data = load_for(&models[0].params, manifest)?;
            let levels = levels
                .clone()
                .unwrap_or_else(|| kind.default_levels().to_vec());
            let seeds = seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
            let rows = experiments::robustness_sweep(
                &models, *kind, &levels, &seeds, scale, &data.test, exec,
            )?;
            write_file(csv, experiments::robustness_csv(&rows))?;
            writeln!(out, "wrote {} rows to {}", rows.len(), csv.display())?;
        }
        Command::Sweep {
            manifest,
            lrs,
            lambdas,
            seeds,
            out: csv,
            training,
        } => {
            let data = Dataset::load(manifest, training.resize)?;
            let model = model_config_for(&data, training.blocks.clone())?;
            let grid = SweepGrid {
                learning_rates: lrs
                    .clone()
                    .unwrap_or_else(|| DEFAULT_LEARNING_RATES.to_vec()),
                lambdas: lambdas.clone().unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec()),
                seeds: seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec()),
            };
            let base = train_config(cli, Variant::Masked, training);
            let rows = experiments::sensitivity_sweep(&grid, &base, &model, &data, exec)?;
            write_file(csv, experiments::sensitivity_csv(&rows))?;
            writeln!(out, "wrote {} rows to {}", rows.len(), csv.display())?;
        }
        Command::Explain {
            checkpoint,
            image,
            class,
            out: pgm,
        } => {
            let params = load_checkpoint(checkpoint)?;
            let img = netpbm::read_image(image, Some((params.config.height, params.config.width)))?;
            let heat = explain::grad_cam(&params, &img, *class)?;
            netpbm::write_pnm(&heat.upsampled, pgm)?;
            writeln!(
                out,
                "class {} confidence {}",
                heat.target_class, heat.confidence
            )?;
        }
        Command::MaskReport {
            checkpoint,
            out: csv,
        } => {
            let params = load_checkpoint(checkpoint)?;
            let report = explain::mask_report(&params)?;
            write_file(csv, report.to_csv())?;
            writeln!(out, "mean {} suppressed {}", report.mean, report.suppressed)?;
        }
    }
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Usage(_) => 1,
                _ => 2,
            }
        }
    }
}
