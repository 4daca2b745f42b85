//! Command-line front end: `train`, `eval`, `predict`, `synth`, `gradcheck`.
//!
//! Exit codes: 0 on success, 1 for data, I/O or training failures, 2 for
//! usage errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::builder::PossibleValuesParser;
use clap::{Parser, Subcommand};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, MODULES};
use crate::head::SegmentationMap;
use crate::io::checkpoint::load_checkpoint;
use crate::io::config_file::{read_config, to_config_string};
use crate::io::dataset::{fit_to_32, load_dataset_dir, load_images, write_dataset_dir};
use crate::io::netpbm::{self, Image};
use crate::model::U3m;
use crate::train::{best_checkpoint_path, evaluate, predict, synth_dataset, train, SynthSpec, TrainOptions};

/// Environment variable that overrides the training seed.
pub const SEED_ENV: &str = "U3M_SEED";

/// Config file `synth` writes next to the splits; `train` falls back to it.
pub const DATASET_CONFIG: &str = "config.ini";

#[derive(Debug, Parser)]
#[command(name = "u3m", version, about = "Multimodal semantic segmentation")]
struct Cli {
    /// Prefix log lines with a Unix timestamp.
    #[arg(long, global = true)]
    timestamps: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        /// Config file; defaults to DATA/config.ini.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Checkpoint path; the best epoch is also saved as NAME.best.EXT.
        #[arg(long)]
        out: PathBuf,
        /// Write an `epoch,loss,miou` CSV here.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write per-class IoU as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Segment one sample directory into a PGM label map.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset split plus DIR/config.ini.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        modalities: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value = "train")]
        split: String,
        /// Fraction of samples whose modality 0 is pure noise.
        #[arg(long, default_value_t = 0.25)]
        degraded: f64,
    },
    /// Run the registered gradient checks.
    Gradcheck {
        #[arg(long, value_parser = PossibleValuesParser::new(MODULES))]
        module: Option<String>,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

struct Log<'a> {
    out: &'a mut dyn Write,
    timestamps: bool,
}

impl Log<'_> {
    fn line(&mut self, msg: &str) -> Result<()> {
        let res = if self.timestamps {
            let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
            writeln!(self.out, "[{}.{:03}] {msg}", now.as_secs(), now.subsec_millis())
        } else {
            writeln!(self.out, "{msg}")
        };
        res.map_err(|e| Error::io("<stdout>", e))
    }
}

/// Runs the CLI with the process environment, stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let seed = std::env::var(SEED_ENV).ok();
    run_with(args, seed.as_deref(), &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run`] with an explicit seed override and output streams.
pub fn run_with<I, T>(args: I, env_seed: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let mut log = Log {
        out,
        timestamps: cli.timestamps,
    };
    match dispatch(cli.command, env_seed, &mut log) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
        Err(Failure::Run(e)) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command, env_seed: Option<&str>, log: &mut Log<'_>) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Train {
            config,
            data,
            split,
            out,
            log: csv,
            lr,
            epochs,
            batch_size,
            seed,
        } => {
            let env_seed = env_seed
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| Failure::Usage(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))
                })
                .transpose()?;
            let config = config.unwrap_or_else(|| data.join(DATASET_CONFIG));
            let mut cfg = read_config(&config)?;
            if let Some(s) = env_seed {
                cfg.train.seed = s;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            cmd_train(&cfg, &data, &split, &out, csv, log)?;
        }
        Command::Eval { ckpt, data, split, csv } => cmd_eval(&ckpt, &data, &split, csv.as_deref(), log)?,
        Command::Predict { ckpt, sample, out } => cmd_predict(&ckpt, &sample, &out, log)?,
        Command::Synth {
            out,
            n,
            modalities,
            classes,
            seed,
            size,
            split,
            degraded,
        } => {
            let spec = SynthSpec {
                degraded_fraction: degraded,
                ..SynthSpec::new(n, modalities, classes, size, seed)
            };
            let samples = synth_dataset(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
            write_dataset_dir(&out, &split, &samples)?;
            let cfg = ModelConfig::desk(spec.in_channels(), classes, (size, size));
            let path = out.join(DATASET_CONFIG);
            std::fs::write(&path, to_config_string(&cfg)).map_err(|e| Error::io(&path, e))?;
            log.line(&format!("wrote {n} samples to {}", out.join(&split).display()))?;
        }
        Command::Gradcheck { module } => {
            let entries = run_suite(module.as_deref())?;
            let mut failed = 0;
            for e in &entries {
                log.line(&e.line())?;
                failed += usize::from(!e.passed());
            }
            if failed > 0 {
                return Err(Error::Evaluation(format!("{failed} of {} gradient checks failed", entries.len())).into());
            }
            log.line(&format!("all {} gradient checks passed", entries.len()))?;
        }
    }
    Ok(())
}

fn cmd_train(
    cfg: &ModelConfig,
    data: &Path,
    split: &str,
    out: &Path,
    csv: Option<PathBuf>,
    log: &mut Log<'_>,
) -> Result<()> {
    let samples = load_dataset_dir(data, split, cfg)?;
    let (h, w) = (samples[0].height(), samples[0].width());
    if (h, w) != cfg.image_size {
        return Err(Error::Data(format!(
            "{split} images are {h}x{w} but image_size is {}x{}",
            cfg.image_size.0, cfg.image_size.1
        )));
    }
    let (model, mut store) = U3m::new(cfg, cfg.train.seed)?;
    log.line(&format!(
        "training on {} samples, {} parameters, {} modalities",
        samples.len(),
        store.num_scalars(),
        cfg.modalities()
    ))?;
    let opts = TrainOptions {
        checkpoint: Some(out.to_path_buf()),
        csv,
        max_steps: None,
    };
    let mut write_err = None;
    let report = train(&model, &mut store, &samples, &cfg.train, &opts, |e| {
        if write_err.is_none() {
            write_err = log
                .line(&format!("epoch {} loss {:.6} miou {:.4}", e.epoch, e.loss, e.miou))
                .err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    log.line(&format!(
        "saved {} (best epoch {} miou {:.4} in {})",
        out.display(),
        report.best_epoch,
        report.best_miou,
        best_checkpoint_path(out).display()
    ))
}

fn cmd_eval(ckpt: &Path, data: &Path, split: &str, csv: Option<&Path>, log: &mut Log<'_>) -> Result<()> {
    let (model, store) = load_checkpoint(ckpt)?.into_model()?;
    let cfg = &model.cfg;
    let samples = load_dataset_dir(data, split, cfg)?;
    let cm = evaluate(&model, &store, &samples, cfg.train.ignore_index, cfg.train.batch_size)?;
    let names = cfg.class_names();
    for l in cm.format_table(&names)?.lines() {
        log.line(l)?;
    }
    if let Some(path) = csv {
        std::fs::write(path, cm.to_csv(&names)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_predict(ckpt: &Path, sample: &Path, out: &Path, log: &mut Log<'_>) -> Result<()> {
    let (model, store) = load_checkpoint(ckpt)?.into_model()?;
    let cfg = &model.cfg;
    let images = load_images(sample, cfg)?;
    let (h, w) = (images[0].shape()[1], images[0].shape()[2]);
    let placeholder = SegmentationMap::filled(h, w, cfg.train.ignore_index);
    let padded = fit_to_32(sample, cfg, images, placeholder)?;
    let pred = predict(&model, &store, &[&padded])?.remove(0);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        data.extend_from_slice(&pred.data[r * pred.width..r * pred.width + w]);
    }
    netpbm::write_file(out, &Image::new(w, h, 1, data)?)?;
    log.line(&format!("wrote {}x{} prediction to {}", h, w, out.display()))
}
