//! Loss, optimizer, augmentation, synthetic data and the training loop.

pub mod adam;
pub mod augment;
pub mod synth;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{LrSchedule, TrainConfig};
use crate::data::{stack, ModalitySample};
use crate::error::{Error, Result};
use crate::head::{predict_labels, SegmentationMap};
use crate::io::checkpoint::save_checkpoint;
use crate::metrics::ConfusionMatrix;
use crate::model::{U3m, ENCODER_PREFIX};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{augment, AugmentDraw, AugmentFlags};
pub use synth::{synth_dataset, SynthSpec};

/// Mean per-pixel cross-entropy of `[B, N, H, W]` logits over the pixels
/// of `labels` that are not `ignore`.
pub fn cross_entropy_loss(t: &mut Tape, logits: Var, labels: &[SegmentationMap], ignore: u8) -> Result<Var> {
    let flat: Vec<u8> = labels.iter().flat_map(|l| l.data.iter().copied()).collect();
    t.cross_entropy(logits, &flat, ignore)
}

/// Logits of a stacked batch, evaluated without keeping the tape.
fn batch_logits(model: &U3m, store: &ParamStore, images: Vec<Tensor>) -> Result<Tensor> {
    let mut t = Tape::new();
    let p = t.bind(store);
    let vars: Vec<Var> = images.into_iter().map(|x| t.constant(x)).collect();
    let logits = model.forward(&mut t, &p, &vars)?;
    Ok(t.value(logits).clone())
}

/// Label maps for a batch of samples.
pub fn predict(model: &U3m, store: &ParamStore, samples: &[&ModalitySample]) -> Result<Vec<SegmentationMap>> {
    let (images, _) = stack(samples)?;
    predict_labels(&batch_logits(model, store, images)?)
}

/// Confusion matrix of the model's predictions over `samples`.
pub fn evaluate(
    model: &U3m,
    store: &ParamStore,
    samples: &[ModalitySample],
    ignore: u8,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.cfg.head.num_classes)?;
    let refs: Vec<&ModalitySample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        for (pred, s) in predict(model, store, chunk)?.iter().zip(chunk) {
            cm.update(pred, &s.label, ignore)?;
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Final weights go here; the best-mIoU epoch goes to
    /// [`best_checkpoint_path`] of it.
    pub checkpoint: Option<PathBuf>,
    /// `epoch,loss,miou` log.
    pub csv: Option<PathBuf>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    /// mIoU on the (unaugmented) training set after the epoch.
    pub miou: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    /// Loss of the very first step, before any update.
    pub initial_loss: f64,
    pub best_epoch: usize,
    pub best_miou: f64,
}

/// `model.ckpt` -> `model.best.ckpt`.
pub fn best_checkpoint_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.best.{}", ext.to_string_lossy()),
        None => format!("{stem}.best"),
    };
    path.with_file_name(name)
}

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Cosine => 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
    }
}

fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Training {
        step,
        source: Box::new(e),
    }
}

/// Trains `store` in place with Adam.
///
/// Each epoch shuffles the samples, augments each one with a fresh draw and
/// steps once per batch. After every epoch the training-set mIoU is
/// measured, logged through `on_epoch` and the CSV, and the best epoch is
/// checkpointed. Everything random comes from `cfg.seed`, so runs are
/// bit-reproducible. `lr = 0` is accepted and leaves the weights unchanged.
pub fn train(
    model: &U3m,
    store: &mut ParamStore,
    data: &[ModalitySample],
    cfg: &TrainConfig,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("lr {} must be finite and non-negative", cfg.lr)));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be >= 1".into()));
    }
    let (h, w) = (data[0].height(), data[0].width());
    model
        .cfg
        .validate_for((h, w))
        .map_err(|e| Error::Data(format!("training images are {h}x{w}: {e}")))?;

    store.set_trainable_prefix(ENCODER_PREFIX, !cfg.freeze_encoders);
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    };
    let flags = AugmentFlags {
        hflip: cfg.hflip,
        rotate: cfg.rotate,
        scale: cfg.scale,
    };
    let mut state = AdamState::new(store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = opts.max_steps.unwrap_or(usize::MAX).min(steps_per_epoch * cfg.epochs);

    let mut csv = match &opts.csv {
        Some(path) => {
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "epoch,loss,miou").map_err(|e| Error::io(path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let mut saved_cfg = model.cfg.clone();
    saved_cfg.train = cfg.clone();

    let mut report = TrainReport {
        best_miou: f64::NEG_INFINITY,
        ..TrainReport::default()
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if report.steps >= total {
                break;
            }
            let step = report.steps + 1;
            let augmented: Vec<ModalitySample> = batch
                .iter()
                .map(|&i| augment(&data[i], &mut rng, flags, cfg.ignore_index))
                .collect();
            let refs: Vec<&ModalitySample> = augmented.iter().collect();
            let (images, labels) = stack(&refs)?;

            let mut t = Tape::new();
            let p = t.bind(store);
            let vars: Vec<Var> = images.into_iter().map(|x| t.constant(x)).collect();
            let logits = model.forward(&mut t, &p, &vars).map_err(at_step(step))?;
            let loss = match t.cross_entropy(logits, &labels, cfg.ignore_index) {
                // an all-ignored batch (possible after heavy cropping) carries no signal
                Err(Error::DegenerateBatch) => continue,
                other => other.map_err(at_step(step))?,
            };
            let loss_value = t.value(loss).item()?;
            let grads = t.backward(loss).map_err(at_step(step))?;
            if let Some((name, _)) = grads.params().iter().find(|(_, g)| !g.is_finite()) {
                return Err(at_step(step)(Error::Evaluation(format!(
                    "non-finite gradient for `{name}`"
                ))));
            }
            let lr = lr_at(cfg, report.steps, total);
            adam_step(store, &grads, &mut state, &AdamConfig { lr, ..adam }).map_err(at_step(step))?;
            if report.steps == 0 {
                report.initial_loss = loss_value;
            }
            report.steps = step;
            loss_sum += loss_value;
            loss_count += 1;
        }
        if loss_count == 0 {
            break 'epochs;
        }

        let miou = evaluate(model, store, data, cfg.ignore_index, cfg.batch_size)?.miou()?;
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / loss_count as f64,
            miou,
        };
        if let Some((path, f)) = csv.as_mut() {
            writeln!(f, "{},{:.6},{:.6}", rec.epoch, rec.loss, rec.miou).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if miou > report.best_miou {
            report.best_miou = miou;
            report.best_epoch = epoch;
            if let Some(path) = &opts.checkpoint {
                save_checkpoint(&best_checkpoint_path(path), &saved_cfg, store)?;
            }
        }
        on_epoch(&rec);
        report.epochs.push(rec);
        if report.steps >= total {
            break;
        }
    }
    if let Some(path) = &opts.checkpoint {
        save_checkpoint(path, &saved_cfg, store)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn setup(n: usize) -> (U3m, ParamStore, Vec<ModalitySample>, TrainConfig) {
        let cfg = ModelConfig::desk(vec![3, 1], 3, (32, 32));
        let (model, store) = U3m::new(&cfg, 1).unwrap();
        let data = synth_dataset(&SynthSpec::new(n, 2, 3, 32, 4)).unwrap();
        let tc = TrainConfig {
            lr: 1e-3,
            batch_size: 2,
            epochs: 1,
            ..TrainConfig::default()
        };
        (model, store, data, tc)
    }

    fn snapshot(store: &ParamStore) -> Vec<u64> {
        store
            .iter()
            .flat_map(|p| p.tensor.data().to_vec())
            .map(f64::to_bits)
            .collect()
    }

    #[test]
    fn uniform_logits_give_log_n() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(&[1, 5, 2, 2]));
        let labels = [SegmentationMap::new(2, 2, vec![0, 4, 255, 2]).unwrap()];
        let l = cross_entropy_loss(&mut t, logits, &labels, 255).unwrap();
        assert!((t.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-12);
        let ignored = [SegmentationMap::filled(2, 2, 255)];
        assert!(matches!(
            cross_entropy_loss(&mut t, logits, &ignored, 255),
            Err(Error::DegenerateBatch)
        ));
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let (model, mut store, data, mut tc) = setup(4);
        tc.lr = 0.0;
        tc.epochs = 2;
        let before = snapshot(&store);
        let r = train(&model, &mut store, &data, &tc, &TrainOptions::default(), |_| {}).unwrap();
        assert_eq!(r.steps, 4);
        assert_eq!(snapshot(&store), before);
    }

    #[test]
    fn frozen_encoders_keep_their_bytes() {
        let (model, mut store, data, mut tc) = setup(2);
        tc.freeze_encoders = true;
        let enc = |s: &ParamStore| {
            s.iter()
                .filter(|p| p.name.starts_with(ENCODER_PREFIX))
                .flat_map(|p| p.tensor.data().to_vec())
                .map(f64::to_bits)
                .collect::<Vec<_>>()
        };
        let before = (enc(&store), snapshot(&store));
        train(&model, &mut store, &data, &tc, &TrainOptions::default(), |_| {}).unwrap();
        assert_eq!(enc(&store), before.0);
        assert_ne!(snapshot(&store), before.1);
    }

    #[test]
    fn nan_weight_aborts_at_first_step() {
        let (model, mut store, data, tc) = setup(2);
        let id = store.id("head.cls.w").unwrap();
        store.tensor_mut(id).data_mut()[0] = f64::NAN;
        match train(&model, &mut store, &data, &tc, &TrainOptions::default(), |_| {}) {
            Err(Error::Training { step, .. }) => assert_eq!(step, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn writes_csv_and_checkpoints() {
        let (model, mut store, data, mut tc) = setup(2);
        tc.epochs = 2;
        let tmp = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            checkpoint: Some(tmp.path().join("m.ckpt")),
            csv: Some(tmp.path().join("log.csv")),
            max_steps: None,
        };
        let mut seen = vec![];
        let r = train(&model, &mut store, &data, &tc, &opts, |e| seen.push(e.epoch)).unwrap();
        assert_eq!(seen, vec![1, 2]);
        let csv = std::fs::read_to_string(tmp.path().join("log.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,loss,miou");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
        assert!(tmp.path().join("m.ckpt").is_file());
        assert!(tmp.path().join("m.best.ckpt").is_file());
        assert!(r.best_epoch >= 1);
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let tc = TrainConfig {
            lr: 1.0,
            lr_schedule: LrSchedule::Cosine,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(&tc, 0, 10), 1.0);
        assert!((lr_at(&tc, 5, 10) - 0.5).abs() < 1e-15);
        assert!(lr_at(&tc, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn best_path_naming() {
        assert_eq!(
            best_checkpoint_path(Path::new("/a/m.ckpt")),
            Path::new("/a/m.best.ckpt")
        );
        assert_eq!(best_checkpoint_path(Path::new("m")), Path::new("m.best"));
    }
}
