//! The registered gradient checks: every tape op at three shapes, then the
//! encoder, each fusion block, the head and the full model.
//!
//! Op inputs are bound as parameters with magnitudes in `[0.1, 1]` so that
//! ReLU never sits on its kink. Non-scalar outputs are reduced with a fixed
//! random projection `sum(r * y)`, which exercises every output element.
//! Module checks run at [`scatter`]ed parameters and reduce softmaxed or
//! raw outputs with `mean(r * y)`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, Tape, Var};
use crate::config::{ModelConfig, NUM_STAGES};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::fusion::FusionBlock;
use crate::gradcheck::{grad_check, scatter, GradCheckConfig, GradCheckReport};
use crate::head::SegmentationHead;
use crate::model::U3m;
use crate::param::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

pub const MODULES: &[&str] = &["ops", "encoder", "fusion", "head", "model"];

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "permute",
    "concat",
    "narrow",
    "conv2d",
    "adaptive_avg_pool2d",
    "bilinear_upsample",
    "softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "relu",
    "sum",
    "mean",
    "cross_entropy",
];

/// Shapes tried per op.
pub const VARIANTS: usize = 3;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub name: String,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err() < TOLERANCE
    }

    /// `module name coords max_rel PASS|FAIL`
    pub fn line(&self) -> String {
        format!(
            "{:<8} {:<26} coords {:>5}  max_rel {:.2e}  {}",
            self.module,
            self.name,
            self.report.coords(),
            self.report.max_rel_err(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(r * y)` for a fixed random `r`, or `y` itself when scalar.
fn project(t: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    if t.value(y).numel() == 1 {
        return Ok(y);
    }
    let r = t.constant(uniform(rng, t.shape(y)));
    let ry = t.mul(y, r)?;
    t.sum(ry)
}

fn op_store(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (i, sh) in shapes.iter().enumerate() {
        s.insert(format!("x{i}"), away_from_zero(rng, sh))?;
    }
    Ok(s)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Input shapes and the op applied to them for one registered variant.
fn op_case(name: &str, v: usize) -> Result<(Vec<Vec<usize>>, OpFn)> {
    if v >= VARIANTS {
        return Err(Error::Config(format!("op variant {v} out of range 0..{VARIANTS}")));
    }
    fn s(x: &[&[usize]]) -> Vec<Vec<usize>> {
        x.iter().map(|d| d.to_vec()).collect()
    }
    let binary = |v: usize| match v {
        0 => s(&[&[2, 3], &[2, 3]]),
        1 => s(&[&[2, 3, 4], &[4]]),
        _ => s(&[&[2, 1, 3], &[1, 4, 1]]),
    };
    let unary = |v: usize| match v {
        0 => s(&[&[5]]),
        1 => s(&[&[2, 3]]),
        _ => s(&[&[2, 3, 4, 4]]),
    };
    let case: (Vec<Vec<usize>>, OpFn) = match name {
        "add" => (binary(v), Box::new(|t, x| t.add(x[0], x[1]))),
        "sub" => (binary(v), Box::new(|t, x| t.sub(x[0], x[1]))),
        "mul" => (
            if v == 2 {
                s(&[&[2, 3, 4, 4], &[2, 3, 1, 1]])
            } else {
                binary(v)
            },
            Box::new(|t, x| t.mul(x[0], x[1])),
        ),
        "scale" => (unary(v), Box::new(|t, x| t.scale(x[0], -1.7))),
        "matmul" => (
            match v {
                0 => s(&[&[2, 3], &[3, 4]]),
                1 => s(&[&[2, 3, 4], &[2, 4, 5]]),
                _ => s(&[&[2, 2, 3, 4], &[4, 2]]),
            },
            Box::new(|t, x| t.matmul(x[0], x[1])),
        ),
        "reshape" => {
            let (shape, to): (Vec<usize>, Vec<usize>) = match v {
                0 => (vec![2, 6], vec![3, 4]),
                1 => (vec![2, 3, 4], vec![6, 4]),
                _ => (vec![24], vec![2, 3, 4]),
            };
            (vec![shape], Box::new(move |t, x| t.reshape(x[0], &to)))
        }
        "permute" => {
            let (shape, perm): (Vec<usize>, Vec<usize>) = match v {
                0 => (vec![2, 3], vec![1, 0]),
                1 => (vec![2, 3, 4], vec![2, 0, 1]),
                _ => (vec![2, 3, 4, 5], vec![0, 2, 3, 1]),
            };
            (vec![shape], Box::new(move |t, x| t.permute(x[0], &perm)))
        }
        "concat" => {
            let (shapes, axis) = match v {
                0 => (s(&[&[2, 3], &[1, 3]]), 0),
                1 => (s(&[&[2, 2, 3], &[2, 1, 3], &[2, 3, 3]]), 1),
                _ => (s(&[&[1, 2, 2, 3], &[1, 2, 2, 2]]), 3),
            };
            (shapes, Box::new(move |t, x| t.concat(x, axis)))
        }
        "narrow" => {
            let (shape, axis, start, len) = match v {
                0 => (vec![5, 3], 0, 1, 3),
                1 => (vec![2, 6, 4], 1, 2, 3),
                _ => (vec![2, 3, 4, 5], 3, 1, 4),
            };
            (vec![shape], Box::new(move |t, x| t.narrow(x[0], axis, start, len)))
        }
        "conv2d" => {
            // dense 3x3; strided 7x7 patch embedding; depthwise 5x5
            let (shapes, stride, pad, groups) = match v {
                0 => (s(&[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]]), 1, 1, 1),
                1 => (s(&[&[1, 3, 9, 9], &[4, 3, 7, 7], &[4]]), 4, 3, 1),
                _ => (s(&[&[2, 4, 6, 6], &[4, 1, 5, 5], &[4]]), 1, 2, 4),
            };
            (
                shapes,
                Box::new(move |t, x| t.conv2d(x[0], x[1], Some(x[2]), stride, pad, groups)),
            )
        }
        "adaptive_avg_pool2d" => {
            let (shape, bins) = match v {
                0 => (vec![1, 2, 6, 6], 1),
                1 => (vec![1, 2, 6, 6], 4),
                _ => (vec![2, 3, 5, 7], 3),
            };
            (vec![shape], Box::new(move |t, x| t.adaptive_avg_pool2d(x[0], bins)))
        }
        "bilinear_upsample" => {
            let (shape, oh, ow) = match v {
                0 => (vec![1, 2, 2, 2], 4, 4),
                1 => (vec![1, 1, 3, 5], 6, 10),
                _ => (vec![2, 2, 1, 3], 8, 12),
            };
            (vec![shape], Box::new(move |t, x| t.bilinear_upsample(x[0], oh, ow)))
        }
        "softmax" => {
            let (shape, axis) = match v {
                0 => (vec![3, 4], 1),
                1 => (vec![2, 3, 4], 0),
                _ => (vec![2, 5, 3, 3], 1),
            };
            (vec![shape], Box::new(move |t, x| t.softmax(x[0], axis)))
        }
        "layer_norm" => {
            let d = [6, 8, 16][v];
            let lead: Vec<usize> = match v {
                0 => vec![4],
                1 => vec![2, 3],
                _ => vec![1, 5],
            };
            let x_shape: Vec<usize> = lead.into_iter().chain([d]).collect();
            (
                vec![x_shape, vec![d], vec![d]],
                Box::new(|t, x| t.layer_norm(x[0], x[1], x[2], 1e-6)),
            )
        }
        "gelu" => (unary(v), Box::new(|t, x| t.gelu(x[0]))),
        "sigmoid" => (unary(v), Box::new(|t, x| t.sigmoid(x[0]))),
        "relu" => (unary(v), Box::new(|t, x| t.relu(x[0]))),
        "sum" => (unary(v), Box::new(|t, x| t.sum(x[0]))),
        "mean" => (unary(v), Box::new(|t, x| t.mean(x[0]))),
        "cross_entropy" => {
            let (shape, labels): (Vec<usize>, Vec<u8>) = match v {
                0 => (vec![1, 3, 2, 2], vec![0, 2, 1, 1]),
                1 => (
                    vec![2, 4, 3, 3],
                    (0..18).map(|i| if i % 5 == 0 { 255 } else { (i % 4) as u8 }).collect(),
                ),
                _ => (vec![1, 5, 4, 4], (0..16).map(|i| (i * 3 % 5) as u8).collect()),
            };
            (vec![shape], Box::new(move |t, x| t.cross_entropy(x[0], &labels, 255)))
        }
        other => return Err(Error::Config(format!("no registered gradient check for op `{other}`"))),
    };
    Ok(case)
}

/// Checks one variant of one registered op.
pub fn check_op(name: &str, variant: usize) -> Result<GradCheckReport> {
    let (shapes, f) = op_case(name, variant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b5 + variant as u64);
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let store = op_store(&mut rng, &refs)?;
    let cfg = GradCheckConfig::default();
    grad_check(
        |t, p| {
            let xs: Vec<Var> = (0..shapes.len()).map(|i| p[ParamId(i)]).collect();
            let y = f(t, &xs)?;
            project(t, y, &mut rng)
        },
        &store,
        &cfg,
    )
}

fn timed(module: &'static str, name: String, f: impl FnOnce() -> Result<GradCheckReport>) -> Result<SuiteEntry> {
    let start = Instant::now();
    let report = f()?;
    Ok(SuiteEntry {
        module,
        name,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_ops() -> Result<Vec<SuiteEntry>> {
    let mut out = vec![];
    for op in OPS {
        for v in 0..VARIANTS {
            out.push(timed("ops", format!("{op}[{v}]"), || check_op(op, v))?);
        }
    }
    Ok(out)
}

const MODULE_SCATTER_SEED: u64 = 9;

/// `mean(r * y)` for a fixed random `r`.
fn mean_project(t: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let r = t.constant(uniform(rng, t.shape(y)));
    let ry = t.mul(y, r)?;
    t.mean(ry)
}

/// Single-modality encoder on a 32x32 input, all four stage outputs.
pub fn check_encoder() -> Result<GradCheckReport> {
    let cfg = ModelConfig::desk(vec![3], 3, (32, 32));
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = Encoder::new(&mut ParamBuilder::new(&mut store, &mut rng).sub("enc"), 3, &cfg.encoder)?;
    scatter(&mut store, MODULE_SCATTER_SEED);
    let image = uniform(&mut rng, &[1, 3, 32, 32]);
    grad_check(
        |t, p| {
            let x = t.constant(image);
            let py = enc.encode(t, p, x)?;
            let mut acc: Option<Var> = None;
            for f in py.features {
                let term = mean_project(t, f, &mut rng)?;
                acc = Some(match acc {
                    Some(a) => t.add(a, term)?,
                    None => term,
                });
            }
            Ok(acc.expect("four stages"))
        },
        &store,
        &GradCheckConfig::default(),
    )
}

/// The fusion block of stage `stage` (0-based) with two modalities at its
/// 64x64-input feature shape.
pub fn check_fusion(stage: usize) -> Result<GradCheckReport> {
    let cfg = ModelConfig::desk(vec![3, 1], 3, (64, 64));
    let (h, w) = cfg.stage_sizes(cfg.image_size)[stage];
    let c = cfg.encoder.stage_channels[stage];
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2 + stage as u64);
    let bins = cfg.fusion.bins_for_extent(h.min(w));
    let block = FusionBlock::new(
        &mut ParamBuilder::new(&mut store, &mut rng).sub("fuse"),
        2,
        c,
        &bins,
        &cfg.fusion,
    )?;
    scatter(&mut store, MODULE_SCATTER_SEED);
    let feats: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, &[1, c, h, w])).collect();
    grad_check(
        |t, p| {
            let vars: Vec<Var> = feats.into_iter().map(|f| t.constant(f)).collect();
            let y = block.forward(t, p, &vars)?;
            mean_project(t, y, &mut rng)
        },
        &store,
        &GradCheckConfig::default(),
    )
}

/// Head decoding random stage features of a 32x32 input.
pub fn check_head() -> Result<GradCheckReport> {
    let cfg = ModelConfig::desk(vec![3], 3, (32, 32));
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let head = SegmentationHead::new(
        &mut ParamBuilder::new(&mut store, &mut rng).sub("head"),
        &cfg.encoder.stage_channels,
        &cfg.head,
    )?;
    scatter(&mut store, MODULE_SCATTER_SEED);
    let sizes = cfg.stage_sizes((32, 32));
    let feats: Vec<Tensor> = (0..NUM_STAGES)
        .map(|i| uniform(&mut rng, &[1, cfg.encoder.stage_channels[i], sizes[i].0, sizes[i].1]))
        .collect();
    grad_check(
        |t, p| {
            let vars: Vec<Var> = feats.into_iter().map(|f| t.constant(f)).collect();
            let stages: [Var; NUM_STAGES] = vars.try_into().expect("four stages");
            let logits = head.decode(t, p, &stages, (32, 32))?;
            let probs = t.softmax(logits, 1)?;
            mean_project(t, probs, &mut rng)
        },
        &store,
        &GradCheckConfig::default(),
    )
}

/// Objective used for the full-model check: the class posteriors projected
/// on a fixed random field, `mean(r * softmax(logits))`.
pub fn model_objective(model: &U3m, t: &mut Tape, p: &Bound, images: &[Tensor], r: &Tensor) -> Result<Var> {
    let vars: Vec<Var> = images.iter().map(|x| t.constant(x.clone())).collect();
    let logits = model.forward(t, p, &vars)?;
    let probs = t.softmax(logits, 1)?;
    let rv = t.constant(r.clone());
    let y = t.mul(probs, rv)?;
    t.mean(y)
}

/// Two-modality desk model on a 32x32 input.
pub fn check_model() -> Result<GradCheckReport> {
    let cfg = ModelConfig::desk(vec![3, 1], 3, (32, 32));
    let (model, mut store) = U3m::new(&cfg, 1)?;
    scatter(&mut store, MODULE_SCATTER_SEED);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images = vec![
        Tensor::from_fn(&[1, 3, 32, 32], |_| rng.random_range(0.0..1.0)),
        Tensor::from_fn(&[1, 1, 32, 32], |_| rng.random_range(0.0..1.0)),
    ];
    let r = uniform(&mut rng, &[1, 3, 32, 32]);
    grad_check(
        |t, p| model_objective(&model, t, p, &images, &r),
        &store,
        &GradCheckConfig::default(),
    )
}

/// Runs one module's checks, or all of them for `None`.
pub fn run_suite(module: Option<&str>) -> Result<Vec<SuiteEntry>> {
    let selected: Vec<&str> = match module {
        Some(m) if MODULES.contains(&m) => vec![m],
        Some(m) => {
            return Err(Error::Config(format!(
                "unknown gradient-check module `{m}` (expected one of {})",
                MODULES.join(", ")
            )))
        }
        None => MODULES.to_vec(),
    };
    let mut out = vec![];
    for m in selected {
        match m {
            "ops" => out.extend(run_ops()?),
            "encoder" => out.push(timed("encoder", "encoder".into(), check_encoder)?),
            "fusion" => {
                for s in 0..NUM_STAGES {
                    out.push(timed("fusion", format!("fusion.stage{}", s + 1), || check_fusion(s))?);
                }
            }
            "head" => out.push(timed("head", "head".into(), check_head)?),
            "model" => out.push(timed("model", "model".into(), check_model)?),
            _ => unreachable!("filtered above"),
        }
    }
    Ok(out)
}
