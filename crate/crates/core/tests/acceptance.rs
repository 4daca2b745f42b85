//! One pass/fail line per acceptance criterion. Run with `--nocapture` to
//! see the lines; the test fails if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use u3m::config::ModelConfig;
use u3m::encoder::MixFfn;
use u3m::fusion::PyramidConv;
use u3m::gradsuite::{check_model, run_ops, TOLERANCE};
use u3m::io::checkpoint::{decode_checkpoint, encode_checkpoint};
use u3m::io::netpbm::{decode, encode, Image};
use u3m::param::{ParamBuilder, ParamStore};
use u3m::train::{predict, synth_dataset, SynthSpec};
use u3m::{Tape, Tensor, U3m};

const GRAD_SECONDS: f64 = 60.0;
const SHAPE_INPUT: usize = 64;
const PERMUTATION_TRIALS: usize = 50;
const PERMUTATION_TOL: f64 = 1e-10;
const ANCHOR_TOL: f64 = 1e-12;
const METRIC_TRIALS: usize = 200;
const WORKED_EXAMPLE_TOL: f64 = 1e-15;
const OVERFIT_MIOU: f64 = 0.95;
const OVERFIT_LOSS_RATIO: f64 = 0.1;
const OVERFIT_SECONDS: f64 = 300.0;
const ABLATION_MARGIN: f64 = 0.05;

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut entries = run_ops().unwrap();
    let model = check_model().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed = entries.iter().filter(|e| !e.passed()).count() + usize::from(model.max_rel_err() >= TOLERANCE);
    entries.sort_by(|a, b| a.report.max_rel_err().total_cmp(&b.report.max_rel_err()));
    let worst_op = entries.last().unwrap();
    (
        failed == 0 && secs < GRAD_SECONDS,
        format!(
            "{} op checks + model, worst op {} {:.2e}, model {:.2e}, {failed} failed, {secs:.1}s",
            entries.len(),
            worst_op.name,
            worst_op.report.max_rel_err(),
            model.max_rel_err()
        ),
    )
}

fn shape_pipeline() -> Outcome {
    let n = SHAPE_INPUT;
    let cfg = ModelConfig::desk(vec![3, 1], 3, (n, n));
    let (model, store) = U3m::new(&cfg, 0).unwrap();
    let mut t = Tape::new();
    let p = t.bind(&store);
    let imgs = [
        t.constant(Tensor::full(&[1, 3, n, n], 0.5)),
        t.constant(Tensor::full(&[1, 1, n, n], 0.5)),
    ];
    let tr = model.forward_trace(&mut t, &p, &imgs).unwrap();
    let want: Vec<Vec<usize>> = [(16, 16), (32, 8), (64, 4), (128, 2)]
        .iter()
        .map(|&(c, s)| vec![1, c, s, s])
        .collect();
    let stages_ok = tr
        .pyramids
        .iter()
        .map(|py| &py.features)
        .chain(std::iter::once(&tr.fused))
        .all(|fs| fs.iter().zip(&want).all(|(f, w)| t.shape(*f) == w.as_slice()));
    let logits = t.shape(tr.logits).to_vec();
    (
        stages_ok && logits == [1, 3, n, n],
        format!("stages 16/8/4/2 px, channels [16,32,64,128], logits {logits:?}"),
    )
}

fn unbiasedness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let worst = (0..PERMUTATION_TRIALS)
        .map(|i| fusion_permutation_trial(i, &mut rng).0)
        .fold(0.0, f64::max);
    (
        worst < PERMUTATION_TOL,
        format!("{PERMUTATION_TRIALS} trials, M in 2..=4, max abs change {worst:.2e}"),
    )
}

fn analytic_anchors() -> Outcome {
    let mut t = Tape::new();
    let n = 7;
    let logits = t.constant(Tensor::full(&[2, n, 3, 3], 0.3));
    let labels: Vec<u8> = (0..18).map(|i| (i % n) as u8).collect();
    let ce = t.cross_entropy(logits, &labels, IGNORE).unwrap();
    let ce_err = (t.value(ce).item().unwrap() - (n as f64).ln()).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = t.constant(Tensor::from_fn(&[4, 5, 9], |_| rng.random_range(-30.0..30.0)));
    let sm = t.softmax(x, 2).unwrap();
    let sm_err = t
        .value(sm)
        .data()
        .chunks(9)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    let mut store = ParamStore::new();
    let mut prng = ChaCha8Rng::seed_from_u64(12);
    let (ffn, conv) = {
        let mut pb = ParamBuilder::new(&mut store, &mut prng);
        let ffn = MixFfn::new(&mut pb.sub("ffn"), 8, 32).unwrap();
        let conv = PyramidConv::new(&mut pb.sub("conv"), 8, &[3, 5, 7]).unwrap();
        (ffn, conv)
    };
    let mut zeroed = vec![ffn.fc2.w, ffn.fc2.b.unwrap()];
    for b in &conv.branches {
        zeroed.extend([b.w, b.b]);
    }
    for id in zeroed {
        *store.tensor_mut(id) = Tensor::zeros(store.tensor(id).shape());
    }
    let mut t = Tape::new();
    let p = t.bind(&store);
    let tokens = Tensor::from_fn(&[2, 12, 8], |_| rng.random_range(-1.0..1.0));
    let tv = t.constant(tokens.clone());
    let y = ffn.forward(&mut t, &p, tv, 3, 4).unwrap();
    let ffn_exact = t.value(y) == &tokens;
    let map = t.constant(Tensor::from_fn(&[1, 8, 6, 6], |_| rng.random_range(-1.0..1.0)));
    let sum = conv.branches_sum(&mut t, &p, map).unwrap();
    let proj = conv.proj.forward(&mut t, &p, map).unwrap();
    let tripled = t.scale(proj, 3.0).unwrap();
    let conv_exact = t.value(sum) == t.value(tripled);

    (
        ce_err < ANCHOR_TOL && sm_err < ANCHOR_TOL && ffn_exact && conv_exact,
        format!(
            "ce-ln(N) {ce_err:.1e}, softmax row sum {sm_err:.1e}, mix-ffn identity {ffn_exact}, pyramid-conv 3x proj {conv_exact}"
        ),
    )
}

fn metric_oracle() -> Outcome {
    let bad = metric_oracle_mismatches(METRIC_TRIALS, 42);
    let ex = worked_example_miou();
    (
        bad == 0 && (ex - 7.0 / 12.0).abs() < WORKED_EXAMPLE_TOL,
        format!("{bad}/{METRIC_TRIALS} mismatches, worked example {ex:.6}"),
    )
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let (a, store_a) = overfit_run();
    let secs = start.elapsed().as_secs_f64();
    let (b, store_b) = overfit_run();
    let last = a.epochs.last().unwrap();
    let same = store_a.iter().zip(store_b.iter()).all(|(x, y)| x.tensor == y.tensor)
        && a.epochs.iter().zip(&b.epochs).all(|(x, y)| x == y);
    let ratio = last.loss / a.initial_loss;
    (
        last.miou >= OVERFIT_MIOU && ratio < OVERFIT_LOSS_RATIO && secs < OVERFIT_SECONDS && same,
        format!(
            "{} steps, train mIoU {:.4}, loss {:.4} -> {:.4} ({:.1}%), {secs:.1}s, reproducible {same}",
            a.steps,
            last.miou,
            a.initial_loss,
            last.loss,
            100.0 * ratio
        ),
    )
}

fn ablation() -> Outcome {
    let mean = |m: usize| ABLATION_SEEDS.iter().map(|&s| ablation_run(m, s)).sum::<f64>() / ABLATION_SEEDS.len() as f64;
    let (one, two) = (mean(1), mean(2));
    (
        two - one >= ABLATION_MARGIN,
        format!("held-out mIoU M=1 {one:.4}, M=2 {two:.4}, gap {:.4}", two - one),
    )
}

fn io_contracts() -> Outcome {
    let cfg = ModelConfig::desk(vec![3, 1], 3, (32, 32));
    let (model, mut store) = U3m::new(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for p in store.iter_mut() {
        let noisy = Tensor::from_fn(p.tensor.shape(), |i| p.tensor.data()[i] + rng.random_range(-0.05..0.05));
        p.tensor = Tensor::from_f32(noisy.shape(), &noisy.to_f32_vec()).unwrap();
    }
    let bytes = encode_checkpoint(&cfg, &store);
    let (loaded_model, loaded) = decode_checkpoint(&bytes).unwrap().into_model().unwrap();
    let data = synth_dataset(&SynthSpec::new(4, 2, 3, 32, 1)).unwrap();
    let refs: Vec<_> = data.iter().collect();
    let same_preds = predict(&model, &store, &refs).unwrap() == predict(&loaded_model, &loaded, &refs).unwrap();

    let truncated_rejected = [0, 7, 8, bytes.len() / 3, bytes.len() - 1]
        .iter()
        .all(|&k| decode_checkpoint(&bytes[..k]).is_err());

    let netpbm_ok = (0..20).all(|i| {
        let (w, h, c) = (1 + i % 7, 1 + i % 5, if i % 2 == 0 { 1 } else { 3 });
        let img = Image::new(w, h, c, (0..w * h * c).map(|_| rng.random()).collect()).unwrap();
        let enc = encode(&img);
        encode(&decode(&enc).unwrap()) == enc
    });
    (
        same_preds && truncated_rejected && netpbm_ok,
        format!("predictions preserved {same_preds}, truncation rejected {truncated_rejected}, PPM/PGM byte round trip {netpbm_ok}"),
    )
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("shape pipeline", shape_pipeline),
        ("unbiasedness", unbiasedness),
        ("analytic anchors", analytic_anchors),
        ("metric oracle", metric_oracle),
        ("overfit run", overfit),
        ("modality ablation", ablation),
        ("I/O contracts", io_contracts),
    ];
    let mut failed = vec![];
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (pass, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| (false, "panicked".into()));
        println!(
            "criterion {}: {} {name}: {detail}",
            i + 1,
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
