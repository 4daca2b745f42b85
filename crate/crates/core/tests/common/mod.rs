//! Oracles and run recipes shared by the integration tests.

#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use u3m::config::{ModelConfig, TrainConfig};
use u3m::fusion::FusionBlock;
use u3m::param::{ParamBuilder, ParamStore};
use u3m::train::{evaluate, synth_dataset, train, SynthSpec, TrainOptions, TrainReport};
use u3m::{ConfusionMatrix, ModalitySample, SegmentationMap, Tape, Tensor, U3m};

pub const IGNORE: u8 = 255;

/// mIoU from pixel index sets: per class `|P & G| / |P | G|` over the
/// non-ignored pixels, averaged over classes whose union is non-empty.
pub fn set_miou(pairs: &[(SegmentationMap, SegmentationMap)], classes: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut defined = 0;
    for c in 0..classes as u8 {
        let mut pred = HashSet::new();
        let mut gt = HashSet::new();
        for (img, (p, g)) in pairs.iter().enumerate() {
            for (i, (&pv, &gv)) in p.data.iter().zip(&g.data).enumerate() {
                if gv == IGNORE {
                    continue;
                }
                if pv == c {
                    pred.insert((img, i));
                }
                if gv == c {
                    gt.insert((img, i));
                }
            }
        }
        let union = pred.union(&gt).count();
        if union > 0 {
            sum += pred.intersection(&gt).count() as f64 / union as f64;
            defined += 1;
        }
    }
    (defined > 0).then(|| sum / defined as f64)
}

/// A random (prediction, ground truth) pair of at most 32x32 with about a
/// tenth of the ground truth ignored.
pub fn random_pair(rng: &mut ChaCha8Rng, classes: usize) -> (SegmentationMap, SegmentationMap) {
    let h = rng.random_range(1..=32);
    let w = rng.random_range(1..=32);
    let pred = (0..h * w).map(|_| rng.random_range(0..classes) as u8).collect();
    let gt = (0..h * w)
        .map(|_| {
            if rng.random_bool(0.1) {
                IGNORE
            } else {
                rng.random_range(0..classes) as u8
            }
        })
        .collect();
    (
        SegmentationMap::new(h, w, pred).unwrap(),
        SegmentationMap::new(h, w, gt).unwrap(),
    )
}

/// Number of trials (out of `trials`, each 1..=4 images with up to 6
/// classes) where streaming mIoU differs from [`set_miou`].
pub fn metric_oracle_mismatches(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let classes = rng.random_range(1..=6);
        let n = rng.random_range(1..=4);
        let pairs: Vec<_> = (0..n).map(|_| random_pair(&mut rng, classes)).collect();
        let mut cm = ConfusionMatrix::new(classes).unwrap();
        for (p, g) in &pairs {
            cm.update(p, g, IGNORE).unwrap();
        }
        if cm.miou().ok() != set_miou(&pairs, classes) {
            bad += 1;
        }
    }
    bad
}

/// The small worked example: pred `[0,0,1,1]` against gt `[0,1,1,1]`.
pub fn worked_example_miou() -> f64 {
    let pred = SegmentationMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
    let gt = SegmentationMap::new(1, 4, vec![0, 1, 1, 1]).unwrap();
    let mut cm = ConfusionMatrix::new(2).unwrap();
    cm.update(&pred, &gt, IGNORE).unwrap();
    cm.miou().unwrap()
}

pub fn keep_modalities(data: &[ModalitySample], m: usize) -> Vec<ModalitySample> {
    data.iter()
        .cloned()
        .map(|mut s| {
            s.images.truncate(m);
            s
        })
        .collect()
}

pub const OVERFIT_STEPS: usize = 500;

/// Eight 32x32 two-modality scenes with three classes, memorised without
/// augmentation.
pub fn overfit_run() -> (TrainReport, ParamStore) {
    let data = synth_dataset(&SynthSpec::new(8, 2, 3, 32, 0)).unwrap();
    let cfg = ModelConfig::desk(vec![3, 1], 3, (32, 32));
    let (model, mut store) = U3m::new(&cfg, 0).unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        epochs: OVERFIT_STEPS * 4 / 8,
        hflip: false,
        rotate: false,
        scale: false,
        ..TrainConfig::default()
    };
    let opts = TrainOptions {
        max_steps: Some(OVERFIT_STEPS),
        ..Default::default()
    };
    let report = train(&model, &mut store, &data, &tc, &opts, |_| {}).unwrap();
    (report, store)
}

pub const ABLATION_STEPS: usize = 300;
pub const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

/// Held-out mIoU of an `m`-modality model on the dominance-shift task
/// (modality 0 replaced by noise in a quarter of the samples).
pub fn ablation_run(m: usize, seed: u64) -> f64 {
    let train_set = synth_dataset(&SynthSpec::new(16, 2, 3, 32, 100)).unwrap();
    let test_set = synth_dataset(&SynthSpec::new(16, 2, 3, 32, 200)).unwrap();
    let (train_set, test_set) = (keep_modalities(&train_set, m), keep_modalities(&test_set, m));
    let cfg = ModelConfig::desk(vec![3, 1][..m].to_vec(), 3, (32, 32));
    let (model, mut store) = U3m::new(&cfg, seed).unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        epochs: ABLATION_STEPS,
        seed,
        hflip: true,
        rotate: true,
        scale: false,
        ..TrainConfig::default()
    };
    let opts = TrainOptions {
        max_steps: Some(ABLATION_STEPS),
        ..Default::default()
    };
    train(&model, &mut store, &train_set, &tc, &opts, |_| {}).unwrap();
    evaluate(&model, &store, &test_set, IGNORE, 4).unwrap().miou().unwrap()
}

/// Moves input-channel block `perm[m]` of a `[C, M*C, 1, 1]` weight to block `m`.
pub fn permute_column_blocks(w: &Tensor, perm: &[usize]) -> Tensor {
    let (c, mc) = (w.shape()[0], w.shape()[1]);
    let blk = mc / perm.len();
    let mut out = w.clone();
    for o in 0..c {
        for (m, &src) in perm.iter().enumerate() {
            for j in 0..blk {
                out.data_mut()[o * mc + m * blk + j] = w.data()[o * mc + src * blk + j];
            }
        }
    }
    out
}

/// A uniformly drawn permutation other than the identity.
pub fn random_perm(rng: &mut ChaCha8Rng, m: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..m).collect();
    while p.iter().enumerate().all(|(i, &v)| i == v) {
        p.shuffle(rng);
    }
    p
}

/// One random fusion block (M = 2 + trial % 3) on random features.
/// Returns the max abs output change when the modalities are permuted
/// together with the reduction weight blocks, and when only the
/// modalities are permuted.
pub fn fusion_permutation_trial(trial: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let m = 2 + trial % 3;
    let c = [16, 32][trial % 2];
    let hw = rng.random_range(2..9);
    let cfg = ModelConfig::desk(vec![3; m], 3, (32, 32));
    let bins = cfg.fusion.bins_for_extent(hw);
    let mut store = ParamStore::new();
    let mut prng = ChaCha8Rng::seed_from_u64(trial as u64);
    let block = FusionBlock::new(&mut ParamBuilder::new(&mut store, &mut prng), m, c, &bins, &cfg.fusion).unwrap();
    let feats: Vec<Tensor> = (0..m)
        .map(|_| Tensor::from_fn(&[2, c, hw, hw], |_| rng.random_range(-1.0..1.0)))
        .collect();
    let perm = random_perm(rng, m);

    let run = |store: &ParamStore, feats: &[Tensor]| {
        let mut t = Tape::new();
        let p = t.bind(store);
        let vs: Vec<_> = feats.iter().map(|f| t.constant(f.clone())).collect();
        let y = block.forward(&mut t, &p, &vs).unwrap();
        t.value(y).clone()
    };
    let base = run(&store, &feats);
    let mut swapped = store.clone();
    let w = swapped.tensor(block.reduce.proj.w).clone();
    *swapped.tensor_mut(block.reduce.proj.w) = permute_column_blocks(&w, &perm);
    let pfeats: Vec<Tensor> = perm.iter().map(|&i| feats[i].clone()).collect();
    (
        base.max_abs_diff(&run(&swapped, &pfeats)),
        base.max_abs_diff(&run(&store, &pfeats)),
    )
}
