mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use u3m::config::{ModelConfig, TrainConfig};
use u3m::train::augment::apply;
use u3m::train::{augment, synth_dataset, train, AugmentDraw, AugmentFlags, SynthSpec, TrainOptions};
use u3m::{ModalitySample, SegmentationMap, Tensor, U3m};

fn sample(h: usize, w: usize, seed: u64) -> ModalitySample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0));
    let aux = Tensor::from_fn(&[1, h, w], |_| rng.random_range(0.0..1.0));
    let label = SegmentationMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..4)).collect()).unwrap();
    ModalitySample::new(vec![rgb, aux], label).unwrap()
}

fn at(t: &Tensor, ch: usize, r: usize, c: usize) -> f64 {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    t.data()[(ch * h + r) * w + c]
}

#[test]
fn hflip_follows_index_map() {
    let (h, w) = (5, 7);
    let s = sample(h, w, 1);
    let d = AugmentDraw {
        hflip: true,
        ..AugmentDraw::IDENTITY
    };
    let out = apply(&s, &d, 255);
    for r in 0..h {
        for c in 0..w {
            assert_eq!(out.label.get(r, c), s.label.get(r, w - 1 - c));
            for (img, src) in out.images.iter().zip(&s.images) {
                for ch in 0..img.shape()[0] {
                    assert_eq!(at(img, ch, r, c), at(src, ch, r, w - 1 - c));
                }
            }
        }
    }
}

#[test]
fn quarter_turn_is_counter_clockwise() {
    let n = 6;
    let s = sample(n, n, 2);
    let d = AugmentDraw {
        quarter_turns: 1,
        ..AugmentDraw::IDENTITY
    };
    let out = apply(&s, &d, 255);
    for r in 0..n {
        for c in 0..n {
            assert_eq!(out.label.get(r, c), s.label.get(c, n - 1 - r));
            assert_eq!(at(&out.images[1], 0, r, c), at(&s.images[1], 0, c, n - 1 - r));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmentation_keeps_extent_and_shares_geometry(h in 2usize..12, w in 2usize..12, seed in any::<u64>()) {
        let s = sample(h, w, seed);
        // tag every pixel with its index so the warp can be read back
        let tag = Tensor::from_fn(&[1, h, w], |i| i as f64);
        let tagged = ModalitySample::new(vec![s.images[0].clone(), tag], s.label.clone()).unwrap();
        let flags = AugmentFlags { hflip: true, rotate: true, scale: true };
        let out = augment(&tagged, &mut ChaCha8Rng::seed_from_u64(seed), flags, 255);
        prop_assert_eq!((out.height(), out.width()), (h, w));
        for px in 0..h * w {
            let src = out.images[1].data()[px];
            let lab = out.label.data[px];
            if lab == 255 {
                prop_assert_eq!(src, 0.0);
                continue;
            }
            // the same source pixel feeds the label and every image channel
            let src = src as usize;
            prop_assert_eq!(lab, s.label.data[src]);
            for ch in 0..3 {
                prop_assert_eq!(out.images[0].data()[ch * h * w + px], s.images[0].data()[ch * h * w + src]);
            }
        }
    }
}

#[test]
fn fifty_steps_lower_the_loss() {
    let data = synth_dataset(&SynthSpec::new(8, 2, 3, 32, 0)).unwrap();
    let cfg = ModelConfig::desk(vec![3, 1], 3, (32, 32));
    let (model, mut store) = U3m::new(&cfg, 0).unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        epochs: 25,
        ..TrainConfig::default()
    };
    let opts = TrainOptions {
        max_steps: Some(50),
        ..Default::default()
    };
    let report = train(&model, &mut store, &data, &tc, &opts, |_| {}).unwrap();
    assert_eq!(report.steps, 50);
    assert!(report.epochs.last().unwrap().loss < report.initial_loss);
}

#[test]
fn training_is_bit_reproducible() {
    let data = synth_dataset(&SynthSpec::new(4, 2, 3, 32, 5)).unwrap();
    let cfg = ModelConfig::desk(vec![3, 1], 3, (32, 32));
    let run = || {
        let (model, mut store) = U3m::new(&cfg, 1).unwrap();
        let tc = TrainConfig {
            lr: 1e-3,
            batch_size: 2,
            epochs: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let report = train(&model, &mut store, &data, &tc, &TrainOptions::default(), |_| {}).unwrap();
        (
            report.epochs,
            store.iter().map(|p| p.tensor.clone()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
