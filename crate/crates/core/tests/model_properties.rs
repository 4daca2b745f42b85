//! Structural properties of the encoder, fusion blocks, head and full model.

mod common;

use common::{fusion_permutation_trial, permute_column_blocks, random_perm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use u3m::config::ModelConfig;
use u3m::encoder::{Attention, MixFfn};
use u3m::error::Error;
use u3m::fusion::{ChannelAttention, PyramidConv, PyramidPool};
use u3m::param::{ParamBuilder, ParamStore};
use u3m::{Tape, Tensor, U3m};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}

#[test]
fn fusion_block_is_modality_order_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..50 {
        let (matched, unmatched) = fusion_permutation_trial(trial, &mut rng);
        assert!(matched < 1e-10, "trial {trial}: {matched}");
        // permuting the inputs alone is not a symmetry
        assert!(unmatched > 1e-6, "trial {trial}: {unmatched}");
    }
}

#[test]
fn full_model_is_modality_order_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for m in 2..=4 {
        let cfg = ModelConfig::desk(vec![1; m], 3, (32, 32));
        let (model, store) = U3m::new(&cfg, m as u64).unwrap();
        let images: Vec<Tensor> = (0..m).map(|_| rand_tensor(&mut rng, &[1, 1, 32, 32])).collect();
        let perm = random_perm(&mut rng, m);

        let run = |store: &ParamStore, images: &[Tensor]| {
            let mut t = Tape::new();
            let p = t.bind(store);
            let vs: Vec<_> = images.iter().map(|f| t.constant(f.clone())).collect();
            let y = model.forward(&mut t, &p, &vs).unwrap();
            t.value(y).clone()
        };
        let base = run(&store, &images);

        // encoder m' takes the weights of encoder perm[m'], and every
        // reduction layer reads its blocks in the new order
        let mut swapped = store.clone();
        for (dst, &src) in perm.iter().enumerate() {
            let prefix = format!("enc.{src}.");
            for p in store.iter().filter(|p| p.name.starts_with(&prefix)) {
                let name = format!("enc.{dst}.{}", &p.name[prefix.len()..]);
                let id = swapped.id(&name).unwrap();
                *swapped.tensor_mut(id) = p.tensor.clone();
            }
        }
        for block in &model.fusion {
            let w = store.tensor(block.reduce.proj.w);
            *swapped.tensor_mut(block.reduce.proj.w) = permute_column_blocks(w, &perm);
        }
        let pimages: Vec<Tensor> = perm.iter().map(|&i| images[i].clone()).collect();
        let d = max_diff(&base, &run(&swapped, &pimages));
        assert!(d < 1e-10, "M={m} perm {perm:?}: {d}");
    }
}

#[test]
fn pyramid_shapes_at_64() {
    let cfg = ModelConfig::desk(vec![3, 1], 5, (64, 64));
    let (model, store) = U3m::new(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::new();
    let p = t.bind(&store);
    let imgs = [
        t.constant(rand_tensor(&mut rng, &[2, 3, 64, 64])),
        t.constant(rand_tensor(&mut rng, &[2, 1, 64, 64])),
    ];
    let tr = model.forward_trace(&mut t, &p, &imgs).unwrap();
    let expect = [(16, 16), (32, 8), (64, 4), (128, 2)];
    for py in &tr.pyramids {
        for (f, &(c, s)) in py.features.iter().zip(&expect) {
            assert_eq!(t.shape(*f), &[2, c, s, s]);
        }
    }
    for (f, &(c, s)) in tr.fused.iter().zip(&expect) {
        assert_eq!(t.shape(*f), &[2, c, s, s]);
    }
    assert_eq!(t.shape(tr.logits), &[2, 5, 64, 64]);
}

#[test]
fn mismatched_modality_is_named() {
    let cfg = ModelConfig::desk(vec![3, 1, 1], 3, (32, 32));
    let (model, store) = U3m::new(&cfg, 0).unwrap();
    let mut t = Tape::new();
    let p = t.bind(&store);
    let a = t.constant(Tensor::zeros(&[1, 3, 32, 32]));
    let b = t.constant(Tensor::zeros(&[1, 1, 32, 32]));
    let c = t.constant(Tensor::zeros(&[1, 1, 64, 32]));
    match model.forward(&mut t, &p, &[a, b, c]) {
        Err(Error::Fusion { modality, .. }) => assert_eq!(modality, 2),
        other => panic!("expected a fusion error, got {other:?}"),
    }
    match model.forward(&mut t, &p, &[a, b]) {
        Err(Error::Fusion { .. }) => {}
        other => panic!("expected a fusion error, got {other:?}"),
    }
}

#[test]
fn mix_ffn_with_zero_output_layer_is_identity() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ffn = MixFfn::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 32).unwrap();
    for p in store.iter_mut().filter(|p| p.name.starts_with("fc2")) {
        p.tensor = Tensor::zeros(p.tensor.shape());
    }
    let x = rand_tensor(&mut rng, &[2, 12, 8]);
    let mut t = Tape::new();
    let p = t.bind(&store);
    let xv = t.constant(x.clone());
    let y = ffn.forward(&mut t, &p, xv, 3, 4).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn pyramid_conv_with_zero_depthwise_is_tripled_projection() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let conv = PyramidConv::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, &[3, 5, 7]).unwrap();
    for b in &conv.branches {
        *store.tensor_mut(b.w) = Tensor::zeros(store.tensor(b.w).shape());
        *store.tensor_mut(b.b) = Tensor::zeros(store.tensor(b.b).shape());
    }
    let x = rand_tensor(&mut rng, &[1, 8, 6, 6]);
    let mut t = Tape::new();
    let p = t.bind(&store);
    let xv = t.constant(x);
    let sum = conv.branches_sum(&mut t, &p, xv).unwrap();
    let proj = conv.proj.forward(&mut t, &p, xv).unwrap();
    let tripled = t.scale(proj, 3.0).unwrap();
    assert_eq!(t.value(sum), t.value(tripled));
}

#[test]
fn head_decode_matches_concat_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (hw, seed) in [(32, 0), (64, 1), (96, 2)] {
        let cfg = ModelConfig::desk(vec![3], 4, (hw, hw));
        let (model, mut store) = U3m::new(&cfg, seed).unwrap();
        // non-zero biases so the bias placement is exercised
        for p in store.iter_mut().filter(|p| p.name.starts_with("head.")) {
            p.tensor = Tensor::from_fn(p.tensor.shape(), |_| rng.random_range(-0.5..0.5));
        }
        let mut t = Tape::new();
        let p = t.bind(&store);
        let chans = cfg.encoder.stage_channels;
        let stages: [_; 4] = std::array::from_fn(|i| {
            let s = hw / (4 << i);
            t.constant(rand_tensor(&mut rng, &[2, chans[i], s, s]))
        });
        let a = model.head.decode(&mut t, &p, &stages, (hw, hw)).unwrap();
        let b = model.head.decode_concat(&mut t, &p, &stages, (hw, hw)).unwrap();
        let d = max_diff(t.value(a), t.value(b));
        assert!(d < 1e-12, "{hw}: {d}");
    }
}

/// Dense multi-head attention with consecutive-token key/value reduction,
/// written with plain loops over the stored weights.
fn naive_attention(store: &ParamStore, attn: &Attention, x: &Tensor) -> (Tensor, Tensor) {
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (h, r) = (attn.heads, attn.ratio);
    let dk = c / h;
    let w = |id| store.tensor(id).data().to_vec();
    let linear = |rows: &[Vec<f64>], wt: &[f64], bias: Option<Vec<f64>>, d_out: usize| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|row| {
                (0..d_out)
                    .map(|j| {
                        let s: f64 = row.iter().enumerate().map(|(i, v)| v * wt[i * d_out + j]).sum();
                        s + bias.as_ref().map_or(0.0, |bb| bb[j])
                    })
                    .collect()
            })
            .collect()
    };
    let bias = |l: &u3m::layers::Linear| l.b.map(w);
    let mut out = vec![];
    let nr = n / r;
    let mut weights = vec![0.0; b * h * n * nr];
    for bi in 0..b {
        let tokens: Vec<Vec<f64>> = (0..n)
            .map(|i| x.data()[(bi * n + i) * c..(bi * n + i + 1) * c].to_vec())
            .collect();
        let kv: Vec<Vec<f64>> = match &attn.sr {
            None => tokens.clone(),
            Some((proj, norm)) => {
                let grouped: Vec<Vec<f64>> = tokens.chunks(r).map(|g| g.concat()).collect();
                let y = linear(&grouped, &w(proj.w), bias(proj), c);
                let (g, be) = (w(norm.gamma), w(norm.beta));
                y.iter()
                    .map(|row| {
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                        row.iter()
                            .enumerate()
                            .map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * g[i] + be[i])
                            .collect()
                    })
                    .collect()
            }
        };
        let q = linear(&tokens, &w(attn.q.w), bias(&attn.q), c);
        let k = linear(&kv, &w(attn.k.w), bias(&attn.k), c);
        let v = linear(&kv, &w(attn.v.w), bias(&attn.v), c);
        let mut ctx = vec![vec![0.0; c]; n];
        for head in 0..h {
            let off = head * dk;
            for i in 0..n {
                let scores: Vec<f64> = (0..nr)
                    .map(|j| (0..dk).map(|d| q[i][off + d] * k[j][off + d]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..nr {
                    let a = e[j] / z;
                    weights[((bi * h + head) * n + i) * nr + j] = a;
                    for d in 0..dk {
                        ctx[i][off + d] += a * v[j][off + d];
                    }
                }
            }
        }
        for row in linear(&ctx, &w(attn.out.w), bias(&attn.out), c) {
            out.extend(row);
        }
    }
    (
        Tensor::new(&[b, n, c], out).unwrap(),
        Tensor::new(&[b, h, n, nr], weights).unwrap(),
    )
}

#[test]
fn attention_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (c, heads, ratio, n) in [(8, 1, 1, 6), (8, 2, 4, 16), (12, 3, 2, 10), (16, 4, 8, 64)] {
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(c as u64 + ratio as u64);
        let attn = Attention::new(&mut ParamBuilder::new(&mut store, &mut prng), c, heads, ratio).unwrap();
        // larger weights than the init so the softmax is far from uniform
        for p in store.iter_mut() {
            p.tensor = Tensor::from_fn(p.tensor.shape(), |_| rng.random_range(-0.6..0.6));
        }
        let x = rand_tensor(&mut rng, &[2, n, c]);
        let mut t = Tape::new();
        let p = t.bind(&store);
        let xv = t.constant(x.clone());
        let (y, a) = attn.forward_with_weights(&mut t, &p, xv).unwrap();
        let (want_y, want_a) = naive_attention(&store, &attn, &x);
        assert!(max_diff(t.value(y), &want_y) < 1e-12);
        assert!(max_diff(t.value(a), &want_a) < 1e-12);
        for row in t.value(a).data().chunks(n / ratio) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_indivisible_heads_and_tokens() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    assert!(Attention::new(&mut ParamBuilder::new(&mut store, &mut rng), 10, 3, 1).is_err());
    let attn = Attention::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 2, 4).unwrap();
    let mut t = Tape::new();
    let p = t.bind(&store);
    let x = t.constant(Tensor::zeros(&[1, 10, 8]));
    assert!(attn.forward(&mut t, &p, x).is_err());
}

#[test]
fn frozen_encoders_get_no_gradient() {
    let mut cfg = ModelConfig::desk(vec![3, 1], 3, (32, 32));
    cfg.train.freeze_encoders = true;
    let (model, store) = U3m::new(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = Tape::new();
    let p = t.bind(&store);
    let imgs = [
        t.constant(rand_tensor(&mut rng, &[1, 3, 32, 32])),
        t.constant(rand_tensor(&mut rng, &[1, 1, 32, 32])),
    ];
    let logits = model.forward(&mut t, &p, &imgs).unwrap();
    let labels = vec![1u8; 32 * 32];
    let loss = t.cross_entropy(logits, &labels, 255).unwrap();
    let grads = t.backward(loss).unwrap();
    assert!(grads.params().keys().all(|k| !k.starts_with("enc.")));
    assert!(grads.param("head.cls.w").is_some());
    assert!(grads.param("fuse.1.reduce.w").is_some());
}

#[test]
fn channel_attention_only_attenuates() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ca = ChannelAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), 16, 4).unwrap();
    for p in store.iter_mut() {
        p.tensor = Tensor::from_fn(p.tensor.shape(), |_| rng.random_range(-3.0..3.0));
    }
    let x = rand_tensor(&mut rng, &[2, 16, 5, 5]);
    let mut t = Tape::new();
    let p = t.bind(&store);
    let xv = t.constant(x.clone());
    let g = ca.gate(&mut t, &p, xv).unwrap();
    assert_eq!(t.shape(g), &[2, 16, 1, 1]);
    assert!(t.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
    let y = ca.forward(&mut t, &p, xv).unwrap();
    for (a, b) in t.value(y).data().iter().zip(x.data()) {
        assert!(a.abs() <= b.abs());
    }
}

#[test]
fn pyramid_pool_preserves_constant_maps() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pool = PyramidPool::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, &[1, 2, 3, 6]).unwrap();
    let x = Tensor::from_fn(&[1, 8, 12, 12], |i| (i / 144) as f64 * 0.1 - 0.3);
    let mut t = Tape::new();
    let p = t.bind(&store);
    let xv = t.constant(x);
    let y = pool.forward(&mut t, &p, xv).unwrap();
    for plane in t.value(y).data().chunks(144) {
        assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
    }
}
