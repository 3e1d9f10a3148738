//! Multi-scale head semantics and the exactness of the structural
//! re-parameterization (kernel padding, branch merging, batch-norm fold).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stdtrack::config::Config;
use stdtrack::head::{
    fold_bn, merge_branches, pad_kernel, reparameterize_block, Head, RepConvBlock,
};
use stdtrack::model::Model;
use stdtrack::nn::BN_EPS;
use stdtrack::tensor::{ParamStore, Tape, Tensor};
use stdtrack::verify::{randomize_running_stats, reparam_deviation};

fn rngs(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Naive three-loop convolution, the independent reference.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], pad: usize) -> Tensor<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, s) = (k.shape()[0], k.shape()[2]);
    let ho = h + 2 * pad - s + 1;
    let wo = w + 2 * pad - s + 1;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    for co in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b[co];
                for ci in 0..cin {
                    for u in 0..s {
                        for v in 0..s {
                            let (yy, xx) = (i + u, j + v);
                            if yy < pad || xx < pad || yy - pad >= h || xx - pad >= w {
                                continue;
                            }
                            acc += k.data()[((co * cin + ci) * s + u) * s + v]
                                * x.data()[(ci * h + yy - pad) * w + xx - pad];
                        }
                    }
                }
                out.data_mut()[(co * ho + i) * wo + j] = acc;
            }
        }
    }
    out
}

fn block_fixture(in_ch: usize, out_ch: usize, seed: u64) -> (ParamStore<f64>, RepConvBlock) {
    let mut store = ParamStore::new();
    let mut rng = rngs(seed);
    let block = RepConvBlock::new(&mut store, "blk", in_ch, out_ch, &mut rng);
    (store, block)
}

fn set_identity_bn(store: &mut ParamStore<f64>, block: &RepConvBlock) {
    let c = block.out_ch;
    store.set_value(block.bn.gamma, Tensor::ones(&[c])).unwrap();
    store.set_value(block.bn.beta, Tensor::zeros(&[c])).unwrap();
    store
        .set_value(block.bn.running_mean, Tensor::zeros(&[c]))
        .unwrap();
    // variance 1 - eps makes eval-mode normalization exactly the identity
    store
        .set_value(block.bn.running_var, Tensor::full(&[c], 1.0 - BN_EPS))
        .unwrap();
}

#[test]
fn all_zero_block_produces_zeros() {
    let (mut store, block) = block_fixture(2, 3, 1);
    for id in [block.k1, block.k3, block.k5, block.b1, block.b3, block.b5] {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
    set_identity_bn(&mut store, &block);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::ones(&[2, 4, 4]));
    let y = block.forward(&mut tape, &store, x, false).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn unit_1x1_branch_alone_is_relu_passthrough() {
    let (mut store, block) = block_fixture(1, 1, 2);
    store
        .set_value(block.k1, Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap())
        .unwrap();
    for id in [block.k3, block.k5] {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
    for id in [block.b1, block.b3, block.b5] {
        store.set_value(id, Tensor::zeros(&[1])).unwrap();
    }
    set_identity_bn(&mut store, &block);
    let mut rng = rngs(3);
    let input = Tensor::<f64>::uniform(&[1, 5, 5], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = block.forward(&mut tape, &store, x, false).unwrap();
    for (got, v) in tape.value(y).data().iter().zip(input.data()) {
        assert!((got - v.max(0.0)).abs() < 1e-9);
    }
}

#[test]
fn training_block_matches_naive_three_conv_oracle() {
    let (store, block) = block_fixture(4, 3, 4);
    let mut rng = rngs(5);
    let x = Tensor::<f64>::uniform(&[4, 6, 6], -1.0, 1.0, &mut rng);
    // oracle: three naive convolutions summed, batch-stat normalization, relu
    let y1 = conv_oracle(&x, store.value(block.k1), store.value(block.b1).data(), 0);
    let y3 = conv_oracle(&x, store.value(block.k3), store.value(block.b3).data(), 1);
    let y5 = conv_oracle(&x, store.value(block.k5), store.value(block.b5).data(), 2);
    let summed = y1
        .zip_map(&y3, |a, b| a + b)
        .unwrap()
        .zip_map(&y5, |a, b| a + b)
        .unwrap();
    let n = 36.0;
    let mut oracle = summed.clone();
    for c in 0..3 {
        let plane: Vec<f64> = summed.data()[c * 36..(c + 1) * 36].to_vec();
        let mean: f64 = plane.iter().sum::<f64>() / n;
        let var: f64 = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + BN_EPS).sqrt();
        for i in 0..36 {
            let gamma = store.value(block.bn.gamma).data()[c];
            let beta = store.value(block.bn.beta).data()[c];
            oracle.data_mut()[c * 36 + i] = (gamma * (plane[i] - mean) * inv + beta).max(0.0);
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = block.forward(&mut tape, &store, xv, true).unwrap();
    for (a, o) in tape.value(y).data().iter().zip(oracle.data()) {
        assert!((a - o).abs() < 1e-5, "{a} vs {o}");
    }
}

#[test]
fn padded_kernel_convolution_equivalence() {
    // conv(x, pad_kernel(k), pad 2) == conv(x, k, natural pad), 50 cases
    let mut rng = rngs(6);
    for case in 0..50 {
        let s = [1usize, 3, 5][case % 3];
        let x = Tensor::<f64>::uniform(&[2, 6, 7], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[3, 2, s, s], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[3], -1.0, 1.0, &mut rng);
        let natural = conv_oracle(&x, &k, b.data(), (s - 1) / 2);
        let padded = conv_oracle(&x, &pad_kernel(&k).unwrap(), b.data(), 2);
        for (a, o) in padded.data().iter().zip(natural.data()) {
            assert!((a - o).abs() < 1e-6, "case {case}: {a} vs {o}");
        }
    }
}

#[test]
fn merged_kernel_equals_sum_of_branch_outputs() {
    let mut rng = rngs(7);
    for _ in 0..10 {
        let (store, block) = block_fixture(3, 2, rng.gen());
        let x = Tensor::<f64>::uniform(&[3, 5, 5], -1.0, 1.0, &mut rng);
        let (km, bm) = merge_branches(&store, &block).unwrap();
        let merged = conv_oracle(&x, &km, bm.data(), 2);
        let y1 = conv_oracle(&x, store.value(block.k1), store.value(block.b1).data(), 0);
        let y3 = conv_oracle(&x, store.value(block.k3), store.value(block.b3).data(), 1);
        let y5 = conv_oracle(&x, store.value(block.k5), store.value(block.b5).data(), 2);
        let sum = y1
            .zip_map(&y3, |a, b| a + b)
            .unwrap()
            .zip_map(&y5, |a, b| a + b)
            .unwrap();
        for (a, o) in merged.data().iter().zip(sum.data()) {
            assert!((a - o).abs() < 1e-5);
        }
    }
}

#[test]
fn folded_bn_equals_bn_after_conv() {
    let mut rng = rngs(8);
    for _ in 0..50 {
        let k = Tensor::<f64>::uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[2], -1.0, 1.0, &mut rng);
        let gamma = Tensor::<f64>::uniform(&[2], 0.5, 1.5, &mut rng);
        let beta = Tensor::<f64>::uniform(&[2], -1.0, 1.0, &mut rng);
        let mean = Tensor::<f64>::uniform(&[2], -0.5, 0.5, &mut rng);
        let var = Tensor::<f64>::uniform(&[2], 0.5, 2.0, &mut rng);
        let x = Tensor::<f64>::uniform(&[3, 6, 6], -1.0, 1.0, &mut rng);

        let (fk, fb) = fold_bn(&k, &b, &gamma, &beta, &mean, &var, BN_EPS).unwrap();
        let folded = conv_oracle(&x, &fk, fb.data(), 2);

        let raw = conv_oracle(&x, &k, b.data(), 2);
        let mut bn_after = raw.clone();
        for c in 0..2 {
            let inv = 1.0 / (var.data()[c] + BN_EPS).sqrt();
            for i in 0..36 {
                bn_after.data_mut()[c * 36 + i] =
                    gamma.data()[c] * (raw.data()[c * 36 + i] - mean.data()[c]) * inv
                        + beta.data()[c];
            }
        }
        for (a, o) in folded.data().iter().zip(bn_after.data()) {
            assert!((a - o).abs() < 1e-4);
        }
    }
}

#[test]
fn identity_bn_merged_kernel_is_sum_of_padded_kernels() {
    let (mut store, block) = block_fixture(2, 2, 9);
    set_identity_bn(&mut store, &block);
    let (km, _) = merge_branches(&store, &block).unwrap();
    let (rk, _) = reparameterize_block(&store, &block).unwrap();
    // with variance 1 - eps the fold scale is exactly 1
    for (a, b) in rk.data().iter().zip(km.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn tiny_head_config() -> Config {
    let mut cfg = Config::default();
    cfg.embed_dim = 16;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.search_size = 32;
    cfg.template_size = 16;
    cfg.head_blocks = 2;
    cfg
}

#[test]
fn dual_forward_equivalence_on_random_heads() {
    let cfg = tiny_head_config();
    let mut rng = rngs(10);
    let mut model: Model<f64> = Model::new(&cfg, 10).unwrap();
    randomize_running_stats(&mut model, &mut rng);
    let merged = model.reparameterize().unwrap();
    assert!(merged.is_merged());
    let dev = reparam_deviation(&model, &merged, 25, &mut rng).unwrap();
    assert!(dev < 1e-8, "64-bit deviation {dev}");

    let mut model32: Model<f32> = Model::new(&cfg, 11).unwrap();
    let mut rng32 = rngs(11);
    randomize_running_stats(&mut model32, &mut rng32);
    let merged32 = model32.reparameterize().unwrap();
    let dev32 = reparam_deviation(&model32, &merged32, 25, &mut rng32).unwrap();
    assert!(dev32 < 1e-4, "32-bit deviation {dev32}");
}

#[test]
fn merged_form_rejects_further_reparameterization() {
    let cfg = tiny_head_config();
    let model: Model<f32> = Model::new(&cfg, 12).unwrap();
    let merged = model.reparameterize().unwrap();
    assert!(merged.reparameterize().is_err());
}

#[test]
fn merged_save_reload_rerun_is_bit_exact() {
    let cfg = tiny_head_config();
    let mut rng = rngs(13);
    let mut model: Model<f32> = Model::new(&cfg, 13).unwrap();
    randomize_running_stats(&mut model, &mut rng);
    let merged = model.reparameterize().unwrap();

    let dir = std::env::temp_dir().join("stdtrack_reparam_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("merged.stdw");
    stdtrack::weights::save_model(&merged, &path).unwrap();
    let reloaded: Model<f32> = stdtrack::weights::load_model(&cfg, &path).unwrap();
    assert!(reloaded.is_merged());

    let features = Tensor::<f32>::uniform(&[16, 4, 4], -1.0, 1.0, &mut rng);
    let run = |m: &Model<f32>| {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let out = m.head.forward(&mut tape, &m.store, f, false).unwrap();
        (
            tape.value(out.score).clone(),
            tape.value(out.offset).clone(),
            tape.value(out.size).clone(),
        )
    };
    let a = run(&merged);
    let b = run(&reloaded);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn head_outputs_are_sigmoid_bounded_and_aligned() {
    let cfg = tiny_head_config();
    let model: Model<f64> = Model::new(&cfg, 14).unwrap();
    let mut rng = rngs(15);
    let features = Tensor::<f64>::uniform(&[16, 4, 4], -2.0, 2.0, &mut rng);
    let mut tape = Tape::new();
    let f = tape.constant(features);
    let out = model
        .head
        .forward(&mut tape, &model.store, f, false)
        .unwrap();
    assert_eq!(tape.shape(out.score), &[4, 4]);
    assert_eq!(tape.shape(out.offset), &[2, 4, 4]);
    assert_eq!(tape.shape(out.size), &[2, 4, 4]);
    for v in tape.value(out.score).data() {
        assert!(*v > 0.0 && *v < 1.0);
    }
    for v in tape
        .value(out.offset)
        .data()
        .iter()
        .chain(tape.value(out.size).data())
    {
        assert!(*v > 0.0 && *v < 1.0);
    }
    // the quality denominator stays strictly positive
    assert!(stdtrack::memory::quality(tape.value(out.score)).unwrap() > 0.0);
}

#[test]
fn head_forward_matches_naive_tower_oracle() {
    let cfg = tiny_head_config();
    let model: Model<f64> = Model::new(&cfg, 16).unwrap();
    let head = match &model.head {
        Head::Train(h) => h,
        _ => unreachable!(),
    };
    let mut rng = rngs(17);
    let features = Tensor::<f64>::uniform(&[16, 4, 4], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let out = model
        .head
        .forward(&mut tape, &model.store, f, false)
        .unwrap();

    // naive layer-by-layer oracle through the classification tower
    let store = &model.store;
    let mut x = features.clone();
    for block in &head.cls.blocks {
        let y1 = conv_oracle(&x, store.value(block.k1), store.value(block.b1).data(), 0);
        let y3 = conv_oracle(&x, store.value(block.k3), store.value(block.b3).data(), 1);
        let y5 = conv_oracle(&x, store.value(block.k5), store.value(block.b5).data(), 2);
        let sum = y1
            .zip_map(&y3, |a, b| a + b)
            .unwrap()
            .zip_map(&y5, |a, b| a + b)
            .unwrap();
        let c = block.out_ch;
        let plane = sum.numel() / c;
        let mut normed = sum.clone();
        for ch in 0..c {
            let inv = 1.0 / (store.value(block.bn.running_var).data()[ch] + BN_EPS).sqrt();
            let gamma = store.value(block.bn.gamma).data()[ch];
            let beta = store.value(block.bn.beta).data()[ch];
            let mean = store.value(block.bn.running_mean).data()[ch];
            for i in 0..plane {
                let v = gamma * (sum.data()[ch * plane + i] - mean) * inv + beta;
                normed.data_mut()[ch * plane + i] = v.max(0.0);
            }
        }
        x = normed;
    }
    let logits = conv_oracle(
        &x,
        store.value(head.cls.proj.kernel),
        store.value(head.cls.proj.bias).data(),
        0,
    );
    for (got, logit) in tape.value(out.score).data().iter().zip(logits.data()) {
        let oracle = 1.0 / (1.0 + (-logit).exp());
        assert!((got - oracle).abs() < 1e-5, "{got} vs {oracle}");
    }
}
