//! Runtime property verification, shared by the `verify` CLI command and
//! the acceptance suite: re-parameterization equivalence probes, the
//! literal-rule memory simulation, gradient checks, and the capacity sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::gradcheck::max_rel_error_sampled;
use crate::memory::{MemoryEntry, TokenMemory, UpdatePolicy};
use crate::metrics::{evaluate, EvalReport};
use crate::model::Model;
use crate::pipeline::{track_sequence, OracleFrame, TrackOptions};
use crate::sampler::sample_clip;
use crate::sequence::LoadedSequence;
use crate::synth::{generate, Motion, SynthSpec};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor};
use crate::trainer::build_clip_loss;

/// Randomize batch-norm running statistics so equivalence probes exercise
/// generic folding, not the identity initialization.
pub fn randomize_running_stats<T: Real>(model: &mut Model<T>, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".running_mean") || p.name.ends_with(".running_var"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = model.store.get(id).value.shape().to_vec();
        let value = if model.store.get(id).name.ends_with(".running_var") {
            Tensor::uniform(&shape, 0.5, 2.0, rng)
        } else {
            Tensor::uniform(&shape, -0.5, 0.5, rng)
        };
        model.store.set_value(id, value).expect("same shape");
    }
}

/// Max-abs deviation between training-form and merged-form head outputs
/// over `probes` random feature maps.
pub fn reparam_probe<T: Real>(cfg: &Config, probes: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: Model<T> = Model::new(cfg, seed)?;
    randomize_running_stats(&mut model, &mut rng);
    let merged = model.reparameterize()?;
    reparam_deviation(&model, &merged, probes, &mut rng)
}

/// Max-abs output deviation between a training-form model's head and its
/// merged counterpart over random feature maps.
pub fn reparam_deviation<T: Real>(
    train_model: &Model<T>,
    merged_model: &Model<T>,
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let grid = train_model.cfg.grid();
    let c = train_model.cfg.embed_dim;
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let features = Tensor::<T>::uniform(&[c, grid, grid], -1.0, 1.0, rng);
        // one tape per model: a tape is bound to a single parameter store
        let mut tape_a = Tape::new();
        let f1 = tape_a.constant(features.clone());
        let a = train_model
            .head
            .forward(&mut tape_a, &train_model.store, f1, false)?;
        let mut tape_b = Tape::new();
        let f2 = tape_b.constant(features);
        let b = merged_model
            .head
            .forward(&mut tape_b, &merged_model.store, f2, false)?;
        for (x, y) in [(a.score, b.score), (a.offset, b.offset), (a.size, b.size)] {
            let dx = tape_a.value(x);
            let dy = tape_b.value(y);
            for (p, q) in dx.data().iter().zip(dy.data()) {
                let d = (p.as_f64() - q.as_f64()).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
    }
    Ok(worst)
}

/// Independent literal-rule simulation of the token memory: retained
/// `(frame, quality)` pairs recomputed per step with explicit scans.
pub fn naive_memory_simulation(
    qualities: &[f64],
    capacity: usize,
    policy: UpdatePolicy,
) -> Vec<Vec<(u64, f64)>> {
    let mut retained: Vec<(u64, f64)> = Vec::new();
    let mut states = Vec::with_capacity(qualities.len());
    for (step, &q) in qualities.iter().enumerate() {
        let frame = (step + 1) as u64;
        if retained.len() < capacity {
            retained.push((frame, q));
        } else {
            match policy {
                UpdatePolicy::QualityBased => {
                    // the new entry always joins; the weakest previously
                    // stored entry leaves (oldest of any tie)
                    let victim = retained
                        .iter()
                        .enumerate()
                        .min_by(|(_, a), (_, b)| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                        .map(|(i, _)| i)
                        .expect("non-empty");
                    retained.remove(victim);
                    retained.push((frame, q));
                }
                UpdatePolicy::Fifo => {
                    let oldest = retained
                        .iter()
                        .enumerate()
                        .min_by_key(|(_, e)| e.0)
                        .map(|(i, _)| i)
                        .expect("non-empty");
                    retained.remove(oldest);
                    retained.push((frame, q));
                }
            }
        }
        let mut sorted = retained.clone();
        sorted.sort_by_key(|e| e.0);
        states.push(sorted);
    }
    states
}

/// Drive the real memory against the naive simulation over random quality
/// streams. Returns the number of streams checked.
pub fn memory_oracle_check(streams: usize, len: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for stream in 0..streams {
        let qualities: Vec<f64> = (0..len).map(|_| rng.gen_range(0.001..1.0)).collect();
        let capacity = 1 + (stream % 8);
        for policy in [UpdatePolicy::QualityBased, UpdatePolicy::Fifo] {
            let oracle = naive_memory_simulation(&qualities, capacity, policy);
            let mut mem: TokenMemory<u64> = TokenMemory::new(capacity, policy)?;
            for (step, &q) in qualities.iter().enumerate() {
                let frame = (step + 1) as u64;
                mem.insert(MemoryEntry {
                    token: frame,
                    quality: q,
                    frame,
                })?;
                let got: Vec<(u64, f64)> =
                    mem.entries().iter().map(|e| (e.frame, e.quality)).collect();
                if got != oracle[step] {
                    return Err(Error::contract(format!(
                        "memory mismatch: stream {stream} step {step} capacity {capacity} \
                         policy {policy}: {got:?} vs {:?}",
                        oracle[step]
                    )));
                }
            }
        }
    }
    Ok(streams)
}

type OpBuild = fn(&mut Tape<f64>, &ParamStore<f64>, &[ParamId]) -> Result<crate::tensor::Var>;

/// Every differentiable op with small randomized parameter shapes; shared
/// by the op-level gradient sweep so the list exists exactly once.
fn op_catalog() -> Vec<(&'static str, Vec<Vec<usize>>, bool, OpBuild)> {
    fn s(list: &[&[usize]]) -> Vec<Vec<usize>> {
        list.iter().map(|x| x.to_vec()).collect()
    }
    vec![
        ("add", s(&[&[3, 4], &[3, 4]]), false, |t, st, ids| {
            let (a, b) = (t.param(st, ids[0]), t.param(st, ids[1]));
            t.add(a, b)
        }),
        ("sub", s(&[&[3, 4], &[3, 4]]), false, |t, st, ids| {
            let (a, b) = (t.param(st, ids[0]), t.param(st, ids[1]));
            t.sub(a, b)
        }),
        ("mul", s(&[&[3, 4], &[3, 4]]), false, |t, st, ids| {
            let (a, b) = (t.param(st, ids[0]), t.param(st, ids[1]));
            t.mul(a, b)
        }),
        ("div", s(&[&[3, 4], &[3, 4]]), true, |t, st, ids| {
            let (a, b) = (t.param(st, ids[0]), t.param(st, ids[1]));
            t.div(a, b)
        }),
        ("min", s(&[&[4, 4], &[4, 4]]), false, |t, st, ids| {
            let (a, b) = (t.param(st, ids[0]), t.param(st, ids[1]));
            t.min_elem(a, b)
        }),
        ("max", s(&[&[4, 4], &[4, 4]]), false, |t, st, ids| {
            let (a, b) = (t.param(st, ids[0]), t.param(st, ids[1]));
            t.max_elem(a, b)
        }),
        ("neg", s(&[&[3, 5]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            Ok(t.neg(a))
        }),
        ("exp", s(&[&[3, 5]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            Ok(t.exp(a))
        }),
        ("ln_clamped", s(&[&[3, 5]]), true, |t, st, ids| {
            let a = t.param(st, ids[0]);
            Ok(t.ln_clamped(a))
        }),
        ("relu", s(&[&[3, 5]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            Ok(t.relu(a))
        }),
        ("gelu", s(&[&[3, 5]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            Ok(t.gelu(a))
        }),
        ("sigmoid", s(&[&[3, 5]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            Ok(t.sigmoid(a))
        }),
        ("sqrt", s(&[&[3, 5]]), true, |t, st, ids| {
            let a = t.param(st, ids[0]);
            Ok(t.sqrt(a))
        }),
        ("pow_const", s(&[&[3, 5]]), true, |t, st, ids| {
            let a = t.param(st, ids[0]);
            Ok(t.pow_const(a, 2.5))
        }),
        ("mul_scalar", s(&[&[3, 5]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            Ok(t.mul_scalar(a, -1.7))
        }),
        ("add_scalar", s(&[&[3, 5]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            Ok(t.add_scalar(a, 0.37))
        }),
        ("matmul", s(&[&[3, 4], &[4, 2]]), false, |t, st, ids| {
            let (a, b) = (t.param(st, ids[0]), t.param(st, ids[1]));
            t.matmul(a, b)
        }),
        ("matmul_nt", s(&[&[3, 4], &[2, 4]]), false, |t, st, ids| {
            let (a, b) = (t.param(st, ids[0]), t.param(st, ids[1]));
            t.matmul_nt(a, b)
        }),
        ("transpose2d", s(&[&[3, 5]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            t.transpose2d(a)
        }),
        ("reshape", s(&[&[3, 4]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            t.reshape(a, &[2, 6])
        }),
        ("concat0", s(&[&[2, 3], &[3, 3]]), false, |t, st, ids| {
            let (a, b) = (t.param(st, ids[0]), t.param(st, ids[1]));
            t.concat0(&[a, b])
        }),
        ("slice0", s(&[&[5, 3]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            t.slice0(a, 1, 3)
        }),
        (
            "concat_cols",
            s(&[&[3, 2], &[3, 4]]),
            false,
            |t, st, ids| {
                let (a, b) = (t.param(st, ids[0]), t.param(st, ids[1]));
                t.concat_cols(&[a, b])
            },
        ),
        ("slice_cols", s(&[&[3, 6]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            t.slice_cols(a, 2, 3)
        }),
        ("pick", s(&[&[4, 4]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            t.pick(a, 7)
        }),
        ("sum_all", s(&[&[4, 4]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            Ok(t.sum_all(a))
        }),
        ("mean_all", s(&[&[4, 4]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            Ok(t.mean_all(a))
        }),
        ("add_bias", s(&[&[3, 4], &[4]]), false, |t, st, ids| {
            let (a, b) = (t.param(st, ids[0]), t.param(st, ids[1]));
            t.add_bias(a, b)
        }),
        ("scale_rows", s(&[&[3, 4], &[3, 1]]), false, |t, st, ids| {
            let (a, b) = (t.param(st, ids[0]), t.param(st, ids[1]));
            t.scale_rows(a, b)
        }),
        ("softmax_rows", s(&[&[3, 5]]), false, |t, st, ids| {
            let a = t.param(st, ids[0]);
            t.softmax_rows(a)
        }),
        (
            "layer_norm",
            s(&[&[3, 6], &[6], &[6]]),
            false,
            |t, st, ids| {
                let (x, g, b) = (
                    t.param(st, ids[0]),
                    t.param(st, ids[1]),
                    t.param(st, ids[2]),
                );
                t.layer_norm(x, g, b, 1e-5)
            },
        ),
        (
            "conv2d",
            s(&[&[2, 5, 4], &[3, 2, 3, 3], &[3]]),
            false,
            |t, st, ids| {
                let (x, k, b) = (
                    t.param(st, ids[0]),
                    t.param(st, ids[1]),
                    t.param(st, ids[2]),
                );
                t.conv2d(x, k, b, 1)
            },
        ),
        (
            "batch_norm_train",
            s(&[&[2, 3, 3], &[2], &[2]]),
            false,
            |t, st, ids| {
                let (x, g, b) = (
                    t.param(st, ids[0]),
                    t.param(st, ids[1]),
                    t.param(st, ids[2]),
                );
                // scratch buffers live outside the checked ids
                t.batch_norm_train(x, g, b, ids[3], ids[4], st, 1e-5, 0.1)
            },
        ),
        (
            "batch_norm_eval",
            s(&[&[2, 3, 3], &[2], &[2]]),
            false,
            |t, st, ids| {
                let (x, g, b) = (
                    t.param(st, ids[0]),
                    t.param(st, ids[1]),
                    t.param(st, ids[2]),
                );
                let rm = st.value(ids[3]).clone();
                let rv = st.value(ids[4]).clone();
                t.batch_norm_eval(x, g, b, &rm, &rv, 1e-5)
            },
        ),
    ]
}

/// Central finite-difference sweep over every differentiable op on
/// randomized small shapes. Returns the worst relative error seen.
pub fn op_gradient_sweep(seeds: u64, fd_step: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for (name, shapes, positive, build) in op_catalog() {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
            let mut store = ParamStore::new();
            let ids: Vec<ParamId> = shapes
                .iter()
                .enumerate()
                .map(|(i, shape)| {
                    let value = if positive {
                        Tensor::uniform(shape, 0.2, 1.2, &mut rng)
                    } else {
                        // bounded away from relu/min/max kinks
                        let n: usize = shape.iter().product();
                        let data: Vec<f64> = (0..n)
                            .map(|_| {
                                let v: f64 = rng.gen_range(0.2..1.0);
                                if rng.gen_bool(0.5) {
                                    v
                                } else {
                                    -v
                                }
                            })
                            .collect();
                        Tensor::new(shape.clone(), data).expect("shape")
                    };
                    store.add(format!("p{i}"), value, true, crate::tensor::LrGroup::Other)
                })
                .collect();
            let mut check_ids = ids.clone();
            if name.starts_with("batch_norm") {
                // add the running-stat buffers the op needs
                let rm = store.add(
                    "rm",
                    Tensor::uniform(&[2], -0.5, 0.5, &mut rng),
                    false,
                    crate::tensor::LrGroup::Other,
                );
                let rv = store.add(
                    "rv",
                    Tensor::uniform(&[2], 0.5, 2.0, &mut rng),
                    false,
                    crate::tensor::LrGroup::Other,
                );
                check_ids = vec![ids[0], ids[1], ids[2]];
                let _ = (rm, rv);
            }
            let all_ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
            // probe the output shape, then fix readout weights
            let mut probe_tape = Tape::new();
            let probe = build(&mut probe_tape, &store, &all_ids)?;
            let out_shape = probe_tape.shape(probe).to_vec();
            drop(probe_tape);
            let weights = Tensor::<f64>::uniform(&out_shape, -1.0, 1.0, &mut rng);
            let err = crate::gradcheck::max_rel_error(
                &mut store,
                &check_ids,
                &mut |tape, st| {
                    let y = build(tape, st, &all_ids)?;
                    let c = tape.constant(weights.clone());
                    let p = tape.mul(y, c)?;
                    Ok(tape.sum_all(p))
                },
                fd_step,
            )?;
            if err > worst {
                worst = err;
            }
            if err >= 1e-3 {
                return Err(Error::contract(format!(
                    "gradient check failed for op '{name}' at seed {seed}: relative error {err:.3e}"
                )));
            }
        }
    }
    Ok(worst)
}

/// Micro configuration for end-to-end gradient checks: small enough that
/// finite differences over a whole clip stay cheap.
pub fn micro_config() -> Config {
    let mut cfg = Config::default();
    cfg.patch_size = 8;
    cfg.embed_dim = 16;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.search_size = 32;
    cfg.template_size = 16;
    cfg.head_blocks = 2;
    cfg.clip_len = 3;
    cfg.memory_capacity = 4; // no eviction inside the clip
    cfg.validate().expect("micro config");
    cfg
}

fn micro_sequence(seed: u64) -> Result<LoadedSequence> {
    let spec = SynthSpec {
        frames: 8,
        width: 64,
        height: 64,
        obj_w: 12.0,
        obj_h: 12.0,
        start_cx: 24.0,
        start_cy: 24.0,
        motion: Motion::Linear { dx: 1.0, dy: 0.5 },
        noise: 0.02,
        ..Default::default()
    };
    let out = generate(&spec, seed)?;
    Ok(LoadedSequence {
        name: "micro".into(),
        frames: out.frames,
        boxes: out.boxes,
        occlusion: vec![0.0; 8],
    })
}

/// Finite-difference check of the full clip loss against the backward pass
/// on `sampled_params` randomly chosen parameters (64-bit). Returns the
/// max relative error.
pub fn clip_loss_gradient_check(seed: u64, sampled_params: usize) -> Result<f64> {
    let cfg = micro_config();
    let mut model: Model<f64> = Model::new(&cfg, seed)?;
    let seq = micro_sequence(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let clip = sample_clip(
        seq.frames.len(),
        cfg.clip_len,
        cfg.max_interval,
        0.5,
        &mut rng,
    )
    .ok_or_else(|| Error::contract("micro sequence too short"))?;
    let trainable: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut ids = trainable;
    use rand::seq::SliceRandom;
    ids.shuffle(&mut pick_rng);
    ids.truncate(sampled_params);

    let jitter_seed = seed.wrapping_add(3);
    let encoder = model.encoder.clone();
    let fusion = model.fusion.clone();
    let head = model.head.clone();
    max_rel_error_sampled(
        &mut model.store,
        &ids,
        &mut |tape, store| {
            // identical jitter stream on every evaluation
            let mut jrng = ChaCha8Rng::seed_from_u64(jitter_seed);
            let eval_model = Model {
                cfg: cfg.clone(),
                store: store.clone(),
                encoder: encoder.clone(),
                fusion: fusion.clone(),
                head: head.clone(),
            };
            let (loss, _) = build_clip_loss(tape, &eval_model, &seq, &clip, &mut jrng)?;
            Ok(loss)
        },
        1e-6,
        3,
        &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(4)),
    )
}

/// Track one sequence at several memory capacities and evaluate each run.
pub fn capacity_sweep<T: Real>(
    model: &Model<T>,
    seq: &LoadedSequence,
    capacities: &[usize],
    use_oracle_head: bool,
) -> Result<Vec<(usize, EvalReport)>> {
    let oracles: Option<Vec<OracleFrame>> = if use_oracle_head {
        Some(
            seq.boxes
                .iter()
                .zip(&seq.occlusion)
                .skip(1)
                .map(|(gt, &occ)| OracleFrame {
                    gt: *gt,
                    occluded: occ >= 0.5,
                })
                .collect(),
        )
    } else {
        None
    };
    let mut rows = Vec::with_capacity(capacities.len());
    for &n in capacities {
        let opts = TrackOptions {
            capacity: Some(n),
            ..Default::default()
        };
        let tracked = track_sequence(model, &seq.frames, &seq.boxes[0], &opts, oracles.as_deref())?;
        let boxes: Vec<_> = tracked.iter().map(|r| r.bbox).collect();
        rows.push((n, evaluate(&boxes, &seq.boxes)?));
    }
    Ok(rows)
}

/// A named check with its outcome, for `verify` output.
pub struct CheckLine {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// The full property suite at runtime. Returns one line per check.
pub fn run_suite(seed: u64) -> Vec<CheckLine> {
    let mut lines = Vec::new();
    let mut push = |name: &'static str, result: Result<(bool, String)>| match result {
        Ok((pass, detail)) => lines.push(CheckLine { name, pass, detail }),
        Err(e) => lines.push(CheckLine {
            name,
            pass: false,
            detail: e.to_string(),
        }),
    };

    push("reparam-equivalence-f32", {
        reparam_probe::<f32>(&Config::default(), 100, seed).map(|dev| {
            (
                dev < 1e-4,
                format!("max-abs deviation {dev:.3e} (tol 1e-4)"),
            )
        })
    });
    push("reparam-equivalence-f64", {
        reparam_probe::<f64>(&Config::default(), 100, seed).map(|dev| {
            (
                dev < 1e-8,
                format!("max-abs deviation {dev:.3e} (tol 1e-8)"),
            )
        })
    });
    push("memory-oracle", {
        memory_oracle_check(1000, 100, seed).map(|n| {
            (
                true,
                format!("{n} random streams, capacities 1-8, both policies"),
            )
        })
    });
    push("op-gradients", {
        op_gradient_sweep(20, 1e-6).map(|err| {
            (
                err < 1e-3,
                format!("max relative error {err:.3e} (tol 1e-3)"),
            )
        })
    });
    push("clip-gradients", {
        clip_loss_gradient_check(seed, 10).map(|err| {
            (
                err < 1e-2,
                format!("max relative error {err:.3e} (tol 1e-2)"),
            )
        })
    });
    lines
}
