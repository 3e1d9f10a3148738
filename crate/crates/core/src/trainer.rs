//! Clip-level training: the tracking pipeline unrolled over a sampled clip
//! with groundtruth-centered search crops, per-frame losses accumulated,
//! and one backward pass through the whole clip including the propagated
//! tokens and the token memory.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::image::{crop_resize, standardize, CropParams};
use crate::loss::{focal_loss, gaussian_target, giou_loss, l1_loss, total_loss, LossParts};
use crate::memory::{MemoryEntry, TokenMemory};
use crate::model::Model;
use crate::optim::{lr_schedule, AdamW};
use crate::pipeline::run_frame;
use crate::sampler::{sample_clip, ClipSample};
use crate::sequence::LoadedSequence;
use crate::tensor::{Real, Tape, Var};

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
}

/// Normalized regression targets of a groundtruth box inside a crop.
struct CropTarget {
    cell: (usize, usize),
    gt4: [f64; 4],
}

fn crop_target(gt: &BBox, params: &CropParams, grid: usize) -> CropTarget {
    let (u, v) = params.image_to_model(gt.cx, gt.cy);
    let nx = (u / params.out_side as f64).clamp(0.0, 1.0 - 1e-9);
    let ny = (v / params.out_side as f64).clamp(0.0, 1.0 - 1e-9);
    let j = ((nx * grid as f64).floor() as usize).min(grid - 1);
    let i = ((ny * grid as f64).floor() as usize).min(grid - 1);
    let nw = (gt.w / params.side).clamp(1e-4, 1.0 - 1e-4);
    let nh = (gt.h / params.side).clamp(1e-4, 1.0 - 1e-4);
    CropTarget {
        cell: (i, j),
        gt4: [nx, ny, nw, nh],
    }
}

/// Read the predicted box at the target cell as a `[4]` tape tensor
/// `(cx, cy, w, h)` in crop-normalized coordinates.
fn predicted_box_at<T: Real>(
    tape: &mut Tape<T>,
    offset: Var,
    size: Var,
    cell: (usize, usize),
    grid: usize,
) -> Result<Var> {
    let (i, j) = cell;
    let plane = grid * grid;
    let flat_off = tape.reshape(offset, &[2 * plane])?;
    let flat_size = tape.reshape(size, &[2 * plane])?;
    let off_x = tape.pick(flat_off, i * grid + j)?;
    let off_y = tape.pick(flat_off, plane + i * grid + j)?;
    let w = tape.pick(flat_size, i * grid + j)?;
    let h = tape.pick(flat_size, plane + i * grid + j)?;
    let cx = tape.add_scalar(off_x, j as f64);
    let cx = tape.mul_scalar(cx, 1.0 / grid as f64);
    let cy = tape.add_scalar(off_y, i as f64);
    let cy = tape.mul_scalar(cy, 1.0 / grid as f64);
    tape.concat0(&[cx, cy, w, h])
}

/// Record the whole-clip loss onto `tape`: the pipeline unrolled over the
/// clip's frames with jittered groundtruth-centered crops, per-frame
/// losses averaged. Exposed separately so finite-difference checks can
/// rebuild the identical loss without stepping the optimizer.
pub fn build_clip_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    seq: &LoadedSequence,
    clip: &ClipSample,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossBreakdown)> {
    let cfg = &model.cfg;
    let grid = cfg.grid();

    // template from its groundtruth box, no jitter
    let tb = &seq.boxes[clip.template];
    let (tcrop, _) = crop_resize(
        &seq.frames[clip.template],
        tb,
        cfg.template_factor,
        cfg.template_size,
    )?;
    let template_img = standardize::<T>(&tcrop, cfg.norm_mean, cfg.norm_std);
    let template = model
        .encoder
        .patch_embed(tape, &model.store, &template_img)?;

    let mut token = tape.param(&model.store, model.encoder.init_token);
    let mut memory: TokenMemory<Var> = TokenMemory::new(cfg.memory_capacity, cfg.memory_policy)?;
    let mut frame_losses: Vec<Var> = Vec::with_capacity(clip.search.len());
    let mut sums = LossBreakdown {
        total: 0.0,
        cls: 0.0,
        giou: 0.0,
        l1: 0.0,
    };

    for (k, &fi) in clip.search.iter().enumerate() {
        let gt = &seq.boxes[fi];
        // jittered groundtruth-centered crop
        let base_side = cfg.search_factor * (gt.w * gt.h).sqrt();
        let jx = rng.gen_range(-cfg.center_jitter..=cfg.center_jitter) * base_side;
        let jy = rng.gen_range(-cfg.center_jitter..=cfg.center_jitter) * base_side;
        let scale = rng.gen_range(cfg.scale_jitter_lo..=cfg.scale_jitter_hi);
        let crop_center = BBox::new(gt.cx + jx, gt.cy + jy, gt.w, gt.h)?;
        let (crop, params) = crop_resize(
            &seq.frames[fi],
            &crop_center,
            cfg.search_factor * scale,
            cfg.search_size,
        )?;
        let search = standardize::<T>(&crop, cfg.norm_mean, cfg.norm_std);

        let history: Vec<Var> = memory.snapshot().into_iter().copied().collect();
        let pass = run_frame(tape, model, template, token, &history, &search, true)?;

        let target = crop_target(gt, &params, grid);
        let cls_target = gaussian_target::<T>(grid, grid, target.cell, cfg.target_sigma);
        let cls = focal_loss(tape, pass.head.score, &cls_target, FOCAL_ALPHA, FOCAL_BETA)?;
        let pred4 = predicted_box_at(tape, pass.head.offset, pass.head.size, target.cell, grid)?;
        let giou = giou_loss(tape, pred4, target.gt4)?;
        let l1 = l1_loss(tape, pred4, target.gt4)?;
        let frame_loss = total_loss(
            tape,
            LossParts { cls, giou, l1 },
            cfg.lambda_cls,
            cfg.lambda_giou,
            cfg.lambda_l1,
        )?;
        frame_losses.push(frame_loss);
        sums.cls += tape.scalar_value(cls).as_f64();
        sums.giou += tape.scalar_value(giou).as_f64();
        sums.l1 += tape.scalar_value(l1).as_f64();

        let q = crate::memory::quality(tape.value(pass.head.score))?;
        let stored = if cfg.detach_tokens {
            let detached = tape.value(pass.fused).clone();
            tape.constant(detached)
        } else {
            pass.fused
        };
        memory.insert(MemoryEntry {
            token: stored,
            quality: q,
            frame: (k + 1) as u64,
        })?;
        token = stored;
    }

    let n = frame_losses.len() as f64;
    let mut acc = frame_losses[0];
    for &l in &frame_losses[1..] {
        acc = tape.add(acc, l)?;
    }
    let clip_loss = tape.mul_scalar(acc, 1.0 / n);
    sums.total = tape.scalar_value(clip_loss).as_f64();
    sums.cls /= n;
    sums.giou /= n;
    sums.l1 /= n;
    Ok((clip_loss, sums))
}

/// One optimizer update from one sampled clip. Gradients flow through the
/// whole clip: propagated tokens and stored memory entries stay linked to
/// the tape unless `detach_tokens` is set.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    seq: &LoadedSequence,
    clip: &ClipSample,
    opt: &mut AdamW<T>,
    lr_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    model.store.zero_grads();
    let mut tape: Tape<T> = Tape::new();
    let (clip_loss, sums) = build_clip_loss(&mut tape, model, seq, clip, rng)?;
    if !sums.total.is_finite() {
        return Err(Error::contract(format!(
            "non-finite clip loss {} (cls {}, giou {}, l1 {})",
            sums.total, sums.cls, sums.giou, sums.l1
        )));
    }
    tape.backward(clip_loss, &mut model.store)?;
    if model.cfg.grad_clip > 0.0 {
        let max_norm = model.cfg.grad_clip;
        clip_gradients(model, max_norm);
    }
    opt.step(&mut model.store, lr_scale);
    tape.apply_buffer_updates(&mut model.store)?;
    Ok(sums)
}

fn clip_gradients<T: Real>(model: &mut Model<T>, max_norm: f64) {
    let mut sq = 0.0f64;
    for (_, p) in model.store.iter() {
        if p.trainable {
            for &g in p.grad.data() {
                sq += g.as_f64() * g.as_f64();
            }
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return;
    }
    let scale = T::from_f64(max_norm / norm);
    let n = model.store.len();
    for i in 0..n {
        let id = crate::tensor::ParamId(i);
        if model.store.get(id).trainable {
            let p = model.store.get_mut(id);
            for g in p.grad.data_mut() {
                *g = *g * scale;
            }
        }
    }
}

/// Full training loop over one or more sequences. Appends one log line per
/// step: `step,loss,loss_cls,loss_giou,loss_l1,lr`.
pub fn train<T: Real>(
    model: &mut Model<T>,
    sequences: &[LoadedSequence],
    log: Option<&mut dyn Write>,
) -> Result<Vec<LossBreakdown>> {
    if sequences.is_empty() {
        return Err(Error::contract("no training sequences"));
    }
    let cfg = model.cfg.clone();
    // clip length is fixed per run; sequences that cannot host a full clip
    // plus a template frame are skipped
    let usable: Vec<&LoadedSequence> = sequences
        .iter()
        .filter(|s| s.frames.len() > cfg.clip_len)
        .collect();
    if usable.is_empty() {
        return Err(Error::contract(format!(
            "no sequence is long enough for clips of length {} (need {} frames)",
            cfg.clip_len,
            cfg.clip_len + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.store, &cfg);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut log = log;
    for step in 0..cfg.steps {
        let seq = usable[rng.gen_range(0..usable.len())];
        let clip = sample_clip(
            seq.frames.len(),
            cfg.clip_len,
            cfg.max_interval,
            cfg.reverse_prob,
            &mut rng,
        )
        .ok_or_else(|| {
            Error::contract(format!(
                "sequence '{}' too short for clips of length {}",
                seq.name, cfg.clip_len
            ))
        })?;
        let lr_scale = lr_schedule(step, cfg.steps, cfg.decay_start);
        let parts = train_step(model, seq, &clip, &mut opt, lr_scale, &mut rng)?;
        if let Some(out) = log.as_deref_mut() {
            writeln!(
                out,
                "{step},{:.6},{:.6},{:.6},{:.6},{:.6e}",
                parts.total,
                parts.cls,
                parts.giou,
                parts.l1,
                cfg.lr_rest * lr_scale
            )?;
        }
        history.push(parts);
    }
    Ok(history)
}
