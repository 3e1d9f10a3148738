//! Frame-by-frame tracking: crop, joint encode, history fusion, mask-based
//! search enhancement, head prediction, window smoothing, box decode, and
//! the memory update.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::head::{tokens_to_grid, HeadOutput, HeadOutputVars};
use crate::image::{crop_resize, standardize, CropParams, Image};
use crate::memory::{quality, MemoryEntry, TokenMemory, UpdatePolicy};
use crate::model::Model;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Outer product of 1-D Hann windows, `hann(n,i) = 0.5(1 - cos(2*pi*i/(n-1)))`.
pub fn hanning_window<T: Real>(h: usize, w: usize) -> Result<Tensor<T>> {
    if h < 2 || w < 2 {
        return Err(Error::config(format!(
            "hanning window needs both sides >= 2, got {h}x{w}"
        )));
    }
    let hann = |n: usize, i: usize| -> f64 {
        0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
    };
    let mut out = Tensor::zeros(&[h, w]);
    for i in 0..h {
        let wi = hann(h, i);
        for j in 0..w {
            out.data_mut()[i * w + j] = T::from_f64(wi * hann(w, j));
        }
    }
    Ok(out)
}

/// Per-token gating of the search tokens by the fused target token:
/// `x'_i = x_i + sigmoid((st . x_i)/sqrt(D)) * x_i`. The residual keeps the
/// gain inside (1,2) so the mask modulates without zeroing information.
pub fn mask_enhance<T: Real>(tape: &mut Tape<T>, x: Var, st: Var) -> Result<Var> {
    let (sx, ss) = (tape.shape(x), tape.shape(st));
    if sx.len() != 2 || ss.len() != 2 || ss[0] != 1 || sx[1] != ss[1] {
        return Err(Error::DimensionMismatch {
            op: "mask_enhance",
            lhs: sx.to_vec(),
            rhs: ss.to_vec(),
        });
    }
    let d = sx[1] as f64;
    let logits = tape.matmul_nt(x, st)?;
    let scaled = tape.mul_scalar(logits, 1.0 / d.sqrt());
    let gate = tape.sigmoid(scaled);
    let boosted = tape.scale_rows(x, gate)?;
    tape.add(x, boosted)
}

/// Box decoded from the head maps, plus the peak cell that produced it.
#[derive(Clone, Debug)]
pub struct Decoded<T: Real> {
    pub bbox: BBox,
    pub peak: (usize, usize),
    /// The map the argmax ran on (windowed when a window was given).
    pub score_used: Tensor<T>,
}

/// Pick the peak of `score (.) window`, read the regression maps at that
/// cell (from the raw maps), and map everything back to image pixels.
/// Ties break to the first cell in row-major order.
pub fn decode_box<T: Real>(
    out: &HeadOutput<T>,
    crop: &CropParams,
    window: Option<&Tensor<T>>,
) -> Result<Decoded<T>> {
    let s = out.score.shape();
    let (h, w) = (s[0], s[1]);
    if out.offset.shape() != [2, h, w] || out.size.shape() != [2, h, w] {
        return Err(Error::DimensionMismatch {
            op: "decode_box",
            lhs: out.offset.shape().to_vec(),
            rhs: vec![2, h, w],
        });
    }
    let score_used = match window {
        Some(win) => out.score.zip_map(win, |a, b| a * b)?,
        None => out.score.clone(),
    };
    let mut peak = 0usize;
    let mut best = T::neg_infinity();
    for (i, &v) in score_used.data().iter().enumerate() {
        if v > best {
            best = v;
            peak = i;
        }
    }
    let (pi, pj) = (peak / w, peak % w);
    let off_x = out.offset.data()[out.offset.idx3(0, pi, pj)].as_f64();
    let off_y = out.offset.data()[out.offset.idx3(1, pi, pj)].as_f64();
    let nw = out.size.data()[out.size.idx3(0, pi, pj)].as_f64();
    let nh = out.size.data()[out.size.idx3(1, pi, pj)].as_f64();
    let nx = (pj as f64 + off_x) / w as f64;
    let ny = (pi as f64 + off_y) / h as f64;
    let (cx, cy) = crop.model_to_image(nx * crop.out_side as f64, ny * crop.out_side as f64);
    let bbox = BBox::new(
        cx,
        cy,
        crop.norm_len_to_image(nw).max(1e-6),
        crop.norm_len_to_image(nh).max(1e-6),
    )?;
    Ok(Decoded {
        bbox,
        peak: (pi, pj),
        score_used,
    })
}

/// One full network pass over a frame, shared by tracking and training.
pub struct FramePass {
    pub fused: Var,
    pub head: HeadOutputVars,
}

pub fn run_frame<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    template: Var,
    token_in: Var,
    history: &[Var],
    search: &Tensor<T>,
    train: bool,
) -> Result<FramePass> {
    let store = &model.store;
    let x_emb = model.encoder.patch_embed(tape, store, search)?;
    let enc = model
        .encoder
        .encode(tape, store, token_in, template, x_emb)?;
    let fused = model.fusion.fuse(tape, store, history, enc.st)?;
    let enhanced = mask_enhance(tape, enc.x, fused)?;
    let feats = tokens_to_grid(tape, enhanced, model.cfg.grid())?;
    let head = model.head.forward(tape, store, feats, train)?;
    Ok(FramePass { fused, head })
}

/// Per-sequence mutable tracking state; single-owner.
#[derive(Clone, Debug)]
pub struct TrackerState<T: Real> {
    /// Patch-embedded template tokens, cached from the first frame.
    pub template: Tensor<T>,
    pub prev_box: BBox,
    /// Propagated token: the most recent fused token (the learnable init
    /// value before any step has run).
    pub token: Tensor<T>,
    pub memory: TokenMemory<Tensor<T>>,
    pub frame: u64,
}

/// Optional overrides applied on top of the model config for a run.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrackOptions {
    pub capacity: Option<usize>,
    pub policy: Option<UpdatePolicy>,
    pub window: Option<bool>,
}

pub fn track_init<T: Real>(
    model: &Model<T>,
    frame: &Image,
    gt: &BBox,
    opts: &TrackOptions,
) -> Result<TrackerState<T>> {
    let cfg = &model.cfg;
    let (crop, _) = crop_resize(frame, gt, cfg.template_factor, cfg.template_size)?;
    let std_crop = standardize::<T>(&crop, cfg.norm_mean, cfg.norm_std);
    let mut tape = Tape::new();
    let z = model
        .encoder
        .patch_embed(&mut tape, &model.store, &std_crop)?;
    let template = tape.value(z).clone();
    let token = model.store.value(model.encoder.init_token).clone();
    let memory = TokenMemory::new(
        opts.capacity.unwrap_or(cfg.memory_capacity),
        opts.policy.unwrap_or(cfg.memory_policy),
    )?;
    Ok(TrackerState {
        template,
        prev_box: *gt,
        token,
        memory,
        frame: 1,
    })
}

/// Groundtruth-derived head stand-in for pipeline and mechanism tests: a
/// sharp score peak at the target cell on visible frames, a flat map on
/// occluded ones.
#[derive(Clone, Copy, Debug)]
pub struct OracleFrame {
    pub gt: BBox,
    pub occluded: bool,
}

pub fn oracle_head_output<T: Real>(
    crop: &CropParams,
    oracle: &OracleFrame,
    grid: usize,
) -> Result<HeadOutput<T>> {
    let mut score = Tensor::full(&[grid, grid], T::from_f64(0.001));
    let mut offset = Tensor::full(&[2, grid, grid], T::from_f64(0.5));
    let mut size = Tensor::full(&[2, grid, grid], T::from_f64(0.5));
    let gt = &oracle.gt;
    let nw = (gt.w / crop.side).clamp(1e-4, 1.0 - 1e-4);
    let nh = (gt.h / crop.side).clamp(1e-4, 1.0 - 1e-4);
    for v in size.data_mut()[..grid * grid].iter_mut() {
        *v = T::from_f64(nw);
    }
    for v in size.data_mut()[grid * grid..].iter_mut() {
        *v = T::from_f64(nh);
    }
    if oracle.occluded {
        score.fill(T::from_f64(0.5));
        return Ok(HeadOutput {
            score,
            offset,
            size,
        });
    }
    let (u, v) = crop.image_to_model(gt.cx, gt.cy);
    let gx = (u / crop.out_side as f64) * grid as f64;
    let gy = (v / crop.out_side as f64) * grid as f64;
    let j = (gx.floor() as isize).clamp(0, grid as isize - 1) as usize;
    let i = (gy.floor() as isize).clamp(0, grid as isize - 1) as usize;
    let off_x = (gx - j as f64).clamp(0.0, 1.0 - 1e-9);
    let off_y = (gy - i as f64).clamp(0.0, 1.0 - 1e-9);
    score.data_mut()[i * grid + j] = T::from_f64(0.999);
    for val in offset.data_mut()[..grid * grid].iter_mut() {
        *val = T::from_f64(off_x);
    }
    for val in offset.data_mut()[grid * grid..].iter_mut() {
        *val = T::from_f64(off_y);
    }
    Ok(HeadOutput {
        score,
        offset,
        size,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct StepResult {
    pub bbox: BBox,
    /// Peak-to-mass quality of the raw (pre-window) score map.
    pub quality: f64,
}

/// Advance one frame. With `oracle` given, the network still runs (the
/// fused token is real) but the head maps are synthesized from groundtruth.
pub fn track_step<T: Real>(
    model: &Model<T>,
    state: &mut TrackerState<T>,
    frame: &Image,
    opts: &TrackOptions,
    oracle: Option<&OracleFrame>,
) -> Result<StepResult> {
    let cfg = &model.cfg;
    let t = state.frame + 1;
    let (crop, params) = crop_resize(frame, &state.prev_box, cfg.search_factor, cfg.search_size)?;
    let search = standardize::<T>(&crop, cfg.norm_mean, cfg.norm_std);

    let mut tape = Tape::new();
    let template = tape.constant(state.template.clone());
    let token_in = tape.constant(state.token.clone());
    let history: Vec<Var> = state
        .memory
        .snapshot()
        .into_iter()
        .map(|tok| tape.constant(tok.clone()))
        .collect();
    let pass = run_frame(
        &mut tape, model, template, token_in, &history, &search, false,
    )?;

    let head_out = match oracle {
        Some(frame_oracle) => oracle_head_output(&params, frame_oracle, cfg.grid())?,
        None => HeadOutput {
            score: tape.value(pass.head.score).clone(),
            offset: tape.value(pass.head.offset).clone(),
            size: tape.value(pass.head.size).clone(),
        },
    };

    let use_window = opts.window.unwrap_or(cfg.window);
    let window = if use_window {
        Some(hanning_window::<T>(cfg.grid(), cfg.grid())?)
    } else {
        None
    };
    let decoded = decode_box(&head_out, &params, window.as_ref())?;
    // Quality always comes from the raw map; the window is a motion prior,
    // not target saliency.
    let q = quality(&head_out.score)?;
    let fused_value = tape.value(pass.fused).clone();
    state.memory.insert(MemoryEntry {
        token: fused_value.clone(),
        quality: q,
        frame: t,
    })?;
    state.token = fused_value;
    state.prev_box = decoded.bbox;
    state.frame = t;
    Ok(StepResult {
        bbox: decoded.bbox,
        quality: q,
    })
}

/// One output row per frame: `frame_index,x,y,w,h,Q` (top-left convention).
#[derive(Clone, Copy, Debug)]
pub struct TrackRow {
    pub frame: usize,
    pub bbox: BBox,
    pub quality: f64,
}

/// Track a whole in-memory sequence from its first-frame groundtruth.
/// `oracles`, when given, must hold one entry per frame after the first.
pub fn track_sequence<T: Real>(
    model: &Model<T>,
    frames: &[Image],
    init_box: &BBox,
    opts: &TrackOptions,
    oracles: Option<&[OracleFrame]>,
) -> Result<Vec<TrackRow>> {
    if frames.is_empty() {
        return Err(Error::contract("cannot track an empty sequence"));
    }
    if let Some(o) = oracles {
        if o.len() != frames.len() - 1 {
            return Err(Error::contract(format!(
                "oracle list has {} entries for {} steps",
                o.len(),
                frames.len() - 1
            )));
        }
    }
    let mut state = track_init(model, &frames[0], init_box, opts)?;
    let mut rows = vec![TrackRow {
        frame: 1,
        bbox: *init_box,
        quality: 1.0,
    }];
    for (k, frame) in frames.iter().enumerate().skip(1) {
        let oracle = oracles.map(|o| &o[k - 1]);
        let step = track_step(model, &mut state, frame, opts, oracle)?;
        rows.push(TrackRow {
            frame: k + 1,
            bbox: step.bbox,
            quality: step.quality,
        });
    }
    Ok(rows)
}
