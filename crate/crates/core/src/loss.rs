//! Training losses: center-point focal classification plus GIoU and L1
//! box regression, combined as a weighted sum.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Gaussian-smoothed center target: exactly 1 at the center cell, falling
/// off with the squared cell distance.
pub fn gaussian_target<T: Real>(
    h: usize,
    w: usize,
    center: (usize, usize),
    sigma: f64,
) -> Tensor<T> {
    let mut out = Tensor::zeros(&[h, w]);
    let (ci, cj) = center;
    for i in 0..h {
        for j in 0..w {
            let di = i as f64 - ci as f64;
            let dj = j as f64 - cj as f64;
            let v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            out.data_mut()[i * w + j] = T::from_f64(v);
        }
    }
    out.data_mut()[ci * w + cj] = T::one();
    out
}

/// Center-point focal loss. At the (single) positive cell:
/// `-(1-p)^alpha * ln p`; elsewhere `-(1-t)^beta * p^alpha * ln(1-p)`.
pub fn focal_loss<T: Real>(
    tape: &mut Tape<T>,
    score: Var,
    target: &Tensor<T>,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    if tape.shape(score) != target.shape() {
        return Err(Error::DimensionMismatch {
            op: "focal_loss",
            lhs: tape.shape(score).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let positives: Vec<usize> = target
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == T::one())
        .map(|(i, _)| i)
        .collect();
    if positives.len() != 1 {
        return Err(Error::contract(format!(
            "focal target must contain exactly one positive cell, found {}",
            positives.len()
        )));
    }
    let pos = positives[0];
    let n = target.numel();
    let flat = tape.reshape(score, &[n])?;

    // positive cell: -(1-p)^alpha * ln p
    let p_pos = tape.pick(flat, pos)?;
    let one_minus = tape.neg(p_pos);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let focus = tape.pow_const(one_minus, alpha);
    let logp = tape.ln_clamped(p_pos);
    let pos_term = tape.mul(focus, logp)?;
    let pos_term = tape.neg(pos_term);

    // negatives: -(1-t)^beta * p^alpha * ln(1-p), weight precomputed
    let mut weights = Tensor::zeros(&[n]);
    for (i, &t) in target.data().iter().enumerate() {
        if i != pos {
            weights.data_mut()[i] = (T::one() - t).powf(T::from_f64(beta));
        }
    }
    let w = tape.constant(weights);
    let p_alpha = tape.pow_const(flat, alpha);
    let one_minus_p = tape.neg(flat);
    let one_minus_p = tape.add_scalar(one_minus_p, 1.0);
    let log1mp = tape.ln_clamped(one_minus_p);
    let neg_map = tape.mul(p_alpha, log1mp)?;
    let neg_map = tape.mul(neg_map, w)?;
    let neg_sum = tape.sum_all(neg_map);
    let neg_term = tape.neg(neg_sum);

    tape.add(pos_term, neg_term)
}

/// `1 - GIoU` between a predicted `[4]` box `(cx,cy,w,h)` on the tape and a
/// constant groundtruth box, all in crop-normalized coordinates.
pub fn giou_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: [f64; 4]) -> Result<Var> {
    if tape.shape(pred) != [4] {
        return Err(Error::DimensionMismatch {
            op: "giou_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: vec![4],
        });
    }
    let pw = tape.value(pred).data()[2].as_f64();
    let ph = tape.value(pred).data()[3].as_f64();
    if pw <= 0.0 || ph <= 0.0 || gt[2] <= 0.0 || gt[3] <= 0.0 {
        return Err(Error::contract(format!(
            "giou needs positive extents, got pred ({pw},{ph}) gt ({},{})",
            gt[2], gt[3]
        )));
    }
    let cx = tape.pick(pred, 0)?;
    let cy = tape.pick(pred, 1)?;
    let w = tape.pick(pred, 2)?;
    let h = tape.pick(pred, 3)?;
    let half_w = tape.mul_scalar(w, 0.5);
    let half_h = tape.mul_scalar(h, 0.5);
    let ax1 = tape.sub(cx, half_w)?;
    let ax2 = tape.add(cx, half_w)?;
    let ay1 = tape.sub(cy, half_h)?;
    let ay2 = tape.add(cy, half_h)?;
    let bx1 = tape.scalar(T::from_f64(gt[0] - gt[2] / 2.0));
    let bx2 = tape.scalar(T::from_f64(gt[0] + gt[2] / 2.0));
    let by1 = tape.scalar(T::from_f64(gt[1] - gt[3] / 2.0));
    let by2 = tape.scalar(T::from_f64(gt[1] + gt[3] / 2.0));

    let ix2 = tape.min_elem(ax2, bx2)?;
    let ix1 = tape.max_elem(ax1, bx1)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let iy2 = tape.min_elem(ay2, by2)?;
    let iy1 = tape.max_elem(ay1, by1)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;

    let area_a = tape.mul(w, h)?;
    let area_b = gt[2] * gt[3];
    let area_b = tape.scalar(T::from_f64(area_b));
    let union = tape.add(area_a, area_b)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;

    let cx2 = tape.max_elem(ax2, bx2)?;
    let cx1 = tape.min_elem(ax1, bx1)?;
    let cw = tape.sub(cx2, cx1)?;
    let cy2 = tape.max_elem(ay2, by2)?;
    let cy1 = tape.min_elem(ay1, by1)?;
    let ch = tape.sub(cy2, cy1)?;
    let area_c = tape.mul(cw, ch)?;
    let penalty_num = tape.sub(area_c, union)?;
    let penalty = tape.div(penalty_num, area_c)?;
    let giou = tape.sub(iou, penalty)?;
    let loss = tape.neg(giou);
    Ok(tape.add_scalar(loss, 1.0))
}

/// Mean absolute difference over the four normalized coordinates.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: [f64; 4]) -> Result<Var> {
    if tape.shape(pred) != [4] {
        return Err(Error::DimensionMismatch {
            op: "l1_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: vec![4],
        });
    }
    let gt = tape.constant(Tensor::from_f64_slice(&[4], &gt)?);
    let diff = tape.sub(pred, gt)?;
    let neg = tape.neg(diff);
    let pos_part = tape.relu(diff);
    let neg_part = tape.relu(neg);
    let abs = tape.add(pos_part, neg_part)?;
    Ok(tape.mean_all(abs))
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub cls: Var,
    pub giou: Var,
    pub l1: Var,
}

/// Eq-style weighted combination of the three scalar components.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    parts: LossParts,
    lambda_cls: f64,
    lambda_giou: f64,
    lambda_l1: f64,
) -> Result<Var> {
    let c = tape.mul_scalar(parts.cls, lambda_cls);
    let g = tape.mul_scalar(parts.giou, lambda_giou);
    let l = tape.mul_scalar(parts.l1, lambda_l1);
    let cg = tape.add(c, g)?;
    tape.add(cg, l)
}
