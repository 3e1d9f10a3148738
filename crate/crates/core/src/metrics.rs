//! Overlap-based evaluation: average overlap (mean IoU) and success rates
//! at 0.5 and 0.75, with the initialization frame excluded.

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    /// Number of evaluated frames (excludes the initialization frame).
    pub frames: usize,
}

/// Compare tracked boxes against groundtruth of equal length. Frame 1 is
/// the initialization frame and is excluded from the metrics.
pub fn evaluate(results: &[BBox], groundtruth: &[BBox]) -> Result<EvalReport> {
    if results.len() != groundtruth.len() {
        return Err(Error::contract(format!(
            "results ({}) and groundtruth ({}) lengths differ",
            results.len(),
            groundtruth.len()
        )));
    }
    if results.len() < 2 {
        return Err(Error::contract(
            "need at least two frames to evaluate (frame 1 is initialization)",
        ));
    }
    let mut sum = 0.0;
    let mut over50 = 0usize;
    let mut over75 = 0usize;
    let n = results.len() - 1;
    for (r, g) in results.iter().zip(groundtruth).skip(1) {
        let v = iou(r, g);
        sum += v;
        if v > 0.5 {
            over50 += 1;
        }
        if v > 0.75 {
            over75 += 1;
        }
    }
    Ok(EvalReport {
        ao: sum / n as f64,
        sr50: over50 as f64 / n as f64,
        sr75: over75 as f64 / n as f64,
        frames: n,
    })
}

#[derive(Clone, Debug)]
pub struct SequenceEval {
    pub name: String,
    pub report: EvalReport,
}

/// Equal-weight mean over sequences.
pub fn summarize(per_sequence: &[SequenceEval]) -> Result<EvalReport> {
    if per_sequence.is_empty() {
        return Err(Error::contract("no sequences to summarize"));
    }
    let n = per_sequence.len() as f64;
    Ok(EvalReport {
        ao: per_sequence.iter().map(|s| s.report.ao).sum::<f64>() / n,
        sr50: per_sequence.iter().map(|s| s.report.sr50).sum::<f64>() / n,
        sr75: per_sequence.iter().map(|s| s.report.sr75).sum::<f64>() / n,
        frames: per_sequence.iter().map(|s| s.report.frames).sum(),
    })
}
