//! Dense video-clip sampling: a template frame followed by an ordered run
//! of search frames with bounded random gaps, reversed as augmentation with
//! probability 0.5.

use rand::Rng;

/// Indices into a sequence; `search` is ordered as the clip will be trained.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipSample {
    pub template: usize,
    pub search: Vec<usize>,
    pub reversed: bool,
}

/// Sample a clip of `clip_len` search frames from a sequence of `seq_len`
/// frames. Returns `None` (skip signal) when the sequence is too short.
/// Gaps between consecutive sampled frames are uniform in
/// `[1, min(max_interval, feasible)]`.
pub fn sample_clip(
    seq_len: usize,
    clip_len: usize,
    max_interval: usize,
    reverse_prob: f64,
    rng: &mut impl Rng,
) -> Option<ClipSample> {
    if clip_len == 0 || seq_len < clip_len + 1 {
        return None;
    }
    let max_interval = max_interval.max(1);
    // template start leaving room for clip_len more frames
    let template = rng.gen_range(0..seq_len - clip_len);
    let mut search = Vec::with_capacity(clip_len);
    let mut pos = template;
    for k in 0..clip_len {
        let remaining_after = clip_len - 1 - k;
        // keep enough room so every later frame can still advance by >= 1
        let budget = seq_len - 1 - pos - remaining_after;
        debug_assert!(budget >= 1);
        let gap = rng.gen_range(1..=max_interval.min(budget));
        pos += gap;
        search.push(pos);
    }
    let reversed = rng.gen_bool(reverse_prob.clamp(0.0, 1.0));
    if reversed {
        search.reverse();
    }
    Some(ClipSample {
        template,
        search,
        reversed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn length_two_sequence_gives_the_only_valid_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = sample_clip(2, 1, 200, 0.0, &mut rng).unwrap();
        assert_eq!(clip.template, 0);
        assert_eq!(clip.search, vec![1]);
    }

    #[test]
    fn too_short_sequence_signals_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_clip(4, 8, 200, 0.5, &mut rng).is_none());
        assert!(sample_clip(8, 8, 200, 0.5, &mut rng).is_none());
        assert!(sample_clip(9, 8, 200, 0.5, &mut rng).is_some());
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(77);
        let mut b = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            assert_eq!(
                sample_clip(500, 8, 200, 0.5, &mut a),
                sample_clip(500, 8, 200, 0.5, &mut b)
            );
        }
    }

    #[test]
    fn reversal_frequency_and_gap_bounds_over_many_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut reversed = 0usize;
        for _ in 0..n {
            let clip = sample_clip(5000, 8, 200, 0.5, &mut rng).unwrap();
            if clip.reversed {
                reversed += 1;
            }
            let mut ordered = clip.search.clone();
            if clip.reversed {
                ordered.reverse();
            }
            let mut prev = clip.template;
            for &f in &ordered {
                let gap = f - prev;
                assert!((1..=200).contains(&gap), "gap {gap}");
                prev = f;
            }
            assert!(*ordered.last().unwrap() < 5000);
        }
        let freq = reversed as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "reversal frequency {freq}");
    }

    #[test]
    fn reversal_is_a_pure_reordering() {
        // the reversed index list must be a permutation of the forward one
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let clip = sample_clip(100, 6, 10, 1.0, &mut rng).unwrap();
            assert!(clip.reversed);
            let mut sorted = clip.search.clone();
            sorted.sort_unstable();
            let mut restored = clip.search.clone();
            restored.reverse();
            assert_eq!(restored, sorted);
        }
    }
}
