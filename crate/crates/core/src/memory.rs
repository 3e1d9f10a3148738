//! Fixed-capacity store of propagated target tokens with per-entry quality
//! scores and one of two eviction policies.
//!
//! Quality of a frame is the peak-to-mass ratio of its classification score
//! map: `max(score) / sum(score)`. Under the quality policy a newly produced
//! token is always recorded; when the store is full the lowest-quality token
//! among the previously stored ones is pruned. FIFO prunes the oldest.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdatePolicy {
    QualityBased,
    Fifo,
}

impl std::str::FromStr for UpdatePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quality" | "quality-based" => Ok(UpdatePolicy::QualityBased),
            "fifo" | "first-in-first-out" => Ok(UpdatePolicy::Fifo),
            other => Err(Error::config(format!("unknown update policy '{other}'"))),
        }
    }
}

impl std::fmt::Display for UpdatePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UpdatePolicy::QualityBased => write!(f, "quality"),
            UpdatePolicy::Fifo => write!(f, "fifo"),
        }
    }
}

/// A stored token with its quality score and originating frame index.
/// The payload is generic: tensors during tracking, tape vars during
/// training (so stored tokens keep their gradient linkage within a clip).
#[derive(Clone, Debug)]
pub struct MemoryEntry<P> {
    pub token: P,
    pub quality: f64,
    pub frame: u64,
}

#[derive(Clone, Debug)]
pub struct TokenMemory<P> {
    capacity: usize,
    policy: UpdatePolicy,
    entries: Vec<MemoryEntry<P>>,
}

impl<P> TokenMemory<P> {
    pub fn new(capacity: usize, policy: UpdatePolicy) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("memory capacity must be at least 1"));
        }
        Ok(Self {
            capacity,
            policy,
            entries: Vec::with_capacity(capacity + 1),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> UpdatePolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry<P>] {
        &self.entries
    }

    /// Record a new token. Frame indices must be strictly increasing.
    pub fn insert(&mut self, entry: MemoryEntry<P>) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.frame <= last.frame {
                return Err(Error::contract(format!(
                    "memory frame indices must increase: got {} after {}",
                    entry.frame, last.frame
                )));
            }
        }
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return Ok(());
        }
        match self.policy {
            UpdatePolicy::QualityBased => {
                // The new token is always retained; the minimum-quality token
                // among the previously stored ones is pruned. Ties evict the
                // oldest of the tied entries.
                let mut min_idx = 0usize;
                for (i, e) in self.entries.iter().enumerate() {
                    if e.quality < self.entries[min_idx].quality {
                        min_idx = i;
                    }
                }
                self.entries.push(entry);
                self.entries.remove(min_idx);
            }
            UpdatePolicy::Fifo => {
                self.entries.push(entry);
                self.entries.remove(0);
            }
        }
        Ok(())
    }

    /// Stored tokens ordered oldest first (ascending frame index).
    pub fn snapshot(&self) -> Vec<&P> {
        // Entries are kept in insertion order and frames only increase,
        // so the vector is already frame-sorted.
        self.entries.iter().map(|e| &e.token).collect()
    }

    pub fn frames(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.frame).collect()
    }

    pub fn qualities(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.quality).collect()
    }

    /// Empty the store, preserving capacity and policy.
    pub fn reset(&mut self) {
        self.entries.clear();
    }
}

/// Peak-to-mass saliency of a score map: `max / sum`, accumulated in f64.
/// All map values must be positive (the head's sigmoid guarantees this).
pub fn quality<T: Real>(score_map: &Tensor<T>) -> Result<f64> {
    if score_map.numel() == 0 {
        return Err(Error::contract("quality of an empty score map"));
    }
    let sum = score_map.sum_f64();
    if sum <= 0.0 {
        return Err(Error::contract(format!(
            "score map sum must be positive, got {sum}; was the sigmoid bypassed?"
        )));
    }
    Ok(score_map.max_value().as_f64() / sum)
}
