//! Run configuration: a flat key=value file plus the seed fully determines
//! any generate/train/track run.

use std::path::Path;

use crate::error::{Error, Result};
use crate::memory::UpdatePolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct Config {
    // model geometry
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub search_size: usize,
    pub template_size: usize,
    pub mlp_ratio: usize,
    pub head_blocks: usize,
    pub fusion_residual: bool,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    // tracking
    pub search_factor: f64,
    pub template_factor: f64,
    pub memory_capacity: usize,
    pub memory_policy: UpdatePolicy,
    pub window: bool,
    // training
    pub clip_len: usize,
    pub max_interval: usize,
    pub reverse_prob: f64,
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub decay_start: f64,
    pub lambda_cls: f64,
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    pub target_sigma: f64,
    pub center_jitter: f64,
    pub scale_jitter_lo: f64,
    pub scale_jitter_hi: f64,
    pub detach_tokens: bool,
    pub grad_clip: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for Config {
    /// Desk-scale default: CPU-trainable in minutes.
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            search_size: 128,
            template_size: 64,
            mlp_ratio: 4,
            head_blocks: 4,
            fusion_residual: false,
            norm_mean: [0.5, 0.5, 0.5],
            norm_std: [0.5, 0.5, 0.5],
            search_factor: 4.0,
            template_factor: 2.0,
            memory_capacity: 6,
            memory_policy: UpdatePolicy::QualityBased,
            window: true,
            clip_len: 8,
            max_interval: 200,
            reverse_prob: 0.5,
            lr_encoder: 4e-5,
            lr_rest: 4e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 500,
            decay_start: 0.8,
            lambda_cls: 1.0,
            lambda_giou: 2.0,
            lambda_l1: 5.0,
            target_sigma: 1.0,
            center_jitter: 0.1,
            scale_jitter_lo: 0.8,
            scale_jitter_hi: 1.25,
            detach_tokens: false,
            grad_clip: 0.0,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl Config {
    /// Full-scale geometry (256/128 inputs, 16px patches, width 192, depth 12).
    /// Selectable but not the test default; too slow for CPU training.
    pub fn paper_scale() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 192,
            depth: 12,
            heads: 3,
            search_size: 256,
            template_size: 128,
            ..Self::default()
        }
    }

    pub fn n_z(&self) -> usize {
        (self.template_size / self.patch_size) * (self.template_size / self.patch_size)
    }

    pub fn n_x(&self) -> usize {
        (self.search_size / self.patch_size) * (self.search_size / self.patch_size)
    }

    /// Side of the head's square output grid.
    pub fn grid(&self) -> usize {
        self.search_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("patch_size must be positive"));
        }
        if !self.search_size.is_multiple_of(self.patch_size)
            || !self.template_size.is_multiple_of(self.patch_size)
        {
            return Err(Error::config(format!(
                "resolutions ({}, {}) must be divisible by patch size {}",
                self.search_size, self.template_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::config("embed_dim must be positive and even"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.grid() < 2 {
            return Err(Error::config("search grid must be at least 2x2"));
        }
        if self.memory_capacity == 0 {
            return Err(Error::config("memory_capacity must be at least 1"));
        }
        if self.clip_len == 0 {
            return Err(Error::config("clip_len must be at least 1"));
        }
        if self.search_factor <= 1.0 || self.template_factor <= 1.0 {
            return Err(Error::config("crop factors must exceed 1"));
        }
        if self.norm_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("norm_std entries must be positive"));
        }
        if !(self.lambda_cls > 0.0 || self.lambda_giou > 0.0 || self.lambda_l1 > 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_key_values(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(format!(
                    "config line {} is not key=value: '{raw}'",
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::format(format!("bad value '{value}' for key '{key}'")))
        }
        fn pb(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::format(format!(
                    "bad boolean '{value}' for key '{key}'"
                ))),
            }
        }
        match key {
            "patch_size" => self.patch_size = p(key, value)?,
            "embed_dim" => self.embed_dim = p(key, value)?,
            "depth" => self.depth = p(key, value)?,
            "heads" => self.heads = p(key, value)?,
            "search_size" => self.search_size = p(key, value)?,
            "template_size" => self.template_size = p(key, value)?,
            "mlp_ratio" => self.mlp_ratio = p(key, value)?,
            "head_blocks" => self.head_blocks = p(key, value)?,
            "fusion_residual" => self.fusion_residual = pb(key, value)?,
            "norm_mean" => self.norm_mean = parse_triple(key, value)?,
            "norm_std" => self.norm_std = parse_triple(key, value)?,
            "search_factor" => self.search_factor = p(key, value)?,
            "template_factor" => self.template_factor = p(key, value)?,
            "memory_capacity" | "capacity" => self.memory_capacity = p(key, value)?,
            "memory_policy" | "policy" => self.memory_policy = value.parse()?,
            "window" => self.window = pb(key, value)?,
            "clip_len" => self.clip_len = p(key, value)?,
            "max_interval" => self.max_interval = p(key, value)?,
            "reverse_prob" => self.reverse_prob = p(key, value)?,
            "lr_encoder" => self.lr_encoder = p(key, value)?,
            "lr_rest" => self.lr_rest = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "adam_eps" => self.adam_eps = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "decay_start" => self.decay_start = p(key, value)?,
            "lambda_cls" => self.lambda_cls = p(key, value)?,
            "lambda_giou" => self.lambda_giou = p(key, value)?,
            "lambda_l1" => self.lambda_l1 = p(key, value)?,
            "target_sigma" => self.target_sigma = p(key, value)?,
            "center_jitter" => self.center_jitter = p(key, value)?,
            "scale_jitter_lo" => self.scale_jitter_lo = p(key, value)?,
            "scale_jitter_hi" => self.scale_jitter_hi = p(key, value)?,
            "detach_tokens" => self.detach_tokens = pb(key, value)?,
            "grad_clip" => self.grad_clip = p(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" | "32" => Precision::F32,
                    "f64" | "64" => Precision::F64,
                    _ => return Err(Error::format(format!("bad precision '{value}'"))),
                }
            }
            "seed" => self.seed = p(key, value)?,
            "scale" => match value {
                "desk" => {
                    let seed = self.seed;
                    *self = Self::default();
                    self.seed = seed;
                }
                "paper" => {
                    let seed = self.seed;
                    *self = Self::paper_scale();
                    self.seed = seed;
                }
                _ => return Err(Error::format(format!("unknown scale preset '{value}'"))),
            },
            other => return Err(Error::format(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::format(format!(
            "key '{key}' wants three comma-separated values, got '{value}'"
        )));
    }
    let mut out = [0.0; 3];
    for (i, part) in parts.iter().enumerate() {
        out[i] = part
            .parse()
            .map_err(|_| Error::format(format!("bad value '{part}' for key '{key}'")))?;
    }
    Ok(out)
}
