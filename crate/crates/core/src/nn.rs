//! Parameterized layers: thin structs of [`ParamId`] handles plus taped
//! forward functions. The data lives in the model's [`ParamStore`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{LrGroup, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `y = x W + b` with `W[in,out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: LrGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[in_dim, out_dim], 0.02, rng),
            true,
            group,
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros(&[out_dim]),
            true,
            group,
        );
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, group: LrGroup) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), true, group);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true, group);
        Self {
            gamma,
            beta,
            eps: LN_EPS,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Standard multi-head attention with separate query/key/value/output
/// projections. Query and key/value sequences may differ in length.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        group: LrGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "attention width {dim} not divisible by head count {heads}"
            )));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, group, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, group, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, group, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, group, rng),
            heads,
            dim,
        })
    }

    /// `q[Lq,D]`, `k[Lk,D]`, `v[Lk,D]` -> `[Lq,D]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Var> {
        let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
        if sq.len() != 2 || sq[1] != self.dim {
            return Err(Error::DimensionMismatch {
                op: "attention query",
                lhs: sq.to_vec(),
                rhs: vec![self.dim],
            });
        }
        if sk != sv {
            return Err(Error::DimensionMismatch {
                op: "attention key/value",
                lhs: sk.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qp = self.wq.forward(tape, store, q)?;
        let kp = self.wk.forward(tape, store, k)?;
        let vp = self.wv.forward(tape, store, v)?;
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(qp, h * dh, dh)?;
            let kh = tape.slice_cols(kp, h * dh, dh)?;
            let vh = tape.slice_cols(vp, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.mul_scalar(scores, scale);
            let attn = tape.softmax_rows(scaled)?;
            head_outputs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_outputs)?;
        self.wo.forward(tape, store, merged)
    }
}

/// Per-channel batch normalization over `[C,H,W]` maps with running
/// statistics kept as non-trainable buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        group: LrGroup,
    ) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::ones(&[channels]),
            true,
            group,
        );
        let beta = store.add(
            format!("{name}.beta"),
            Tensor::zeros(&[channels]),
            true,
            group,
        );
        let running_mean = store.add(
            format!("{name}.running_mean"),
            Tensor::zeros(&[channels]),
            false,
            group,
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            Tensor::ones(&[channels]),
            false,
            group,
        );
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        train: bool,
    ) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        if train {
            tape.batch_norm_train(
                x,
                gamma,
                beta,
                self.running_mean,
                self.running_var,
                store,
                self.eps,
                self.momentum,
            )
        } else {
            let rm = store.value(self.running_mean).clone();
            let rv = store.value(self.running_var).clone();
            tape.batch_norm_eval(x, gamma, beta, &rm, &rv, self.eps)
        }
    }
}
