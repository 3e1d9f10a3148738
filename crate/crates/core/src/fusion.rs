//! Single-layer fusion of the current target token with stored history:
//! sinusoidal positions, layer norm, one self-attention pass over the whole
//! stack, another norm, then one cross-attention pass with the current
//! token as the sole query, and a final norm. No residual paths and no
//! feed-forward sublayer; an optional residual variant exists for ablation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, MultiHeadAttention};
use crate::tensor::{LrGroup, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct FusionModule {
    pub norm_in: LayerNorm,
    pub msa: MultiHeadAttention,
    pub norm_mid: LayerNorm,
    pub mca: MultiHeadAttention,
    pub norm_out: LayerNorm,
    pub dim: usize,
    /// Ablation switch; the default form has no residual connections.
    pub residual: bool,
}

impl FusionModule {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        dim: usize,
        heads: usize,
        residual: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let g = LrGroup::Other;
        Ok(Self {
            norm_in: LayerNorm::new(store, "fusion.norm_in", dim, g),
            msa: MultiHeadAttention::new(store, "fusion.msa", dim, heads, g, rng)?,
            norm_mid: LayerNorm::new(store, "fusion.norm_mid", dim, g),
            mca: MultiHeadAttention::new(store, "fusion.mca", dim, heads, g, rng)?,
            norm_out: LayerNorm::new(store, "fusion.norm_out", dim, g),
            dim,
            residual,
        })
    }

    /// Enhance the current token with the stored history (oldest first).
    /// History token k steps back sits at stack position M-k; the current
    /// token takes the largest position M.
    pub fn fuse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        history: &[Var],
        current: Var,
    ) -> Result<Var> {
        self.fuse_with_positional(tape, store, history, current, true)
    }

    /// [`FusionModule::fuse`] with the positional table optionally zeroed,
    /// for permutation-invariance checks.
    pub fn fuse_with_positional<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        history: &[Var],
        current: Var,
        positional: bool,
    ) -> Result<Var> {
        let cs = tape.shape(current);
        if cs.len() != 2 || cs[0] != 1 || cs[1] != self.dim {
            return Err(Error::DimensionMismatch {
                op: "fuse current token",
                lhs: cs.to_vec(),
                rhs: vec![1, self.dim],
            });
        }
        let m = history.len();
        let stack = if m == 0 {
            current
        } else {
            let mut parts: Vec<Var> = history.to_vec();
            parts.push(current);
            tape.concat0(&parts)?
        };
        let stack = if positional {
            let pe = tape.constant(sinusoidal_encoding::<T>(m + 1, self.dim)?);
            tape.add(stack, pe)?
        } else {
            stack
        };
        let f_in = self.norm_in.forward(tape, store, stack)?;
        let mut attn = self.msa.forward(tape, store, f_in, f_in, f_in)?;
        if self.residual {
            attn = tape.add(attn, f_in)?;
        }
        let enhanced = self.norm_mid.forward(tape, store, attn)?;
        let query = tape.slice0(enhanced, m, 1)?;
        let mut cross = self.mca.forward(tape, store, query, enhanced, enhanced)?;
        if self.residual {
            cross = tape.add(cross, query)?;
        }
        self.norm_out.forward(tape, store, cross)
    }
}

/// Sinusoidal positional table: `pe[p,2i] = sin(p / 10000^(2i/D))`,
/// `pe[p,2i+1] = cos(p / 10000^(2i/D))`.
pub fn sinusoidal_encoding<T: Real>(length: usize, dim: usize) -> Result<Tensor<T>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::config(format!(
            "sinusoidal encoding needs an even width, got {dim}"
        )));
    }
    let mut data = vec![T::zero(); length * dim];
    for p in 0..length {
        for i in 0..dim / 2 {
            let rate = (p as f64) / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[p * dim + 2 * i] = T::from_f64(rate.sin());
            data[p * dim + 2 * i + 1] = T::from_f64(rate.cos());
        }
    }
    Tensor::new(vec![length, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_alternates_zero_one() {
        let pe = sinusoidal_encoding::<f64>(3, 8).unwrap();
        for i in 0..4 {
            assert_eq!(pe.data()[2 * i], 0.0);
            assert_eq!(pe.data()[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn values_stay_in_unit_range() {
        let pe = sinusoidal_encoding::<f64>(64, 32).unwrap();
        assert!(pe.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn first_position_first_channel_is_sin_one() {
        let pe = sinusoidal_encoding::<f64>(2, 16).unwrap();
        assert!((pe.data()[16] - 0.8414709848).abs() < 1e-9);
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(sinusoidal_encoding::<f32>(4, 7).is_err());
    }
}
