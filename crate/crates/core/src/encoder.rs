//! Patch embedding and the joint transformer encoder over the sequence
//! `[propagated token; template tokens; search tokens]`.
//!
//! The propagated token always sits at index 0 of the joint sequence. Three
//! independent learnable positional tables (token / template / search) are
//! added before the pre-norm blocks, so block indices never collide.

use rand::Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{LrGroup, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Per-frame partition of the encoder output.
#[derive(Clone, Debug)]
pub struct FrameTokens<T: Real> {
    /// Spatiotemporal token, `[1,D]`.
    pub st: Tensor<T>,
    /// Template tokens, `[N_z,D]`.
    pub z: Tensor<T>,
    /// Search tokens, `[N_x,D]`.
    pub x: Tensor<T>,
}

/// Tape-side version of [`FrameTokens`].
#[derive(Clone, Copy, Debug)]
pub struct FrameTokenVars {
    pub st: Var,
    pub z: Var,
    pub x: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderBlock {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let g = LrGroup::Encoder;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, g),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, g, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, g),
            fc1: Linear::new(
                store,
                &format!("{name}.mlp.fc1"),
                dim,
                dim * mlp_ratio,
                g,
                rng,
            ),
            fc2: Linear::new(
                store,
                &format!("{name}.mlp.fc2"),
                dim * mlp_ratio,
                dim,
                g,
                rng,
            ),
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n1 = self.norm1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, n1, n1, n1)?;
        let x = tape.add(x, a)?;
        let n2 = self.norm2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, n2)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub patch: Linear,
    pub pos_token: ParamId,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    /// Learnable stand-in used when no propagated token exists yet.
    pub init_token: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_z: usize,
    pub n_x: usize,
}

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &Config,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let patch = Linear::new(store, "encoder.patch", patch_dim, d, LrGroup::Encoder, rng);
        // Positional tables are zero-initialized and learned.
        let pos_token = store.add(
            "encoder.pos.token",
            Tensor::zeros(&[1, d]),
            true,
            LrGroup::Encoder,
        );
        let pos_template = store.add(
            "encoder.pos.template",
            Tensor::zeros(&[cfg.n_z(), d]),
            true,
            LrGroup::Encoder,
        );
        let pos_search = store.add(
            "encoder.pos.search",
            Tensor::zeros(&[cfg.n_x(), d]),
            true,
            LrGroup::Encoder,
        );
        let init_token = store.add(
            "encoder.init_token",
            Tensor::randn(&[1, d], 0.02, rng),
            true,
            LrGroup::Encoder,
        );
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            blocks.push(EncoderBlock::new(
                store,
                &format!("encoder.block{i}"),
                d,
                cfg.heads,
                cfg.mlp_ratio,
                rng,
            )?);
        }
        Ok(Self {
            patch,
            pos_token,
            pos_template,
            pos_search,
            init_token,
            blocks,
            patch_size: cfg.patch_size,
            embed_dim: d,
            n_z: cfg.n_z(),
            n_x: cfg.n_x(),
        })
    }

    /// Cut a standardized image `[3,H,W]` into non-overlapping patches in
    /// row-major patch order and project them to the embedding width.
    pub fn patch_embed<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
    ) -> Result<Var> {
        let patches = extract_patches(image, self.patch_size)?;
        let patches = tape.constant(patches);
        self.patch.forward(tape, store, patches)
    }

    /// Run the joint sequence through the encoder and split it back.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        st: Var,
        z: Var,
        x: Var,
    ) -> Result<FrameTokenVars> {
        let d = self.embed_dim;
        for (name, v, rows) in [
            ("token", st, 1),
            ("template", z, self.n_z),
            ("search", x, self.n_x),
        ] {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != d || s[0] != rows {
                return Err(Error::DimensionMismatch {
                    op: match name {
                        "token" => "encode token block",
                        "template" => "encode template block",
                        _ => "encode search block",
                    },
                    lhs: s.to_vec(),
                    rhs: vec![rows, d],
                });
            }
        }
        let pt = tape.param(store, self.pos_token);
        let pz = tape.param(store, self.pos_template);
        let px = tape.param(store, self.pos_search);
        let st = tape.add(st, pt)?;
        let z = tape.add(z, pz)?;
        let x = tape.add(x, px)?;
        let mut seq = tape.concat0(&[st, z, x])?;
        for block in &self.blocks {
            seq = block.forward(tape, store, seq)?;
        }
        Ok(FrameTokenVars {
            st: tape.slice0(seq, 0, 1)?,
            z: tape.slice0(seq, 1, self.n_z)?,
            x: tape.slice0(seq, 1 + self.n_z, self.n_x)?,
        })
    }
}

/// `[3,H,W] -> [(H/P)(W/P), 3P^2]`, patches in row-major grid order, each
/// patch flattened channel-major.
pub fn extract_patches<T: Real>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::DimensionMismatch {
            op: "extract_patches",
            lhs: s.to_vec(),
            rhs: vec![3, 0, 0],
        });
    }
    let (h, w) = (s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = 3 * patch * patch;
    let src = image.data();
    let mut out = vec![T::zero(); gh * gw * pd];
    for pi in 0..gh {
        for pj in 0..gw {
            let row = &mut out[(pi * gw + pj) * pd..(pi * gw + pj + 1) * pd];
            let mut idx = 0;
            for c in 0..3 {
                for u in 0..patch {
                    let y = pi * patch + u;
                    for v in 0..patch {
                        row[idx] = src[(c * h + y) * w + pj * patch + v];
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, pd], out)
}
