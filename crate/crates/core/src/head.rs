//! Multi-scale prediction head.
//!
//! Training form: stacks of RepConv blocks, each running parallel 1x1 / 3x3
//! / 5x5 convolutions (pads 0/1/2 so the branches share spatial size),
//! summed elementwise, batch-normalized and ReLU-activated. Classification
//! and regression are separate towers ending in a 1x1 projection.
//!
//! Inference form: every block collapsed into a single 5x5 convolution by
//! zero-padding all kernels to 5x5, summing kernels and biases, and folding
//! the batch norm into the merged kernel and bias. The transform is exact.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, BN_EPS};
use crate::tensor::{LrGroup, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Score plus regression maps; all spatially aligned to the search grid.
#[derive(Clone, Debug)]
pub struct HeadOutput<T: Real> {
    /// `[H,W]`, sigmoid, strictly inside (0,1).
    pub score: Tensor<T>,
    /// `[2,H,W]` sub-cell center corrections in [0,1).
    pub offset: Tensor<T>,
    /// `[2,H,W]` normalized box extent in (0,1).
    pub size: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutputVars {
    pub score: Var,
    pub offset: Var,
    pub size: Var,
}

/// Three-branch trainable convolution block.
#[derive(Clone, Debug)]
pub struct RepConvBlock {
    pub k1: ParamId,
    pub b1: ParamId,
    pub k3: ParamId,
    pub b3: ParamId,
    pub k5: ParamId,
    pub b5: ParamId,
    pub bn: BatchNorm2d,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl RepConvBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let g = LrGroup::Other;
        let mut conv = |s: usize, tag: &str| {
            let std = (2.0 / (in_ch * s * s) as f64).sqrt();
            let k = store.add(
                format!("{name}.{tag}.kernel"),
                Tensor::randn(&[out_ch, in_ch, s, s], std, rng),
                true,
                g,
            );
            let b = store.add(
                format!("{name}.{tag}.bias"),
                Tensor::zeros(&[out_ch]),
                true,
                g,
            );
            (k, b)
        };
        let (k1, b1) = conv(1, "conv1");
        let (k3, b3) = conv(3, "conv3");
        let (k5, b5) = conv(5, "conv5");
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_ch, g);
        Self {
            k1,
            b1,
            k3,
            b3,
            k5,
            b5,
            bn,
            in_ch,
            out_ch,
        }
    }

    /// `ReLU(BN(conv1(x) + conv3(x) + conv5(x)))`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        train: bool,
    ) -> Result<Var> {
        let k1 = tape.param(store, self.k1);
        let b1 = tape.param(store, self.b1);
        let k3 = tape.param(store, self.k3);
        let b3 = tape.param(store, self.b3);
        let k5 = tape.param(store, self.k5);
        let b5 = tape.param(store, self.b5);
        let y1 = tape.conv2d(x, k1, b1, 0)?;
        let y3 = tape.conv2d(x, k3, b3, 1)?;
        let y5 = tape.conv2d(x, k5, b5, 2)?;
        let sum = tape.add(y1, y3)?;
        let sum = tape.add(sum, y5)?;
        let normed = self.bn.forward(tape, store, sum, train)?;
        Ok(tape.relu(normed))
    }
}

/// Inference-time equivalent of a [`RepConvBlock`]: one 5x5 convolution.
#[derive(Clone, Debug)]
pub struct MergedConvBlock {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl MergedConvBlock {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, k, b, 2)?;
        Ok(tape.relu(y))
    }
}

/// Final 1x1 projection of a tower (no norm, no activation).
#[derive(Clone, Debug)]
pub struct Projection {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Projection {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        bias_init: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / in_ch as f64).sqrt();
        let kernel = store.add(
            format!("{name}.kernel"),
            Tensor::randn(&[out_ch, in_ch, 1, 1], std, rng),
            true,
            LrGroup::Other,
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::full(&[out_ch], T::from_f64(bias_init)),
            true,
            LrGroup::Other,
        );
        Self { kernel, bias }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, k, b, 0)
    }
}

/// Channel plan: halve per block, floored at an eighth of the input width.
fn channel_plan(c_in: usize, blocks: usize) -> Vec<(usize, usize)> {
    let floor = (c_in / 8).max(1);
    let mut plan = Vec::with_capacity(blocks);
    let mut cur = c_in;
    for _ in 0..blocks {
        let next = (cur / 2).max(floor);
        plan.push((cur, next));
        cur = next;
    }
    plan
}

#[derive(Clone, Debug)]
pub struct Tower {
    pub blocks: Vec<RepConvBlock>,
    pub proj: Projection,
}

impl Tower {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        blocks: usize,
        out_ch: usize,
        proj_bias: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let plan = channel_plan(c_in, blocks);
        let blocks: Vec<RepConvBlock> = plan
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| {
                RepConvBlock::new(store, &format!("{name}.block{i}"), ci, co, rng)
            })
            .collect();
        let last = plan.last().map(|&(_, co)| co).unwrap_or(c_in);
        let proj = Projection::new(store, &format!("{name}.proj"), last, out_ch, proj_bias, rng);
        Self { blocks, proj }
    }

    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
        train: bool,
    ) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(tape, store, x, train)?;
        }
        self.proj.forward(tape, store, x)
    }
}

#[derive(Clone, Debug)]
pub struct MergedTower {
    pub blocks: Vec<MergedConvBlock>,
    pub proj: Projection,
}

impl MergedTower {
    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
    ) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(tape, store, x)?;
        }
        self.proj.forward(tape, store, x)
    }
}

/// Multi-branch training head: classification and regression towers.
#[derive(Clone, Debug)]
pub struct TrainHead {
    pub cls: Tower,
    pub reg: Tower,
}

impl TrainHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        c_in: usize,
        blocks: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // The classification projection bias starts low so early score maps
        // have a sparse-positive prior.
        let cls = Tower::new(store, "head.cls", c_in, blocks, 1, -2.19, rng);
        let reg = Tower::new(store, "head.reg", c_in, blocks, 4, 0.0, rng);
        Self { cls, reg }
    }
}

/// Single-branch inference head.
#[derive(Clone, Debug)]
pub struct MergedHead {
    pub cls: MergedTower,
    pub reg: MergedTower,
}

impl MergedHead {
    /// Register zero-valued merged tensors, to be filled by a weights file.
    pub fn new_uninit<T: Real>(store: &mut ParamStore<T>, c_in: usize, blocks: usize) -> Self {
        let mut tower = |name: &str, out_ch: usize| {
            let plan = channel_plan(c_in, blocks);
            let blocks: Vec<MergedConvBlock> = plan
                .iter()
                .enumerate()
                .map(|(i, &(ci, co))| MergedConvBlock {
                    kernel: store.add(
                        format!("{name}.block{i}.kernel"),
                        Tensor::zeros(&[co, ci, 5, 5]),
                        false,
                        LrGroup::Other,
                    ),
                    bias: store.add(
                        format!("{name}.block{i}.bias"),
                        Tensor::zeros(&[co]),
                        false,
                        LrGroup::Other,
                    ),
                    in_ch: ci,
                    out_ch: co,
                })
                .collect();
            let last = plan.last().map(|&(_, co)| co).unwrap_or(c_in);
            let proj = Projection {
                kernel: store.add(
                    format!("{name}.proj.kernel"),
                    Tensor::zeros(&[out_ch, last, 1, 1]),
                    false,
                    LrGroup::Other,
                ),
                bias: store.add(
                    format!("{name}.proj.bias"),
                    Tensor::zeros(&[out_ch]),
                    false,
                    LrGroup::Other,
                ),
            };
            MergedTower { blocks, proj }
        };
        let cls = tower("merged.head.cls", 1);
        let reg = tower("merged.head.reg", 4);
        Self { cls, reg }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Train(TrainHead),
    Merged(MergedHead),
}

impl Head {
    pub fn is_merged(&self) -> bool {
        matches!(self, Head::Merged(_))
    }

    /// `features[C,H,W]` -> sigmoid score `[H,W]`, offsets `[2,H,W]`,
    /// sizes `[2,H,W]`. All pads preserve the spatial size.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: Var,
        train: bool,
    ) -> Result<HeadOutputVars> {
        let s = tape.shape(features).to_vec();
        if s.len() != 3 {
            return Err(Error::DimensionMismatch {
                op: "head features",
                lhs: s,
                rhs: vec![],
            });
        }
        let (h, w) = (s[1], s[2]);
        let (cls_raw, reg_raw) = match self {
            Head::Train(head) => (
                head.cls.forward(tape, store, features, train)?,
                head.reg.forward(tape, store, features, train)?,
            ),
            Head::Merged(head) => (
                head.cls.forward(tape, store, features)?,
                head.reg.forward(tape, store, features)?,
            ),
        };
        let score = tape.sigmoid(cls_raw);
        let score = tape.reshape(score, &[h, w])?;
        let reg = tape.sigmoid(reg_raw);
        let reg = tape.reshape(reg, &[4, h * w])?;
        let offset = tape.slice0(reg, 0, 2)?;
        let offset = tape.reshape(offset, &[2, h, w])?;
        let size = tape.slice0(reg, 2, 2)?;
        let size = tape.reshape(size, &[2, h, w])?;
        Ok(HeadOutputVars {
            score,
            offset,
            size,
        })
    }
}

/// Search tokens `[N,D]` -> feature grid `[D,H,W]` (row-major patch order).
pub fn tokens_to_grid<T: Real>(tape: &mut Tape<T>, tokens: Var, grid: usize) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 2 || s[0] != grid * grid {
        return Err(Error::DimensionMismatch {
            op: "tokens_to_grid",
            lhs: s,
            rhs: vec![grid * grid, 0],
        });
    }
    let t = tape.transpose2d(tokens)?;
    tape.reshape(t, &[s[1], grid, grid])
}

// ── Re-parameterization ────────────────────────────────────────────

/// Zero-pad a `[Cout,Cin,s,s]` kernel (s in {1,3,5}) to `[Cout,Cin,5,5]`
/// with the source centered. A 5x5 kernel passes through unchanged.
pub fn pad_kernel<T: Real>(kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let s = kernel.shape();
    if s.len() != 4 || s[2] != s[3] || !matches!(s[2], 1 | 3 | 5) {
        return Err(Error::UnsupportedKernel(if s.len() == 4 {
            s[2]
        } else {
            0
        }));
    }
    let k = s[2];
    if k == 5 {
        return Ok(kernel.clone());
    }
    let (cout, cin) = (s[0], s[1]);
    let off = (5 - k) / 2;
    let mut out = Tensor::zeros(&[cout, cin, 5, 5]);
    for co in 0..cout {
        for ci in 0..cin {
            for u in 0..k {
                for v in 0..k {
                    let src = ((co * cin + ci) * k + u) * k + v;
                    let dst = ((co * cin + ci) * 5 + u + off) * 5 + v + off;
                    out.data_mut()[dst] = kernel.data()[src];
                }
            }
        }
    }
    Ok(out)
}

/// Sum the zero-padded branch kernels and the branch biases.
pub fn merge_branches<T: Real>(
    store: &ParamStore<T>,
    block: &RepConvBlock,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let k1 = pad_kernel(store.value(block.k1))?;
    let k3 = pad_kernel(store.value(block.k3))?;
    let k5 = pad_kernel(store.value(block.k5))?;
    let kernel = k1.zip_map(&k3, |a, b| a + b)?.zip_map(&k5, |a, b| a + b)?;
    let bias = store
        .value(block.b1)
        .zip_map(store.value(block.b3), |a, b| a + b)?
        .zip_map(store.value(block.b5), |a, b| a + b)?;
    Ok((kernel, bias))
}

/// Fold batch-norm statistics into a convolution:
/// `k' = gamma/sqrt(var+eps) * k`, `b' = beta + gamma*(b-mean)/sqrt(var+eps)`.
pub fn fold_bn<T: Real>(
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let cout = kernel.shape()[0];
    let per_out: usize = kernel.shape()[1..].iter().product();
    let epst = T::from_f64(eps);
    let mut folded_k = kernel.clone();
    let mut folded_b = Tensor::zeros(&[cout]);
    for co in 0..cout {
        let denom = var.data()[co] + epst;
        if denom <= T::zero() {
            return Err(Error::contract(format!(
                "variance plus eps must stay positive, got {denom} on channel {co}"
            )));
        }
        let scale = gamma.data()[co] / denom.sqrt();
        for i in 0..per_out {
            let idx = co * per_out + i;
            folded_k.data_mut()[idx] = folded_k.data()[idx] * scale;
        }
        folded_b.data_mut()[co] = beta.data()[co] + scale * (bias.data()[co] - mean.data()[co]);
    }
    Ok((folded_k, folded_b))
}

/// Collapse one training block into its merged kernel and bias using the
/// block's running statistics.
pub fn reparameterize_block<T: Real>(
    store: &ParamStore<T>,
    block: &RepConvBlock,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (kernel, bias) = merge_branches(store, block)?;
    fold_bn(
        &kernel,
        &bias,
        store.value(block.bn.gamma),
        store.value(block.bn.beta),
        store.value(block.bn.running_mean),
        store.value(block.bn.running_var),
        BN_EPS,
    )
}

fn merge_tower<T: Real>(
    src: &ParamStore<T>,
    tower: &Tower,
    dst: &mut ParamStore<T>,
    name: &str,
) -> Result<MergedTower> {
    let mut blocks = Vec::with_capacity(tower.blocks.len());
    for (i, block) in tower.blocks.iter().enumerate() {
        let (kernel, bias) = reparameterize_block(src, block)?;
        let kid = dst.add(
            format!("{name}.block{i}.kernel"),
            kernel,
            false,
            LrGroup::Other,
        );
        let bid = dst.add(format!("{name}.block{i}.bias"), bias, false, LrGroup::Other);
        blocks.push(MergedConvBlock {
            kernel: kid,
            bias: bid,
            in_ch: block.in_ch,
            out_ch: block.out_ch,
        });
    }
    let proj = Projection {
        kernel: dst.add(
            format!("{name}.proj.kernel"),
            src.value(tower.proj.kernel).clone(),
            false,
            LrGroup::Other,
        ),
        bias: dst.add(
            format!("{name}.proj.bias"),
            src.value(tower.proj.bias).clone(),
            false,
            LrGroup::Other,
        ),
    };
    Ok(MergedTower { blocks, proj })
}

/// Build the merged-form head inside `dst`, computing every merged kernel
/// from the training-form parameters in `src`. Merged tensor names carry
/// the `merged.` prefix so weight files are self-describing.
pub fn reparameterize<T: Real>(
    src: &ParamStore<T>,
    head: &TrainHead,
    dst: &mut ParamStore<T>,
) -> Result<MergedHead> {
    Ok(MergedHead {
        cls: merge_tower(src, &head.cls, dst, "merged.head.cls")?,
        reg: merge_tower(src, &head.reg, dst, "merged.head.reg")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_plan_halves_with_floor() {
        assert_eq!(
            channel_plan(64, 4),
            vec![(64, 32), (32, 16), (16, 8), (8, 8)]
        );
        assert_eq!(channel_plan(16, 4), vec![(16, 8), (8, 4), (4, 2), (2, 2)]);
    }

    #[test]
    fn pad_kernel_centers_one_by_one() {
        let k = Tensor::<f64>::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        let padded = pad_kernel(&k).unwrap();
        assert_eq!(padded.shape(), &[1, 1, 5, 5]);
        for (i, &v) in padded.data().iter().enumerate() {
            if i == 12 {
                assert_eq!(v, 5.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn pad_kernel_passes_five_by_five_through() {
        let k = Tensor::<f64>::new(vec![1, 1, 5, 5], (0..25).map(|i| i as f64).collect()).unwrap();
        let padded = pad_kernel(&k).unwrap();
        assert_eq!(padded, k);
    }

    #[test]
    fn pad_kernel_rejects_even_sizes() {
        let k = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(pad_kernel(&k).is_err());
    }

    #[test]
    fn fold_bn_identity_leaves_conv_untouched() {
        let k = Tensor::<f64>::new(vec![1, 1, 3, 3], (0..9).map(|i| i as f64).collect()).unwrap();
        let b = Tensor::<f64>::new(vec![1], vec![0.25]).unwrap();
        let ones = Tensor::<f64>::ones(&[1]);
        let zeros = Tensor::<f64>::zeros(&[1]);
        let (fk, fb) = fold_bn(&k, &b, &ones, &zeros, &zeros, &ones, 0.0).unwrap();
        assert_eq!(fk, k);
        assert_eq!(fb, b);
    }

    #[test]
    fn fold_bn_two_over_sqrt_four_is_unit_scale() {
        let k = Tensor::<f64>::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        let gamma = Tensor::<f64>::new(vec![1], vec![2.0]).unwrap();
        let beta = Tensor::<f64>::zeros(&[1]);
        let mean = Tensor::<f64>::zeros(&[1]);
        let var = Tensor::<f64>::new(vec![1], vec![4.0]).unwrap();
        let (fk, _) = fold_bn(&k, &b, &gamma, &beta, &mean, &var, 0.0).unwrap();
        assert_eq!(fk.data()[0], 3.0);
    }

    #[test]
    fn fold_bn_rejects_nonpositive_variance() {
        let k = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        let b = Tensor::<f64>::zeros(&[1]);
        let ones = Tensor::<f64>::ones(&[1]);
        let zeros = Tensor::<f64>::zeros(&[1]);
        let var = Tensor::<f64>::new(vec![1], vec![-2.0]).unwrap();
        assert!(fold_bn(&k, &b, &ones, &zeros, &zeros, &var, 0.0).is_err());
    }
}
