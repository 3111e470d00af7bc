//! Multi-scale convolutional attention and the encoder block that wraps it.
//!
//! The attention map is a 1x1 channel mix over the sum of a local depthwise
//! response and three strip-convolution branches computed from it; the block
//! output reweighs the attention input by that map elementwise.

use rand::Rng;

use crate::error::TensorError;
use crate::nn::{drop_path, BatchNorm2d, Conv2d, Ctx, Init, ParamStore, LAYER_SCALE_INIT};
use crate::tensor::{ConvSpec, ParamId, Real, Shape, Tensor, Var};

/// Kernel size of the local depthwise aggregation.
pub const LOCAL_KERNEL: usize = 5;
/// Strip-pair lengths of the multi-scale branches.
pub const BRANCH_KERNELS: [usize; 3] = [7, 11, 21];
/// Strip length used by the single-branch ablation.
pub const LARGE_KERNEL: usize = 21;

/// Which attention the block uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    /// Identity plus 7/11/21 strip branches.
    MultiScale,
    /// A single 21-long strip pair, no identity sum.
    LargeKernel,
}

/// A depthwise `(1, k)` then `(k, 1)` pair.
#[derive(Clone, Debug)]
pub struct StripPair {
    pub horizontal: Conv2d,
    pub vertical: Conv2d,
}

impl StripPair {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, channels: usize, k: usize) -> Self {
        StripPair {
            horizontal: Conv2d::new(store, rng, &format!("{name}_1"), ConvSpec::depthwise(channels, (1, k))),
            vertical: Conv2d::new(store, rng, &format!("{name}_2"), ConvSpec::depthwise(channels, (k, 1))),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>, TensorError> {
        let h = self.horizontal.forward(cx, x)?;
        self.vertical.forward(cx, &h)
    }

    pub fn kernel(&self) -> usize {
        self.horizontal.spec.kernel.1
    }
}

/// Learnable parts of one attention unit: local depthwise conv, strip
/// branches, and the channel mix that yields the attention map.
#[derive(Clone, Debug)]
pub struct Msca {
    pub channels: usize,
    pub kind: AttentionKind,
    pub local: Conv2d,
    pub branches: Vec<StripPair>,
    pub channel_mix: Conv2d,
}

impl Msca {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, channels: usize, kind: AttentionKind) -> Self {
        let local = Conv2d::new(store, rng, &format!("{name}.local"), ConvSpec::depthwise(channels, (LOCAL_KERNEL, LOCAL_KERNEL)));
        let kernels: &[usize] = match kind {
            AttentionKind::MultiScale => &BRANCH_KERNELS,
            AttentionKind::LargeKernel => &[LARGE_KERNEL],
        };
        let branches = kernels
            .iter()
            .map(|&k| StripPair::new(store, rng, &format!("{name}.branch{k}"), channels, k))
            .collect();
        let channel_mix = Conv2d::new(store, rng, &format!("{name}.channel_mix"), ConvSpec::pointwise(channels, channels));
        Msca { channels, kind, local, branches, channel_mix }
    }

    /// The attention map before it reweighs the input.
    pub fn attention<T: Real>(&self, cx: &mut Ctx<T>, f: &Var<T>) -> Result<Var<T>, TensorError> {
        if f.shape().c != self.channels {
            return Err(TensorError::shape("msca", "channels", self.channels, f.shape().c));
        }
        let base = self.local.forward(cx, f)?;
        let mixed_in = match self.kind {
            AttentionKind::MultiScale => {
                let mut acc = base.clone();
                for branch in &self.branches {
                    let b = branch.forward(cx, &base)?;
                    acc = cx.tape.add(&acc, &b)?;
                }
                acc
            }
            AttentionKind::LargeKernel => self.branches[0].forward(cx, &base)?,
        };
        self.channel_mix.forward(cx, &mixed_in)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, f: &Var<T>) -> Result<Var<T>, TensorError> {
        let att = self.attention(cx, f)?;
        cx.tape.mul(&att, f)
    }
}

/// Pre-norm residual block: attention sub-block, then a convolutional FFN,
/// each scaled per channel before the residual add.
#[derive(Clone, Debug)]
pub struct Block {
    pub channels: usize,
    pub expansion: usize,
    pub drop_path: f64,
    pub norm1: BatchNorm2d,
    pub proj_in: Conv2d,
    pub msca: Msca,
    pub proj_out: Conv2d,
    pub layer_scale1: ParamId,
    pub norm2: BatchNorm2d,
    pub fc1: Conv2d,
    pub dwconv: Conv2d,
    pub fc2: Conv2d,
    pub layer_scale2: ParamId,
}

impl Block {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        expansion: usize,
        kind: AttentionKind,
        drop_path: f64,
    ) -> Self {
        let hidden = channels * expansion;
        let norm1 = BatchNorm2d::new(store, &format!("{name}.norm1"), channels);
        let proj_in = Conv2d::new(store, rng, &format!("{name}.attn.proj_in"), ConvSpec::pointwise(channels, channels));
        let msca = Msca::new(store, rng, &format!("{name}.attn.msca"), channels, kind);
        let proj_out = Conv2d::new(store, rng, &format!("{name}.attn.proj_out"), ConvSpec::pointwise(channels, channels));
        let ls = |store: &mut ParamStore<T>, rng: &mut _, n: &str| {
            store.add(format!("{name}.{n}"), Init::Const(LAYER_SCALE_INIT).sample(Shape::channels(channels), 1, rng), false)
        };
        let layer_scale1 = ls(store, rng, "layer_scale1");
        let norm2 = BatchNorm2d::new(store, &format!("{name}.norm2"), channels);
        let fc1 = Conv2d::new(store, rng, &format!("{name}.ffn.fc1"), ConvSpec::pointwise(channels, hidden));
        let dwconv = Conv2d::new(store, rng, &format!("{name}.ffn.dwconv"), ConvSpec::depthwise(hidden, (3, 3)));
        let fc2 = Conv2d::new(store, rng, &format!("{name}.ffn.fc2"), ConvSpec::pointwise(hidden, channels));
        let layer_scale2 = ls(store, rng, "layer_scale2");
        Block {
            channels,
            expansion,
            drop_path,
            norm1,
            proj_in,
            msca,
            proj_out,
            layer_scale1,
            norm2,
            fc1,
            dwconv,
            fc2,
            layer_scale2,
        }
    }

    /// `proj_out(msca(gelu(proj_in(norm1(x)))))`, before layer scale.
    pub fn attention_branch<T: Real>(&self, cx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>, TensorError> {
        let h = self.norm1.forward(cx, x)?;
        let h = self.proj_in.forward(cx, &h)?;
        let h = cx.tape.gelu(&h)?;
        let h = self.msca.forward(cx, &h)?;
        self.proj_out.forward(cx, &h)
    }

    /// `fc2(gelu(dwconv(fc1(norm2(x)))))`, before layer scale.
    pub fn ffn_branch<T: Real>(&self, cx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>, TensorError> {
        let h = self.norm2.forward(cx, x)?;
        let h = self.fc1.forward(cx, &h)?;
        let h = self.dwconv.forward(cx, &h)?;
        let h = cx.tape.gelu(&h)?;
        self.fc2.forward(cx, &h)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>, TensorError> {
        if x.shape().c != self.channels {
            return Err(TensorError::shape("block", "channels", self.channels, x.shape().c));
        }
        let a = self.attention_branch(cx, x)?;
        let s1 = cx.param(self.layer_scale1);
        let a = cx.tape.channel_scale(&a, &s1)?;
        let a = drop_path(cx, &a, self.drop_path)?;
        let x1 = cx.tape.add(x, &a)?;

        let f = self.ffn_branch(cx, &x1)?;
        let s2 = cx.param(self.layer_scale2);
        let f = cx.tape.channel_scale(&f, &s2)?;
        let f = drop_path(cx, &f, self.drop_path)?;
        cx.tape.add(&x1, &f)
    }
}

/// Overwrites a depthwise kernel with a centred delta (an identity map).
pub fn set_delta_kernel<T: Real>(store: &mut ParamStore<T>, conv: &Conv2d) {
    let (kh, kw) = conv.spec.kernel;
    *store.get_mut(conv.weight) =
        Tensor::from_fn(conv.spec.weight_shape(), |[_, _, i, j]| if i == kh / 2 && j == kw / 2 { T::one() } else { T::zero() });
    if let Some(b) = conv.bias {
        *store.get_mut(b) = Tensor::zeros(Shape::channels(conv.spec.out_channels));
    }
}

/// Overwrites a pointwise conv with `scale * identity` (zero bias).
pub fn set_scaled_identity<T: Real>(store: &mut ParamStore<T>, conv: &Conv2d, scale: T) {
    *store.get_mut(conv.weight) =
        Tensor::from_fn(conv.spec.weight_shape(), |[o, i, _, _]| if o == i { scale } else { T::zero() });
    if let Some(b) = conv.bias {
        *store.get_mut(b) = Tensor::zeros(Shape::channels(conv.spec.out_channels));
    }
}

/// Zeroes a conv's weight and bias.
pub fn zero_conv<T: Real>(store: &mut ParamStore<T>, conv: &Conv2d) {
    *store.get_mut(conv.weight) = Tensor::zeros(conv.spec.weight_shape());
    if let Some(b) = conv.bias {
        *store.get_mut(b) = Tensor::zeros(Shape::channels(conv.spec.out_channels));
    }
}
