//! Segmentation heads on top of the encoder features.

use rand::Rng;

use crate::encoder::EncoderFeatures;
use crate::error::TensorError;
use crate::model::{DecoderKind, ModelConfig};
use crate::nmf::nmf_on_tape;
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Init, ParamStore};
use crate::tensor::{ConvSpec, Real, Shape, Var};

fn resize_to<T: Real>(cx: &mut Ctx<T>, x: &Var<T>, (h, w): (usize, usize)) -> Result<Var<T>, TensorError> {
    let s = x.shape();
    if (s.h, s.w) == (h, w) {
        return Ok(x.clone());
    }
    cx.tape.resize(x, h, w, false)
}

/// Resizes the selected maps to the grid of the first one and concatenates.
fn aggregate<T: Real>(cx: &mut Ctx<T>, maps: &[&Var<T>]) -> Result<Var<T>, TensorError> {
    let n = maps[0].shape().n;
    if let Some(m) = maps.iter().find(|m| m.shape().n != n) {
        return Err(TensorError::shape("decoder", "batch", n, m.shape().n));
    }
    let grid = (maps[0].shape().h, maps[0].shape().w);
    let resized = maps.iter().map(|m| resize_to(cx, m, grid)).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Var<T>> = resized.iter().collect();
    cx.tape.concat(&refs)
}

/// Per-stage projections, fused at stride 4.
#[derive(Clone, Debug)]
pub struct MlpDecoder {
    pub proj: Vec<Conv2d>,
    pub fuse: Conv2d,
    pub fuse_norm: BatchNorm2d,
    pub classifier: Conv2d,
}

impl MlpDecoder {
    fn build<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let d = cfg.decoder_dim;
        let proj = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| Conv2d::new(store, rng, &format!("decoder.proj{}", i + 1), ConvSpec::pointwise(s.channels, d)))
            .collect();
        MlpDecoder {
            proj,
            fuse: Conv2d::new(store, rng, "decoder.fuse", ConvSpec::pointwise(4 * d, d).without_bias()),
            fuse_norm: BatchNorm2d::new(store, "decoder.fuse_norm", d),
            classifier: Conv2d::with_init(store, rng, "decoder.classifier", ConvSpec::pointwise(d, cfg.num_classes), Init::Normal(Init::CLASSIFIER_STD)),
        }
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<T>, feats: &EncoderFeatures<T>) -> Result<Var<T>, TensorError> {
        let projected = self
            .proj
            .iter()
            .zip(&feats.maps)
            .map(|(p, m)| p.forward(cx, m))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Var<T>> = projected.iter().collect();
        let cat = aggregate(cx, &refs)?;
        let h = self.fuse.forward(cx, &cat)?;
        let h = self.fuse_norm.forward(cx, &h)?;
        let h = cx.tape.relu(&h)?;
        self.classifier.forward(cx, &h)
    }
}

/// Two 3x3 conv + BN + GELU layers on the last stage.
#[derive(Clone, Debug)]
pub struct CoreDecoder {
    pub convs: [Conv2d; 2],
    pub norms: [BatchNorm2d; 2],
    pub classifier: Conv2d,
}

impl CoreDecoder {
    fn build<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let d = cfg.decoder_dim;
        let c4 = cfg.stages[3].channels;
        CoreDecoder {
            convs: [
                Conv2d::new(store, rng, "decoder.conv1", ConvSpec::new(c4, d, (3, 3)).without_bias()),
                Conv2d::new(store, rng, "decoder.conv2", ConvSpec::new(d, d, (3, 3)).without_bias()),
            ],
            norms: [BatchNorm2d::new(store, "decoder.norm1", d), BatchNorm2d::new(store, "decoder.norm2", d)],
            classifier: Conv2d::with_init(store, rng, "decoder.classifier", ConvSpec::pointwise(d, cfg.num_classes), Init::Normal(Init::CLASSIFIER_STD)),
        }
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<T>, feats: &EncoderFeatures<T>) -> Result<Var<T>, TensorError> {
        let mut h = feats.maps[3].clone();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(cx, &h)?;
            h = norm.forward(cx, &h)?;
            h = cx.tape.gelu(&h)?;
        }
        self.classifier.forward(cx, &h)
    }
}

/// Multi-stage aggregation followed by a low-rank NMF context unit.
#[derive(Clone, Debug)]
pub struct HamDecoder {
    pub include_stage1: bool,
    pub squeeze: Conv2d,
    pub ham_in: Conv2d,
    pub ham_out: Conv2d,
    pub align: Conv2d,
    pub classifier: Conv2d,
    pub rank: usize,
    pub iters: usize,
    pub seed: u64,
}

impl HamDecoder {
    fn build<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng, seed: u64) -> Self {
        let d = cfg.decoder_dim;
        let concat: usize = Self::stages(cfg.include_stage1).iter().map(|&i| cfg.stages[i].channels).sum();
        HamDecoder {
            include_stage1: cfg.include_stage1,
            squeeze: Conv2d::new(store, rng, "decoder.squeeze", ConvSpec::pointwise(concat, d)),
            ham_in: Conv2d::new(store, rng, "decoder.ham_in", ConvSpec::pointwise(d, d)),
            ham_out: Conv2d::new(store, rng, "decoder.ham_out", ConvSpec::pointwise(d, d)),
            align: Conv2d::new(store, rng, "decoder.align", ConvSpec::pointwise(d, d)),
            classifier: Conv2d::with_init(store, rng, "decoder.classifier", ConvSpec::pointwise(d, cfg.num_classes), Init::Normal(Init::CLASSIFIER_STD)),
            rank: cfg.ham_rank,
            iters: cfg.ham_iters,
            seed,
        }
    }

    /// Indices of the aggregated stages; the first one sets the grid.
    pub fn stages(include_stage1: bool) -> &'static [usize] {
        if include_stage1 {
            &[0, 1, 2, 3]
        } else {
            &[1, 2, 3]
        }
    }

    /// Rank actually used on a `d x hw` matrix (never above either side).
    pub fn effective_rank(&self, d: usize, hw: usize) -> usize {
        self.rank.min(d).min(hw)
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<T>, feats: &EncoderFeatures<T>) -> Result<Var<T>, TensorError> {
        let maps: Vec<&Var<T>> = Self::stages(self.include_stage1).iter().map(|&i| &feats.maps[i]).collect();
        let cat = aggregate(cx, &maps)?;
        let s = self.squeeze.forward(cx, &cat)?;
        let s = cx.tape.relu(&s)?;
        let e = self.ham_in.forward(cx, &s)?;
        let e = cx.tape.relu(&e)?;
        let sh = e.shape();
        let m = cx.tape.reshape(&e, Shape::new(sh.n, 1, sh.c, sh.h * sh.w))?;
        let r = nmf_on_tape(cx.tape, &m, self.effective_rank(sh.c, sh.h * sh.w), self.iters, self.seed)?;
        let r = cx.tape.reshape(&r, sh)?;
        let o = self.ham_out.forward(cx, &r)?;
        let h = cx.tape.add(&s, &o)?;
        let h = cx.tape.relu(&h)?;
        let a = self.align.forward(cx, &h)?;
        let a = cx.tape.relu(&a)?;
        self.classifier.forward(cx, &a)
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Mlp(MlpDecoder),
    Core(CoreDecoder),
    Ham(HamDecoder),
}

impl Decoder {
    pub fn build<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng, seed: u64) -> Self {
        match cfg.decoder {
            DecoderKind::Mlp => Decoder::Mlp(MlpDecoder::build(cfg, store, rng)),
            DecoderKind::Core => Decoder::Core(CoreDecoder::build(cfg, store, rng)),
            DecoderKind::Ham => Decoder::Ham(HamDecoder::build(cfg, store, rng, seed)),
        }
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            Decoder::Mlp(_) => DecoderKind::Mlp,
            Decoder::Core(_) => DecoderKind::Core,
            Decoder::Ham(_) => DecoderKind::Ham,
        }
    }

    pub fn classifier(&self) -> &Conv2d {
        match self {
            Decoder::Mlp(d) => &d.classifier,
            Decoder::Core(d) => &d.classifier,
            Decoder::Ham(d) => &d.classifier,
        }
    }

    /// Logits upsampled to `out_hw`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, feats: &EncoderFeatures<T>, out_hw: (usize, usize)) -> Result<Var<T>, TensorError> {
        let logits = match self {
            Decoder::Mlp(d) => d.forward(cx, feats)?,
            Decoder::Core(d) => d.forward(cx, feats)?,
            Decoder::Ham(d) => d.forward(cx, feats)?,
        };
        resize_to(cx, &logits, out_hw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SegModel;
    use crate::msca::zero_conv;
    use crate::tensor::{Tape, Tensor};

    fn rand_input<T: Real>(shape: Shape, seed: u64) -> Tensor<T> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        Tensor::rand_uniform(shape, T::zero(), T::one(), &mut rng)
    }

    fn micro(kind: DecoderKind) -> ModelConfig {
        let mut cfg = ModelConfig::preset("segnext-micro").unwrap();
        cfg.decoder = kind;
        cfg
    }

    #[test]
    fn every_variant_returns_full_resolution_logits() {
        for kind in [DecoderKind::Mlp, DecoderKind::Core, DecoderKind::Ham] {
            let model = SegModel::<f32>::build(&micro(kind), 1).unwrap();
            let x = rand_input(Shape::new(2, 3, 64, 48), 9);
            let y = model.predict(&x).unwrap();
            assert_eq!(y.shape(), Shape::new(2, 3, 64, 48), "{kind}");
            assert!(y.all_finite());
        }
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        for kind in [DecoderKind::Mlp, DecoderKind::Core, DecoderKind::Ham] {
            let mut model = SegModel::<f64>::build(&micro(kind), 2).unwrap();
            let cls = model.decoder.classifier().clone();
            zero_conv(&mut model.store, &cls);
            let x = rand_input(Shape::new(1, 3, 64, 64), 3);
            let y = model.predict(&x).unwrap();
            assert_eq!(y.max_abs(), 0.0);
        }
    }

    #[test]
    fn stage1_changes_the_aggregation_grid() {
        let mut cfg = micro(DecoderKind::Ham);
        cfg.include_stage1 = true;
        let model = SegModel::<f32>::build(&cfg, 0).unwrap();
        let Decoder::Ham(d) = &model.decoder else { panic!() };
        assert_eq!(d.squeeze.spec.in_channels, 8 + 16 + 32 + 64);
        let mut tape = Tape::no_grad();
        let x = tape.constant(rand_input(Shape::new(1, 3, 64, 64), 1));
        assert_eq!(model.forward(&mut tape, &x, false).unwrap().shape(), Shape::new(1, 3, 64, 64));
    }
}
