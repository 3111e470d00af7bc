//! Model configuration, size presets, and the assembled segmentation network.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{Error, TensorError};
use crate::msca::AttentionKind;
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Init, ParamStore};
use crate::tensor::{ConvSpec, Real, Tape, Tensor, Var};

/// Width, depth and FFN expansion of one encoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub channels: usize,
    pub depth: usize,
    pub expansion: usize,
}

impl StageConfig {
    pub const fn new(channels: usize, depth: usize, expansion: usize) -> Self {
        StageConfig { channels, depth, expansion }
    }
}

/// Decoder head design.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// (a) all four stages projected, resized to stride 4 and fused.
    Mlp,
    /// (b) a heavy head on the last stage only.
    Core,
    /// (c) last three stages aggregated, then a low-rank global context unit.
    Ham,
}

impl DecoderKind {
    pub fn letter(self) -> &'static str {
        match self {
            DecoderKind::Mlp => "a",
            DecoderKind::Core => "b",
            DecoderKind::Ham => "c",
        }
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "a" | "mlp" => Ok(DecoderKind::Mlp),
            "b" | "core" => Ok(DecoderKind::Core),
            "c" | "ham" => Ok(DecoderKind::Ham),
            _ => Err(Error::Config(format!("unknown decoder variant `{s}` (expected a, b or c)"))),
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "msca" | "multi-scale" => Ok(AttentionKind::MultiScale),
            "large-kernel" => Ok(AttentionKind::LargeKernel),
            _ => Err(Error::Config(format!("unknown attention `{s}` (expected msca or large-kernel)"))),
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::MultiScale => "msca",
            AttentionKind::LargeKernel => "large-kernel",
        })
    }
}

pub const DEFAULT_HAM_RANK: usize = 16;
pub const DEFAULT_HAM_ITERS: usize = 6;

/// Full architecture description.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stages: [StageConfig; 4],
    pub decoder_dim: usize,
    pub num_classes: usize,
    pub decoder: DecoderKind,
    pub include_stage1: bool,
    pub ham_rank: usize,
    pub ham_iters: usize,
    pub attention: AttentionKind,
    pub drop_path: f64,
}

const WIDE: [usize; 4] = [64, 128, 320, 512];
const EXPANSION: [usize; 4] = [8, 8, 4, 4];

/// Names accepted by [`ModelConfig::preset`].
pub const PRESETS: [&str; 9] = [
    "segnext-t", "segnext-s", "segnext-b", "segnext-l", "mscan-t", "mscan-s", "mscan-b", "mscan-l", "segnext-micro",
];

impl ModelConfig {
    fn from_tables(channels: [usize; 4], depths: [usize; 4], decoder_dim: usize, num_classes: usize) -> Self {
        let stages = std::array::from_fn(|i| StageConfig::new(channels[i], depths[i], EXPANSION[i]));
        ModelConfig {
            stages,
            decoder_dim,
            num_classes,
            decoder: DecoderKind::Ham,
            include_stage1: false,
            ham_rank: DEFAULT_HAM_RANK,
            ham_iters: DEFAULT_HAM_ITERS,
            attention: AttentionKind::MultiScale,
            drop_path: 0.0,
        }
    }

    /// Named size presets. `mscan-*` and `segnext-*` share the encoder table;
    /// `segnext-micro` is a tiny 3-class model for CPU training runs.
    pub fn preset(name: &str) -> Result<Self, Error> {
        let size = name.strip_prefix("segnext-").or_else(|| name.strip_prefix("mscan-"));
        let cfg = match size {
            Some("t") => Self::from_tables([32, 64, 160, 256], [3, 3, 5, 2], 256, 150),
            Some("s") => Self::from_tables(WIDE, [2, 2, 4, 2], 256, 150),
            Some("b") => Self::from_tables(WIDE, [3, 3, 12, 3], 512, 150),
            Some("l") => Self::from_tables(WIDE, [3, 5, 27, 3], 1024, 150),
            Some("micro") if name.starts_with("segnext-") => Self::from_tables([8, 16, 32, 64], [1, 1, 1, 1], 32, 3),
            _ => return Err(Error::Config(format!("unknown model preset `{name}` (expected one of {})", PRESETS.join(", ")))),
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.depth == 0 || s.expansion == 0 {
                return bad(format!("stage {} needs positive channels, depth and expansion, got {:?}", i + 1, s));
            }
        }
        if self.stages[0].channels < 2 {
            return bad("stage 1 needs at least 2 channels for the stem".into());
        }
        if self.decoder_dim == 0 {
            return bad("decoder_dim must be positive".into());
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return bad(format!("num_classes must be in 1..=255, got {}", self.num_classes));
        }
        if self.ham_rank == 0 || self.ham_rank > self.decoder_dim {
            return bad(format!("ham_rank must be in 1..=decoder_dim ({}), got {}", self.decoder_dim, self.ham_rank));
        }
        if self.ham_iters == 0 {
            return bad("ham_iters must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path must be in [0, 1), got {}", self.drop_path));
        }
        Ok(())
    }

    pub fn channels(&self) -> [usize; 4] {
        self.stages.map(|s| s.channels)
    }

    pub fn depths(&self) -> [usize; 4] {
        self.stages.map(|s| s.depth)
    }
}

/// Encoder plus decoder with one flat parameter registry.
#[derive(Clone, Debug)]
pub struct SegModel<T> {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub store: ParamStore<T>,
    pub seed: u64,
}

impl<T: Real> SegModel<T> {
    /// Deterministic construction: all weights are drawn from `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self, Error> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::build(cfg, &mut store, &mut rng)?;
        let decoder = Decoder::build(cfg, &mut store, &mut rng, seed);
        Ok(SegModel { cfg: cfg.clone(), encoder, decoder, store, seed })
    }

    /// Logits `N x num_classes x H x W` for input `x`.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>, training: bool) -> Result<Var<T>, TensorError> {
        let s = x.shape();
        let mut cx = Ctx::new(tape, &self.store, training);
        let feats = self.encoder.forward(&mut cx, x)?;
        self.decoder.forward(&mut cx, &feats, (s.h, s.w))
    }

    /// Eval-mode logits without recording gradients.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        Ok(self.forward(&mut tape, &xv, false)?.into_value())
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> SegModel<U> {
        SegModel {
            cfg: self.cfg.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            store: self.store.cast(),
            seed: self.seed,
        }
    }
}

/// Builds only the encoder, with its own registry.
pub fn build_encoder<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Encoder, ParamStore<T>), Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = Encoder::build(cfg, &mut store, &mut rng)?;
    Ok((enc, store))
}

/// Encoder with an image-classification head: final norm, global average
/// pooling and a linear layer.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub encoder: Encoder,
    pub norm: BatchNorm2d,
    pub head: Conv2d,
    pub store: ParamStore<T>,
}

impl<T: Real> Classifier<T> {
    pub fn build(cfg: &ModelConfig, num_classes: usize, seed: u64) -> Result<Self, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::build(cfg, &mut store, &mut rng)?;
        let c4 = cfg.stages[3].channels;
        let norm = BatchNorm2d::new(&mut store, "head.norm", c4);
        let head = Conv2d::with_init(&mut store, &mut rng, "head.fc", ConvSpec::pointwise(c4, num_classes), Init::TruncNormal(Init::LINEAR_STD));
        Ok(Classifier { encoder, norm, head, store })
    }

    /// Class scores with shape `N x classes x 1 x 1`.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>, training: bool) -> Result<Var<T>, TensorError> {
        let mut cx = Ctx::new(tape, &self.store, training);
        let feats = self.encoder.forward(&mut cx, x)?;
        let h = self.norm.forward(&mut cx, &feats.maps[3])?;
        let pooled = cx.tape.mean_spatial(&h)?;
        self.head.forward(&mut cx, &pooled)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }
}
