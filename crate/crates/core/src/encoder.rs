//! The four-stage hierarchical encoder.

use rand::Rng;

use crate::error::{Error, TensorError};
use crate::model::ModelConfig;
use crate::msca::Block;
use crate::nn::{BatchNorm2d, Conv2d, Ctx, ParamStore};
use crate::tensor::{ConvSpec, Real, Shape, Var};

/// Smallest accepted input height/width.
pub const MIN_INPUT: usize = 32;

/// Output stride of each stage.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

fn down_spec(cin: usize, cout: usize) -> ConvSpec {
    ConvSpec::new(cin, cout, (3, 3)).with_stride((2, 2)).with_padding((1, 1))
}

/// Stride-2 3x3 conv followed by batch norm.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
}

impl Downsample {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        Downsample {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), down_spec(cin, cout)),
            norm: BatchNorm2d::new(store, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>, TensorError> {
        let h = self.conv.forward(cx, x)?;
        self.norm.forward(cx, &h)
    }
}

/// Entry of a stage: the two-step stem for stage 1, one downsample otherwise.
#[derive(Clone, Debug)]
pub enum StageEntry {
    Stem([Downsample; 2]),
    Down(Downsample),
}

impl StageEntry {
    pub fn steps(&self) -> &[Downsample] {
        match self {
            StageEntry::Stem(s) => s,
            StageEntry::Down(d) => std::slice::from_ref(d),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub channels: usize,
    pub entry: StageEntry,
    pub blocks: Vec<Block>,
}

/// Feature maps at strides 4, 8, 16, 32.
#[derive(Clone, Debug)]
pub struct EncoderFeatures<T> {
    pub maps: [Var<T>; 4],
}

impl<T: Real> EncoderFeatures<T> {
    pub fn shapes(&self) -> [Shape; 4] {
        [self.maps[0].shape(), self.maps[1].shape(), self.maps[2].shape(), self.maps[3].shape()]
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<Stage>,
}

impl Encoder {
    /// Registers all encoder parameters in `store`, drawing weights from `rng`.
    pub fn build<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self, Error> {
        cfg.validate()?;
        let total: usize = cfg.stages.iter().map(|s| s.depth).sum();
        let mut block_idx = 0;
        let mut stages = Vec::with_capacity(4);
        for (i, sc) in cfg.stages.iter().enumerate() {
            let name = format!("encoder.stage{}", i + 1);
            let entry = if i == 0 {
                let mid = sc.channels / 2;
                StageEntry::Stem([
                    Downsample::new(store, rng, &format!("{name}.stem1"), 3, mid),
                    Downsample::new(store, rng, &format!("{name}.stem2"), mid, sc.channels),
                ])
            } else {
                StageEntry::Down(Downsample::new(store, rng, &format!("{name}.down"), cfg.stages[i - 1].channels, sc.channels))
            };
            let blocks = (0..sc.depth)
                .map(|b| {
                    // Stochastic depth grows linearly with block index.
                    let rate = if total > 1 { cfg.drop_path * block_idx as f64 / (total - 1) as f64 } else { 0.0 };
                    block_idx += 1;
                    Block::new(store, rng, &format!("{name}.block{b}"), sc.channels, sc.expansion, cfg.attention, rate)
                })
                .collect();
            stages.push(Stage { channels: sc.channels, entry, blocks });
        }
        Ok(Encoder { stages })
    }

    pub fn channels(&self) -> [usize; 4] {
        [self.stages[0].channels, self.stages[1].channels, self.stages[2].channels, self.stages[3].channels]
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: &Var<T>) -> Result<EncoderFeatures<T>, TensorError> {
        let s = x.shape();
        if s.c != 3 {
            return Err(TensorError::shape("encoder", "input channels", 3, s.c));
        }
        if s.h < MIN_INPUT || s.w < MIN_INPUT {
            return Err(TensorError::invalid(
                "encoder",
                format!("input {}x{} is below the minimum size {MIN_INPUT}x{MIN_INPUT}", s.h, s.w),
            ));
        }
        let mut h = x.clone();
        let mut maps = Vec::with_capacity(4);
        for stage in &self.stages {
            for step in stage.entry.steps() {
                h = step.forward(cx, &h)?;
            }
            for block in &stage.blocks {
                h = block.forward(cx, &h)?;
            }
            maps.push(h.clone());
        }
        let maps: [Var<T>; 4] = maps.try_into().expect("four stages");
        Ok(EncoderFeatures { maps })
    }
}

/// Spatial size after one stride-2, pad-1, 3x3 convolution.
pub fn downsampled(len: usize) -> usize {
    (len + 2 - 3) / 2 + 1
}
