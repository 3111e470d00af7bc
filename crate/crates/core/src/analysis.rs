//! Parameter and FLOP accounting, plus a forward-latency benchmark.
//!
//! FLOP convention: one multiply-accumulate is one unit; batch norm,
//! activations and elementwise ops cost one unit per output element; bilinear
//! resize costs eight units per output element. NMF work is counted per
//! iteration. Counts are for a single image.

use std::fmt::Write as _;
use std::time::Instant;

use crate::decoder::{CoreDecoder, Decoder, HamDecoder, MlpDecoder};
use crate::encoder::{Encoder, downsampled};
use crate::error::{Error, TensorError};
use crate::model::{Classifier, SegModel};
use crate::msca::{AttentionKind, Block};
use crate::nn::{BatchNorm2d, Conv2d};
use crate::tensor::{Real, Shape, Tape, Tensor};

pub const CONVENTION: &str = "mac=1,bn=1/elem,elementwise=1/elem,bilinear=8/elem";
pub const RESIZE_UNITS: u64 = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub input: (usize, usize),
    pub convention: &'static str,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    fn new(input: (usize, usize)) -> Self {
        CostReport { input, convention: CONVENTION, layers: Vec::new() }
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    /// FLOPs of layers whose name starts with `prefix`.
    pub fn flops_under(&self, prefix: &str) -> u64 {
        self.layers.iter().filter(|l| l.name.starts_with(prefix)).map(|l| l.flops).sum()
    }

    pub fn params_under(&self, prefix: &str) -> usize {
        self.layers.iter().filter(|l| l.name.starts_with(prefix)).map(|l| l.params).sum()
    }

    /// `layer<TAB>params<TAB>flops`, one line per layer.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            let _ = writeln!(out, "{}\t{}\t{}", l.name, l.params, l.flops);
        }
        out
    }

    /// Human-readable aligned table with totals.
    pub fn to_table(&self) -> String {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", "layer", "params", "flops");
        for l in &self.layers {
            let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", l.name, l.params, l.flops);
        }
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", "total", self.total_params(), self.total_flops());
        let _ = writeln!(
            out,
            "params {:.3} M, flops {:.3} G at {}x{} ({})",
            self.total_params() as f64 / 1e6,
            self.total_flops() as f64 / 1e9,
            self.input.0,
            self.input.1,
            self.convention
        );
        out
    }

    fn push(&mut self, name: String, params: usize, flops: u64) {
        self.layers.push(LayerCost { name, params, flops });
    }

    fn elementwise(&mut self, name: String, c: usize, (h, w): (usize, usize)) {
        self.push(name, 0, (c * h * w) as u64);
    }

    fn conv(&mut self, conv: &Conv2d, (h, w): (usize, usize)) -> (usize, usize) {
        let s = &conv.spec;
        let oh = (h + 2 * s.padding.0 - s.kernel.0) / s.stride.0 + 1;
        let ow = (w + 2 * s.padding.1 - s.kernel.1) / s.stride.1 + 1;
        self.push(conv.name.clone(), s.param_count(), s.macs(1, oh, ow));
        (oh, ow)
    }

    fn bn(&mut self, bn: &BatchNorm2d, (h, w): (usize, usize)) {
        self.push(bn.name.clone(), bn.param_count(), (bn.channels * h * w) as u64);
    }

    fn resize(&mut self, name: String, c: usize, from: (usize, usize), to: (usize, usize)) {
        if from != to {
            self.push(name, 0, RESIZE_UNITS * (c * to.0 * to.1) as u64);
        }
    }
}

fn walk_block(r: &mut CostReport, b: &Block, name: &str, hw: (usize, usize)) {
    let c = b.channels;
    r.bn(&b.norm1, hw);
    r.conv(&b.proj_in, hw);
    r.elementwise(format!("{name}.attn.gelu"), c, hw);
    let m = &b.msca;
    r.conv(&m.local, hw);
    for pair in &m.branches {
        r.conv(&pair.horizontal, hw);
        r.conv(&pair.vertical, hw);
        if m.kind == AttentionKind::MultiScale {
            r.elementwise(format!("{}.sum", pair.horizontal.name.trim_end_matches("_1")), c, hw);
        }
    }
    r.conv(&m.channel_mix, hw);
    r.elementwise(format!("{name}.attn.msca.reweight"), c, hw);
    r.conv(&b.proj_out, hw);
    r.push(format!("{name}.layer_scale1"), c, (c * hw.0 * hw.1) as u64);
    r.elementwise(format!("{name}.residual1"), c, hw);

    let hidden = c * b.expansion;
    r.bn(&b.norm2, hw);
    r.conv(&b.fc1, hw);
    r.conv(&b.dwconv, hw);
    r.elementwise(format!("{name}.ffn.gelu"), hidden, hw);
    r.conv(&b.fc2, hw);
    r.push(format!("{name}.layer_scale2"), c, (c * hw.0 * hw.1) as u64);
    r.elementwise(format!("{name}.residual2"), c, hw);
}

/// Walks the encoder; returns the spatial size of each stage output.
fn walk_encoder(r: &mut CostReport, enc: &Encoder, input: (usize, usize)) -> [(usize, usize); 4] {
    let mut hw = input;
    let mut sizes = [(0, 0); 4];
    for (i, stage) in enc.stages.iter().enumerate() {
        for step in stage.entry.steps() {
            hw = r.conv(&step.conv, hw);
            r.bn(&step.norm, hw);
        }
        for (j, block) in stage.blocks.iter().enumerate() {
            walk_block(r, block, &format!("encoder.stage{}.block{j}", i + 1), hw);
        }
        sizes[i] = hw;
    }
    sizes
}

fn walk_mlp(r: &mut CostReport, d: &MlpDecoder, sizes: [(usize, usize); 4]) -> (usize, usize) {
    let dim = d.fuse_norm.channels;
    for (i, p) in d.proj.iter().enumerate() {
        r.conv(p, sizes[i]);
        r.resize(format!("decoder.resize{}", i + 1), dim, sizes[i], sizes[0]);
    }
    r.conv(&d.fuse, sizes[0]);
    r.bn(&d.fuse_norm, sizes[0]);
    r.elementwise("decoder.fuse_relu".into(), dim, sizes[0]);
    r.conv(&d.classifier, sizes[0])
}

fn walk_core(r: &mut CostReport, d: &CoreDecoder, sizes: [(usize, usize); 4]) -> (usize, usize) {
    let mut hw = sizes[3];
    for (i, (conv, norm)) in d.convs.iter().zip(&d.norms).enumerate() {
        hw = r.conv(conv, hw);
        r.bn(norm, hw);
        r.elementwise(format!("decoder.gelu{}", i + 1), norm.channels, hw);
    }
    r.conv(&d.classifier, hw)
}

/// FLOPs of one NMF run on a `d x p` matrix at rank `k`.
pub fn nmf_flops(d: usize, p: usize, k: usize, iters: usize) -> u64 {
    let (d, p, k) = (d as u64, p as u64, k as u64);
    let codes = k * d * p + k * k * d + k * k * p + 3 * k * p;
    let bases = d * p * k + k * k * p + d * k * k + 3 * d * k;
    iters as u64 * (codes + bases) + d * k * p
}

fn walk_ham(r: &mut CostReport, d: &HamDecoder, channels: [usize; 4], sizes: [(usize, usize); 4]) -> (usize, usize) {
    let stages = HamDecoder::stages(d.include_stage1);
    let grid = sizes[stages[0]];
    for &i in &stages[1..] {
        r.resize(format!("decoder.resize{}", i + 1), channels[i], sizes[i], grid);
    }
    let dim = d.squeeze.spec.out_channels;
    r.conv(&d.squeeze, grid);
    r.elementwise("decoder.squeeze_relu".into(), dim, grid);
    r.conv(&d.ham_in, grid);
    r.elementwise("decoder.ham_relu".into(), dim, grid);
    let p = grid.0 * grid.1;
    r.push("decoder.nmf".into(), 0, nmf_flops(dim, p, d.effective_rank(dim, p), d.iters));
    r.conv(&d.ham_out, grid);
    r.elementwise("decoder.ham_residual".into(), dim, grid);
    r.elementwise("decoder.ham_residual_relu".into(), dim, grid);
    r.conv(&d.align, grid);
    r.elementwise("decoder.align_relu".into(), dim, grid);
    r.conv(&d.classifier, grid)
}

fn check_input(input: (usize, usize)) -> Result<(), Error> {
    let min = crate::encoder::MIN_INPUT;
    if input.0 < min || input.1 < min {
        return Err(Error::Invalid(format!("input {}x{} is below the minimum size {min}x{min}", input.0, input.1)));
    }
    Ok(())
}

/// Per-layer cost of a full segmentation model at the given input size.
pub fn cost_report<T: Real>(model: &SegModel<T>, input: (usize, usize)) -> Result<CostReport, Error> {
    check_input(input)?;
    let mut r = CostReport::new(input);
    let sizes = walk_encoder(&mut r, &model.encoder, input);
    let channels = model.encoder.channels();
    let logits_hw = match &model.decoder {
        Decoder::Mlp(d) => walk_mlp(&mut r, d, sizes),
        Decoder::Core(d) => walk_core(&mut r, d, sizes),
        Decoder::Ham(d) => walk_ham(&mut r, d, channels, sizes),
    };
    r.resize("decoder.upsample".into(), model.cfg.num_classes, logits_hw, input);
    Ok(r)
}

/// Per-layer cost of an encoder with its classification head.
pub fn classifier_cost_report<T: Real>(model: &Classifier<T>, input: (usize, usize)) -> Result<CostReport, Error> {
    check_input(input)?;
    let mut r = CostReport::new(input);
    let sizes = walk_encoder(&mut r, &model.encoder, input);
    r.bn(&model.norm, sizes[3]);
    r.elementwise("head.pool".into(), model.norm.channels, sizes[3]);
    r.conv(&model.head, (1, 1));
    Ok(r)
}

/// Learnable scalars of a segmentation model (running statistics excluded).
pub fn count_params<T: Real>(model: &SegModel<T>) -> usize {
    cost_report(model, (crate::encoder::MIN_INPUT, crate::encoder::MIN_INPUT)).map(|r| r.total_params()).unwrap_or(0)
}

pub fn count_classifier_params<T: Real>(model: &Classifier<T>) -> usize {
    classifier_cost_report(model, (crate::encoder::MIN_INPUT, crate::encoder::MIN_INPUT))
        .map(|r| r.total_params())
        .unwrap_or(0)
}

pub fn count_flops<T: Real>(model: &SegModel<T>, h: usize, w: usize) -> Result<u64, Error> {
    Ok(cost_report(model, (h, w))?.total_flops())
}

/// Stage output sizes the encoder produces for an input of `h x w`.
pub fn stage_sizes(h: usize, w: usize) -> [(usize, usize); 4] {
    let mut hw = (downsampled(downsampled(h)), downsampled(downsampled(w)));
    let mut out = [(0, 0); 4];
    for (i, o) in out.iter_mut().enumerate() {
        if i > 0 {
            hw = (downsampled(hw.0), downsampled(hw.1));
        }
        *o = hw;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p90_ms: f64,
    pub samples: Vec<f64>,
    pub threads: usize,
    pub optimized: bool,
}

/// Wall-clock eval-mode forward latency for one `1 x 3 x h x w` image.
pub fn bench_latency<T: Real>(model: &SegModel<T>, input: (usize, usize), warmup: usize, reps: usize) -> Result<LatencyStats, Error> {
    if reps < 1 {
        return Err(Error::Invalid("reps must be at least 1".into()));
    }
    let x = Tensor::<T>::full(Shape::new(1, 3, input.0, input.1), T::from_f64_lossy(0.5));
    let run = || -> Result<f64, TensorError> {
        let start = Instant::now();
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let y = model.forward(&mut tape, &xv, false)?;
        std::hint::black_box(y);
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..warmup {
        run()?;
    }
    let samples = (0..reps).map(|_| run()).collect::<Result<Vec<_>, _>>()?;
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let median_ms = if reps % 2 == 1 { sorted[reps / 2] } else { 0.5 * (sorted[reps / 2 - 1] + sorted[reps / 2]) };
    let p90_ms = sorted[((0.9 * reps as f64).ceil() as usize).clamp(1, reps) - 1].max(median_ms);
    Ok(LatencyStats { median_ms, p90_ms, samples, threads: rayon::current_num_threads(), optimized: !cfg!(debug_assertions) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderKind, ModelConfig};
    use crate::nn::ParamStore;
    use crate::tensor::ConvSpec;
    use rand::SeedableRng;

    #[test]
    fn single_conv_closed_forms() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(&mut store, &mut rng, "c", ConvSpec::new(3, 8, (3, 3)));
        let mut r = CostReport::new((16, 16));
        r.conv(&conv, (16, 16));
        assert_eq!(r.total_params(), 224);
        let pw = Conv2d::new(&mut store, &mut rng, "p", ConvSpec::pointwise(4, 8).without_bias());
        let mut r = CostReport::new((16, 16));
        r.conv(&pw, (16, 16));
        assert_eq!(r.total_flops(), 8192);
    }

    #[test]
    fn params_agree_with_the_registry() {
        for kind in [DecoderKind::Mlp, DecoderKind::Core, DecoderKind::Ham] {
            let mut cfg = ModelConfig::preset("segnext-micro").unwrap();
            cfg.decoder = kind;
            let m = SegModel::<f32>::build(&cfg, 0).unwrap();
            assert_eq!(count_params(&m), m.store.num_scalars());
        }
        let cfg = ModelConfig::preset("segnext-micro").unwrap();
        let c = Classifier::<f32>::build(&cfg, 10, 0).unwrap();
        assert_eq!(count_classifier_params(&c), c.store.num_scalars());
    }

    #[test]
    fn encoder_plus_decoder_is_the_total() {
        let m = SegModel::<f32>::build(&ModelConfig::preset("segnext-micro").unwrap(), 0).unwrap();
        let r = cost_report(&m, (96, 64)).unwrap();
        assert_eq!(r.flops_under("encoder.") + r.flops_under("decoder."), r.total_flops());
        assert_eq!(stage_sizes(65, 65), [(17, 17), (9, 9), (5, 5), (3, 3)]);
    }

    #[test]
    fn latency_order_statistics() {
        let m = SegModel::<f32>::build(&ModelConfig::preset("segnext-micro").unwrap(), 0).unwrap();
        let s = bench_latency(&m, (32, 32), 0, 1).unwrap();
        assert!(s.median_ms > 0.0 && s.median_ms.is_finite());
        let s = bench_latency(&m, (32, 32), 1, 4).unwrap();
        assert!(s.median_ms <= s.p90_ms);
        assert!(bench_latency(&m, (32, 32), 0, 0).is_err());
    }
}
