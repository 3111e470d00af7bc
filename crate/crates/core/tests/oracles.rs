//! Independent oracles: straight-line compositions of the building blocks
//! at 64-bit, explicit-loop reference implementations, and hand values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segnext::model::{DecoderKind, ModelConfig, SegModel};
use segnext::msca::{AttentionKind, Block, Msca};
use segnext::nn::{BatchNorm2d, Conv2d, Ctx, ParamStore, BN_EPS};
use segnext::tensor::{
    bilinear_resize, conv2d, flip_horizontal, gelu, max_rel_error, BnState, ConvSpec, Shape, Tape, Tensor,
};
use segnext::decoder::Decoder;
use segnext::train::{ms_flip_inference, IGNORE_INDEX};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, &mut rng(seed))
}

/// Replaces every parameter and running statistic with seeded random values,
/// so no layer is an identity at its initial values.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape();
        *store.get_mut(id) = Tensor::rand_uniform(shape, -0.6, 0.6, &mut r);
    }
    for i in 0..store.buffers().len() {
        let c = store.buffer(i).running_mean.len();
        *store.buffer_mut(i) = BnState {
            running_mean: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
            running_var: (0..c).map(|_| r.random_range(0.5..2.0)).collect(),
        };
    }
}

// ------------------------------------------------------------ reference ops

fn ref_conv(store: &ParamStore<f64>, conv: &Conv2d, x: &Tensor<f64>) -> Tensor<f64> {
    let b = conv.bias.map(|b| store.get(b).as_ref().clone());
    conv2d(x, store.get(conv.weight), b.as_ref(), &conv.spec).unwrap()
}

/// Batch norm with explicitly computed per-channel statistics.
fn ref_bn(store: &ParamStore<f64>, bn: &BatchNorm2d, x: &Tensor<f64>, training: bool) -> Tensor<f64> {
    let s = x.shape();
    let gamma = store.get(bn.gamma).data().to_vec();
    let beta = store.get(bn.beta).data().to_vec();
    let state = store.buffer(bn.buffer);
    let stats: Vec<(f64, f64)> = (0..s.c)
        .map(|c| {
            if !training {
                return (state.running_mean[c], state.running_var[c]);
            }
            let vals: Vec<f64> = (0..s.n).flat_map(|n| x.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            (mean, var)
        })
        .collect();
    Tensor::from_fn(s, |[n, c, y, xx]| {
        let (m, v) = stats[c];
        gamma[c] * (x.at([n, c, y, xx]) - m) / (v + BN_EPS).sqrt() + beta[c]
    })
}

fn ew(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_fn(a.shape(), |i| f(a.at(i), b.at(i)))
}

fn relu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}

fn scale_channels(x: &Tensor<f64>, s: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(x.shape(), |[n, c, y, xx]| x.at([n, c, y, xx]) * s.data()[c])
}

fn ref_msca(store: &ParamStore<f64>, m: &Msca, f: &Tensor<f64>) -> Tensor<f64> {
    let base = ref_conv(store, &m.local, f);
    let mixed = match m.kind {
        AttentionKind::MultiScale => m.branches.iter().fold(base.clone(), |acc, b| {
            let h = ref_conv(store, &b.horizontal, &base);
            ew(&acc, &ref_conv(store, &b.vertical, &h), |p, q| p + q)
        }),
        AttentionKind::LargeKernel => ref_conv(store, &m.branches[0].vertical, &ref_conv(store, &m.branches[0].horizontal, &base)),
    };
    let att = ref_conv(store, &m.channel_mix, &mixed);
    ew(&att, f, |a, b| a * b)
}

fn ref_block(store: &ParamStore<f64>, b: &Block, x: &Tensor<f64>, training: bool) -> Tensor<f64> {
    let h = ref_bn(store, &b.norm1, x, training);
    let h = gelu(&ref_conv(store, &b.proj_in, &h));
    let h = ref_conv(store, &b.proj_out, &ref_msca(store, &b.msca, &h));
    let x1 = ew(x, &scale_channels(&h, store.get(b.layer_scale1)), |p, q| p + q);
    let h = ref_bn(store, &b.norm2, &x1, training);
    let h = ref_conv(store, &b.fc1, &h);
    let h = gelu(&ref_conv(store, &b.dwconv, &h));
    let h = ref_conv(store, &b.fc2, &h);
    ew(&x1, &scale_channels(&h, store.get(b.layer_scale2)), |p, q| p + q)
}

fn ref_encoder(model: &SegModel<f64>, x: &Tensor<f64>, training: bool) -> Vec<Tensor<f64>> {
    let mut h = x.clone();
    let mut maps = Vec::new();
    for stage in &model.encoder.stages {
        for step in stage.entry.steps() {
            h = ref_bn(&model.store, &step.norm, &ref_conv(&model.store, &step.conv, &h), training);
        }
        for block in &stage.blocks {
            h = ref_block(&model.store, block, &h, training);
        }
        maps.push(h.clone());
    }
    maps
}

fn matmul_loops(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..cols * rows).map(|i| a[(i % rows) * cols + i / rows]).collect()
}

/// Multiplicative-update NMF with plain loops; same seeded start as the library.
fn ref_nmf(x: &[f64], rows: usize, cols: usize, rank: usize, iters: usize, seed: u64, item: usize) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(item as u64);
    let mut bases: Vec<f64> = (0..rows * rank).map(|_| 1.0 - r.random::<f64>()).collect();
    let mut codes: Vec<f64> = (0..rank * cols).map(|_| 1.0 - r.random::<f64>()).collect();
    let eps = segnext::nmf::NMF_EPS;
    for _ in 0..iters {
        let bt = transpose(&bases, rows, rank);
        let num = matmul_loops(&bt, x, rank, rows, cols);
        let den = matmul_loops(&matmul_loops(&bt, &bases, rank, rows, rank), &codes, rank, rank, cols);
        codes = codes.iter().zip(num.iter().zip(&den)).map(|(c, (n, d))| c * n / (d + eps)).collect();
        let ct = transpose(&codes, rank, cols);
        let num = matmul_loops(x, &ct, rows, cols, rank);
        let den = matmul_loops(&bases, &matmul_loops(&codes, &ct, rank, cols, rank), rows, rank, rank);
        bases = bases.iter().zip(num.iter().zip(&den)).map(|(b, (n, d))| b * n / (d + eps)).collect();
    }
    matmul_loops(&bases, &codes, rows, rank, cols)
}

fn resize(x: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    if (x.shape().h, x.shape().w) == (h, w) { x.clone() } else { bilinear_resize(x, h, w, false).unwrap() }
}

fn concat(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let refs: Vec<&Tensor<f64>> = parts.iter().collect();
    Tensor::concat_channels(&refs).unwrap()
}

fn ref_decoder(model: &SegModel<f64>, maps: &[Tensor<f64>], out: (usize, usize), training: bool) -> Tensor<f64> {
    let st = &model.store;
    let logits = match &model.decoder {
        Decoder::Mlp(d) => {
            let g = (maps[0].shape().h, maps[0].shape().w);
            let parts: Vec<_> = d.proj.iter().zip(maps).map(|(p, m)| resize(&ref_conv(st, p, m), g.0, g.1)).collect();
            let h = relu(&ref_bn(st, &d.fuse_norm, &ref_conv(st, &d.fuse, &concat(&parts)), training));
            ref_conv(st, &d.classifier, &h)
        }
        Decoder::Core(d) => {
            let mut h = maps[3].clone();
            for (conv, norm) in d.convs.iter().zip(&d.norms) {
                h = gelu(&ref_bn(st, norm, &ref_conv(st, conv, &h), training));
            }
            ref_conv(st, &d.classifier, &h)
        }
        Decoder::Ham(d) => {
            let picked: Vec<&Tensor<f64>> = if d.include_stage1 { maps.iter().collect() } else { maps[1..].iter().collect() };
            let g = (picked[0].shape().h, picked[0].shape().w);
            let parts: Vec<_> = picked.iter().map(|m| resize(m, g.0, g.1)).collect();
            let s = relu(&ref_conv(st, &d.squeeze, &concat(&parts)));
            let e = relu(&ref_conv(st, &d.ham_in, &s));
            let sh = e.shape();
            let (rows, cols) = (sh.c, sh.h * sh.w);
            let rank = d.rank.min(rows).min(cols);
            let recon: Vec<f64> = (0..sh.n).flat_map(|n| ref_nmf(e.item(n), rows, cols, rank, d.iters, d.seed, n)).collect();
            let r = Tensor::from_vec(sh, recon).unwrap();
            let h = relu(&ew(&s, &ref_conv(st, &d.ham_out, &r), |p, q| p + q));
            ref_conv(st, &d.classifier, &relu(&ref_conv(st, &d.align, &h)))
        }
    };
    resize(&logits, out.0, out.1)
}

// ------------------------------------------------------------ composition

#[test]
fn msca_matches_composition() {
    for kind in [AttentionKind::MultiScale, AttentionKind::LargeKernel] {
        let mut store = ParamStore::new();
        let m = Msca::new(&mut store, &mut rng(1), "m", 4, kind);
        randomize(&mut store, 2);
        let x = uniform(Shape::new(1, 4, 8, 8), -1.0, 1.0, 3);
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let got = m.forward(&mut Ctx::new(&mut tape, &store, false), &xv).unwrap().into_value();
        let err = max_rel_error(&got, &ref_msca(&store, &m, &x));
        assert!(err < 1e-12, "{kind:?}: {err}");
    }
}

#[test]
fn block_matches_composition() {
    for training in [false, true] {
        let mut store = ParamStore::new();
        let b = Block::new(&mut store, &mut rng(4), "b", 8, 4, AttentionKind::MultiScale, 0.0);
        randomize(&mut store, 5);
        let x = uniform(Shape::new(2, 8, 8, 8), -1.0, 1.0, 6);
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let got = b.forward(&mut Ctx::new(&mut tape, &store, training), &xv).unwrap().into_value();
        let err = max_rel_error(&got, &ref_block(&store, &b, &x, training));
        assert!(err < 1e-12, "training {training}: {err}");
    }
}

#[test]
fn end_to_end_forward_matches_composition_for_every_decoder() {
    let variants = [(DecoderKind::Ham, false), (DecoderKind::Ham, true), (DecoderKind::Mlp, false), (DecoderKind::Core, false)];
    for (kind, stage1) in variants {
        let mut cfg = ModelConfig::preset("segnext-micro").unwrap();
        cfg.decoder = kind;
        cfg.include_stage1 = stage1;
        let mut model = SegModel::<f64>::build(&cfg, 8).unwrap();
        randomize(&mut model.store, 9);
        // Keep the decoder input to the factorization non-trivial.
        let x = uniform(Shape::new(2, 3, 64, 48), 0.0, 1.0, 10);
        for training in [false, true] {
            let mut tape = Tape::no_grad();
            let xv = tape.constant(x.clone());
            let got = model.forward(&mut tape, &xv, training).unwrap().into_value();
            let maps = ref_encoder(&model, &x, training);
            let want = ref_decoder(&model, &maps, (64, 48), training);
            assert_eq!(got.shape(), Shape::new(2, 3, 64, 48));
            let err = max_rel_error(&got, &want);
            assert!(err < 1e-10, "{kind} stage1 {stage1} training {training}: {err}");
        }
    }
}

#[test]
fn flip_inference_matches_hand_composition() {
    let model = SegModel::<f64>::build(&ModelConfig::preset("segnext-micro").unwrap(), 12).unwrap();
    let x = uniform(Shape::new(1, 3, 64, 64), 0.0, 1.0, 13);
    let mirrored = Tensor::from_fn(x.shape(), |[n, c, y, xx]| x.at([n, c, y, 63 - xx]));
    let a = model.predict(&x).unwrap();
    let b = model.predict(&mirrored).unwrap();
    let unflipped = Tensor::from_fn(b.shape(), |[n, c, y, xx]| b.at([n, c, y, 63 - xx]));
    let want = ew(&a, &unflipped, |p, q| (p + q) / 2.0);
    let got = ms_flip_inference(&model, &x, &[1.0], true).unwrap();
    assert!(max_rel_error(&got, &want) < 1e-14);
}

#[test]
fn large_kernel_block_drops_exactly_the_short_branches() {
    let c = 16;
    let count = |kind| {
        let mut store = ParamStore::<f32>::new();
        Block::new(&mut store, &mut rng(0), "b", c, 4, kind, 0.0);
        store.num_scalars()
    };
    // Each branch is a (1, k) and a (k, 1) depthwise conv with bias.
    let short: usize = [7, 11].iter().map(|k| 2 * (c * k + c)).sum();
    assert_eq!(count(AttentionKind::MultiScale) - count(AttentionKind::LargeKernel), short);
}

// ------------------------------------------------------------ single ops

#[test]
fn batchnorm_training_matches_explicit_statistics() {
    let mut store = ParamStore::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 3);
    randomize(&mut store, 20);
    let x = uniform(Shape::new(2, 3, 4, 4), -2.0, 3.0, 21);
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let got = bn.forward(&mut Ctx::new(&mut tape, &store, true), &xv).unwrap().into_value();
    assert!(max_rel_error(&got, &ref_bn(&store, &bn, &x, true)) < 1e-13);
    // Running statistics: momentum 0.1 towards the unbiased batch variance.
    let update = tape.take_stats().pop().unwrap().state;
    let old = store.buffer(bn.buffer);
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|n| x.plane(n, c).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 32.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 31.0;
        assert!((update.running_mean[c] - (0.9 * old.running_mean[c] + 0.1 * mean)).abs() < 1e-14);
        assert!((update.running_var[c] - (0.9 * old.running_var[c] + 0.1 * var)).abs() < 1e-14);
    }
}

/// Maclaurin series of the error function.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn gelu_matches_series_erf() {
    let one = gelu(&Tensor::<f64>::scalar(1.0)).data()[0];
    assert!((one - 0.841345).abs() < 1e-5);
    let x = uniform(Shape::new(1, 1, 1, 64), -4.0, 4.0, 30);
    let want = x.map(|v| v * 0.5 * (1.0 + erf_series(v / std::f64::consts::SQRT_2)));
    assert!(max_rel_error(&gelu(&x), &want) < 1e-13);
}

#[test]
fn bilinear_upsample_hand_values() {
    let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let got = bilinear_resize(&x, 4, 4, false).unwrap();
    #[rustfmt::skip]
    let want = [
        1.0, 1.25, 1.75, 2.0,
        1.5, 1.75, 2.25, 2.5,
        2.5, 2.75, 3.25, 3.5,
        3.0, 3.25, 3.75, 4.0,
    ];
    assert_eq!(got.data(), &want);
}

#[test]
fn elementwise_ops_match_loops() {
    let a = uniform(Shape::new(2, 3, 4, 5), -1.0, 1.0, 40);
    let b = uniform(Shape::new(2, 3, 4, 5), -1.0, 1.0, 41);
    let mut tape = Tape::no_grad();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let sum = tape.add(&av, &bv).unwrap();
    let prod = tape.mul(&av, &bv).unwrap();
    for i in 0..a.numel() {
        assert_eq!(sum.value().data()[i], a.data()[i] + b.data()[i]);
        assert_eq!(prod.value().data()[i], a.data()[i] * b.data()[i]);
    }
}

#[test]
fn cross_entropy_matches_scalar_loop() {
    let logits = uniform(Shape::new(2, 3, 4, 4), -3.0, 3.0, 50);
    let mut r = rng(51);
    let labels: Vec<u8> = (0..32).map(|_| if r.random_bool(0.2) { IGNORE_INDEX } else { r.random_range(0..3) }).collect();
    let mut total = 0.0;
    let mut count = 0;
    for n in 0..2 {
        for p in 0..16 {
            let l = labels[n * 16 + p];
            if l == IGNORE_INDEX {
                continue;
            }
            let z: Vec<f64> = (0..3).map(|c| logits.plane(n, c)[p]).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - z[l as usize];
            count += 1;
        }
    }
    let mut tape = Tape::no_grad();
    let lv = tape.constant(logits);
    let got = tape.cross_entropy(&lv, &labels, IGNORE_INDEX).unwrap().value().data()[0];
    assert!((got - total / count as f64).abs() < 1e-14);
}

#[test]
fn cross_entropy_saturates() {
    let mut logits = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 2));
    logits.set([0, 1, 0, 0], 1000.0);
    logits.set([0, 2, 0, 1], 1000.0);
    let mut tape = Tape::no_grad();
    let lv = tape.constant(logits);
    let loss = tape.cross_entropy(&lv, &[1, 2], IGNORE_INDEX).unwrap().value().data()[0];
    assert!(loss.abs() < 1e-12);
}

fn central(f: &mut dyn FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

#[test]
fn conv_parameter_gradients_match_finite_differences() {
    let spec = ConvSpec::new(2, 3, (3, 3)).with_padding((1, 1));
    let x = uniform(Shape::new(1, 2, 5, 5), -1.0, 1.0, 60);
    let w = uniform(spec.weight_shape(), -1.0, 1.0, 61);
    let b = uniform(Shape::channels(3), -1.0, 1.0, 62);
    let proj = uniform(Shape::new(1, 3, 5, 5), -1.0, 1.0, 63);
    let loss = |w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
        conv2d(&x, w, Some(b), &spec).unwrap().data().iter().zip(proj.data()).map(|(y, p)| y * p).sum()
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (wv, bv) = (tape.input(w.clone()), tape.input(b.clone()));
    let y = tape.conv2d(&xv, &wv, Some(&bv), &spec).unwrap();
    let pv = tape.constant(proj.clone());
    let yp = tape.mul(&y, &pv).unwrap();
    let l = tape.sum(&yp).unwrap();
    let g = tape.backward(&l).unwrap();
    let (gw, gb) = (g.wrt(&wv).unwrap(), g.wrt(&bv).unwrap());
    for i in 0..w.numel() {
        let fd = central(&mut |d| {
            let mut wp = w.clone();
            wp.data_mut()[i] += d;
            loss(&wp, &b)
        }, 1e-4);
        assert!((gw.data()[i] - fd).abs() / fd.abs().max(1e-8) < 1e-4, "weight {i}");
    }
    for i in 0..3 {
        let fd = central(&mut |d| {
            let mut bp = b.clone();
            bp.data_mut()[i] += d;
            loss(&w, &bp)
        }, 1e-4);
        assert!((gb.data()[i] - fd).abs() / fd.abs().max(1e-8) < 1e-4, "bias {i}");
    }
}

#[test]
fn batchnorm_input_gradient_matches_finite_differences() {
    let x = uniform(Shape::new(2, 3, 4, 4), -1.0, 2.0, 70);
    let gamma = uniform(Shape::channels(3), 0.5, 1.5, 71);
    let beta = uniform(Shape::channels(3), -0.5, 0.5, 72);
    let proj = uniform(x.shape(), -1.0, 1.0, 73);
    let eval = |x: &Tensor<f64>, tape: &mut Tape<f64>| {
        let xv = tape.input(x.clone());
        let (g, b) = (tape.constant(gamma.clone()), tape.constant(beta.clone()));
        let (y, _) = tape.batchnorm(&xv, &g, &b, &BnState::new(3), 1e-5, 0.1, true).unwrap();
        let pv = tape.constant(proj.clone());
        let yp = tape.mul(&y, &pv).unwrap();
        (xv, tape.sum(&yp).unwrap())
    };
    let mut tape = Tape::new();
    let (xv, l) = eval(&x, &mut tape);
    let gx = tape.backward(&l).unwrap().wrt(&xv).unwrap().clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let fd = central(&mut |d| {
            let mut xp = x.clone();
            xp.data_mut()[i] += d;
            eval(&xp, &mut Tape::no_grad()).1.value().data()[0]
        }, 1e-4);
        worst = worst.max((gx.data()[i] - fd).abs() / gx.data()[i].abs().max(fd.abs()).max(1e-8));
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn flip_helper_reverses_rows() {
    let x = uniform(Shape::new(1, 2, 3, 5), -1.0, 1.0, 80);
    let f = flip_horizontal(&x);
    for y in 0..3 {
        for xx in 0..5 {
            assert_eq!(f.at([0, 1, y, xx]), x.at([0, 1, y, 4 - xx]));
        }
    }
}
