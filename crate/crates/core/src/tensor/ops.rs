use super::{Real, Shape, Tensor};
use crate::error::TensorError;

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState { running_mean: vec![T::zero(); channels], running_var: vec![T::one(); channels] }
    }
}

/// Result of [`batchnorm2d`]: the output plus what the reverse pass needs.
#[derive(Clone, Debug)]
pub struct BnOutput<T> {
    pub y: Tensor<T>,
    /// Normalized input before the affine transform.
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Updated running statistics (training mode only).
    pub updated: Option<BnState<T>>,
}

/// Batch normalization over `N * H * W` per channel.
///
/// Training mode normalizes with biased batch statistics and folds the
/// unbiased batch variance into the running estimate with weight `momentum`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    state: &BnState<T>,
    eps: T,
    training: bool,
    momentum: T,
) -> Result<BnOutput<T>, TensorError> {
    let s = x.shape();
    for (len, what) in [
        (gamma.len(), "gamma length"),
        (beta.len(), "beta length"),
        (state.running_mean.len(), "running_mean length"),
        (state.running_var.len(), "running_var length"),
    ] {
        if len != s.c {
            return Err(TensorError::shape("batchnorm2d", what, s.c, len));
        }
    }
    if s.n == 0 || s.plane() == 0 {
        return Err(TensorError::invalid("batchnorm2d", format!("empty extent in input {s}")));
    }
    if eps <= T::zero() {
        return Err(TensorError::invalid("batchnorm2d", "eps must be positive"));
    }
    let plane = s.plane();
    let count = s.n * plane;
    let count_t = T::from_usize(count).unwrap();

    let (mean, var) = if training {
        let mut mean = vec![T::zero(); s.c];
        let mut var = vec![T::zero(); s.c];
        for c in 0..s.c {
            let mut acc = T::zero();
            for n in 0..s.n {
                acc += x.plane(n, c).iter().copied().sum::<T>();
            }
            let m = acc / count_t;
            let mut sq = T::zero();
            for n in 0..s.n {
                for &v in x.plane(n, c) {
                    let d = v - m;
                    sq += d * d;
                }
            }
            mean[c] = m;
            var[c] = sq / count_t;
        }
        (mean, var)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    for (idx, (xp, (hp, yp))) in x
        .data()
        .chunks(plane)
        .zip(xhat.data_mut().chunks_mut(plane).zip(y.data_mut().chunks_mut(plane)))
        .enumerate()
    {
        let c = idx % s.c;
        let (m, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
        for ((&xv, h), o) in xp.iter().zip(hp.iter_mut()).zip(yp.iter_mut()) {
            *h = (xv - m) * is;
            *o = g * *h + b;
        }
    }

    let updated = training.then(|| {
        let unbias = if count > 1 { count_t / T::from_usize(count - 1).unwrap() } else { T::one() };
        let keep = T::one() - momentum;
        BnState {
            running_mean: state.running_mean.iter().zip(&mean).map(|(&r, &m)| keep * r + momentum * m).collect(),
            running_var: state
                .running_var
                .iter()
                .zip(&var)
                .map(|(&r, &v)| keep * r + momentum * v * unbias)
                .collect(),
        }
    });
    Ok(BnOutput { y, xhat, inv_std, updated })
}

/// Reverse pass of batch norm. Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batchnorm2d_backward<T: Real>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &[T],
    dy: &Tensor<T>,
    training: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = dy.shape();
    let plane = s.plane();
    let count = T::from_usize(s.n * plane).unwrap();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for (idx, (gp, hp)) in dy.data().chunks(plane).zip(xhat.data().chunks(plane)).enumerate() {
        let c = idx % s.c;
        for (&g, &h) in gp.iter().zip(hp) {
            dbeta[c] += g;
            dgamma[c] += g * h;
        }
    }
    let mut dx = Tensor::zeros(s);
    for (idx, (dp, (gp, hp))) in dx
        .data_mut()
        .chunks_mut(plane)
        .zip(dy.data().chunks(plane).zip(xhat.data().chunks(plane)))
        .enumerate()
    {
        let c = idx % s.c;
        let k = gamma[c] * inv_std[c];
        if training {
            let mb = dbeta[c] / count;
            let mg = dgamma[c] / count;
            for ((d, &g), &h) in dp.iter_mut().zip(gp).zip(hp) {
                *d = k * (g - mb - h * mg);
            }
        } else {
            for (d, &g) in dp.iter_mut().zip(gp) {
                *d = k * g;
            }
        }
    }
    (dx, dgamma, dbeta)
}

fn std_normal_cdf<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// `x * Phi(x)` with the exact error-function CDF.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * std_normal_cdf(v))
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let pdf = (-(x * x) * T::from_f64_lossy(0.5)).exp() * T::from_f64_lossy(0.398_942_280_401_432_7);
    std_normal_cdf(x) + x * pdf
}

/// Source index and interpolation weight pairs for one output axis.
fn axis_taps(in_len: usize, out_len: usize, align_corners: bool) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = if align_corners {
                if out_len > 1 {
                    o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
                } else {
                    0.0
                }
            } else {
                let scale = in_len as f64 / out_len as f64;
                ((o as f64 + 0.5) * scale - 0.5).max(0.0)
            };
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let lambda = (src - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, lambda)
        })
        .collect()
}

fn check_resize(op: &'static str, s: Shape, out_h: usize, out_w: usize) -> Result<(), TensorError> {
    if s.h == 0 || s.w == 0 {
        return Err(TensorError::invalid(op, format!("zero-size input {s}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::invalid(op, format!("output size {out_h}x{out_w} must be positive")));
    }
    Ok(())
}

/// Bilinear interpolation. With `align_corners = false` output pixel centers map
/// to `(o + 0.5) * in / out - 0.5`, clamped at the border.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize, align_corners: bool) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    check_resize("bilinear_resize", s, out_h, out_w)?;
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    let ty = axis_taps(s.h, out_h, align_corners);
    let tx = axis_taps(s.w, out_w, align_corners);
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Tensor::zeros(os);
    for (src, dst) in x.data().chunks(s.plane()).zip(out.data_mut().chunks_mut(os.plane())) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::from_f64_lossy(ly);
            let r0 = &src[y0 * s.w..(y0 + 1) * s.w];
            let r1 = &src[y1 * s.w..(y1 + 1) * s.w];
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::from_f64_lossy(lx);
                let top = r0[x0] * (T::one() - lx) + r0[x1] * lx;
                let bot = r1[x0] * (T::one() - lx) + r1[x1] * lx;
                dst[oy * out_w + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    Ok(out)
}

pub(crate) fn bilinear_resize_backward<T: Real>(dy: &Tensor<T>, in_shape: Shape, align_corners: bool) -> Tensor<T> {
    let os = dy.shape();
    if (os.h, os.w) == (in_shape.h, in_shape.w) {
        return dy.clone();
    }
    let ty = axis_taps(in_shape.h, os.h, align_corners);
    let tx = axis_taps(in_shape.w, os.w, align_corners);
    let mut dx = Tensor::zeros(in_shape);
    let w = in_shape.w;
    for (g, d) in dy.data().chunks(os.plane()).zip(dx.data_mut().chunks_mut(in_shape.plane())) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::from_f64_lossy(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::from_f64_lossy(lx);
                let gv = g[oy * os.w + ox];
                let top = gv * (T::one() - ly);
                let bot = gv * ly;
                d[y0 * w + x0] += top * (T::one() - lx);
                d[y0 * w + x1] += top * lx;
                d[y1 * w + x0] += bot * (T::one() - lx);
                d[y1 * w + x1] += bot * lx;
            }
        }
    }
    dx
}

/// Nearest-neighbour resize, source index `floor(o * in / out)`.
pub fn nearest_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    check_resize("nearest_resize", s, out_h, out_w)?;
    let iy: Vec<usize> = (0..out_h).map(|o| nearest_index(o, s.h, out_h)).collect();
    let ix: Vec<usize> = (0..out_w).map(|o| nearest_index(o, s.w, out_w)).collect();
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Tensor::zeros(os);
    for (src, dst) in x.data().chunks(s.plane()).zip(out.data_mut().chunks_mut(os.plane())) {
        for (oy, &y) in iy.iter().enumerate() {
            for (ox, &xx) in ix.iter().enumerate() {
                dst[oy * out_w + ox] = src[y * s.w + xx];
            }
        }
    }
    Ok(out)
}

pub(crate) fn nearest_index(o: usize, in_len: usize, out_len: usize) -> usize {
    ((o * in_len) / out_len).min(in_len - 1)
}

/// Mirror along the width axis.
pub fn flip_horizontal<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(s.w) {
        row.reverse();
    }
    out
}

/// Logical `(rows, cols)` of one matrix in a `(N, 1, R, C)` batch, after an
/// optional transpose.
fn mat_dims(s: Shape, transpose: bool) -> (usize, usize) {
    if transpose {
        (s.w, s.h)
    } else {
        (s.h, s.w)
    }
}

/// Batched matrix product over tensors shaped `(N, 1, rows, cols)`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.c != 1 || sb.c != 1 {
        return Err(TensorError::shape("matmul", "channel (must be 1)", 1, sa.c.max(sb.c)));
    }
    if sa.n != sb.n {
        return Err(TensorError::shape("matmul", "batch", sa.n, sb.n));
    }
    let (m, k) = mat_dims(sa, trans_a);
    let (k2, n) = mat_dims(sb, trans_b);
    if k != k2 {
        return Err(TensorError::shape("matmul", "inner dimension", k, k2));
    }
    let mut out = Tensor::zeros([sa.n, 1, m, n]);
    let (rsa, csa) = if trans_a { (1, sa.w as isize) } else { (sa.w as isize, 1) };
    let (rsb, csb) = if trans_b { (1, sb.w as isize) } else { (sb.w as isize, 1) };
    for i in 0..sa.n {
        let c = &mut out.data_mut()[i * m * n..(i + 1) * m * n];
        T::gemm(m, k, n, T::one(), a.item(i), rsa, csa, b.item(i), rsb, csb, T::zero(), c, n as isize, 1);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_identity_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::rand_uniform([2, 3, 4, 4], -2.0, 2.0, &mut rng);
        let out = batchnorm2d(&x, &[1.0; 3], &[0.0; 3], &BnState::new(3), 1e-5, false, 0.1).unwrap();
        let k = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(crate::tensor::max_rel_error(&out.y, &x.scale(k)) < 1e-15);
        assert!(out.updated.is_none());
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f32>::from_fn([2, 2, 3, 3], |i| if i[1] == 0 { 4.0 } else { -1.5 });
        let out = batchnorm2d(&x, &[2.0, 3.0], &[0.25, -0.5], &BnState::new(2), 1e-5, true, 0.1).unwrap();
        for (i, &v) in out.y.data().iter().enumerate() {
            let expect = if (i / 9) % 2 == 0 { 0.25 } else { -0.5 };
            assert!((v - expect).abs() < 1e-6);
        }
        let upd = out.updated.unwrap();
        assert!((upd.running_mean[0] - 0.4).abs() < 1e-6);
        assert!((upd.running_var[1] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_rejects_bad_inputs() {
        let x = Tensor::<f32>::zeros([1, 2, 2, 2]);
        assert!(batchnorm2d(&x, &[1.0], &[0.0, 0.0], &BnState::new(2), 1e-5, true, 0.1).is_err());
        let empty = Tensor::<f32>::zeros([1, 2, 0, 2]);
        assert!(batchnorm2d(&empty, &[1.0; 2], &[0.0; 2], &BnState::new(2), 1e-5, true, 0.1).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![0.0, 10.0, -10.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-4);
        assert!(y.data()[2].abs() < 1e-4);
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::rand_uniform([1, 2, 5, 3], 0.0, 1.0, &mut rng);
        assert_eq!(bilinear_resize(&x, 5, 3, false).unwrap(), x);
        let c = Tensor::<f32>::full([1, 1, 3, 4], 0.7);
        let r = bilinear_resize(&c, 7, 2, false).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        assert!(bilinear_resize(&Tensor::<f32>::zeros([1, 1, 0, 3]), 2, 2, false).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::rand_uniform([2, 3, 4, 5], 0.0, 1.0, &mut rng);
        assert_ne!(flip_horizontal(&x), x);
        assert_eq!(flip_horizontal(&flip_horizontal(&x)), x);
    }

    #[test]
    fn matmul_transposes() {
        let a = Tensor::<f64>::from_vec([1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_vec([1, 1, 2, 3], vec![1., 0., -1., 2., 1., 0.]).unwrap();
        // a * b^T
        let c = matmul(&a, &b, false, true).unwrap();
        assert_eq!(c.data(), &[-2., 4., -2., 13.]);
        // a^T * b
        let d = matmul(&a, &b, true, false).unwrap();
        assert_eq!(d.shape(), Shape::new(1, 1, 3, 3));
        assert_eq!(d.data(), &[9., 4., -1., 12., 5., -2., 15., 6., -3.]);
        assert!(matmul(&a, &a, false, false).is_err());
    }
}
