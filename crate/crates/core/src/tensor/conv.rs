use rayon::prelude::*;

use super::{Real, Shape, Tensor};
use crate::error::TensorError;

/// Geometry of a 2-D convolution. Cross-correlation, zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, "same" padding of `k / 2` per axis, one group, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (kernel.0 / 2, kernel.1 / 2),
            groups: 1,
            bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, (1, 1))
    }

    pub fn depthwise(channels: usize, kernel: (usize, usize)) -> Self {
        Self::new(channels, channels, kernel).with_groups(channels)
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn is_pointwise_dense(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0) && self.groups == 1
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: String| Err(TensorError::InvalidSpec(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad(format!("channels must be positive ({} -> {})", self.in_channels, self.out_channels));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return bad(format!("kernel must be at least 1x1, got {:?}", self.kernel));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return bad(format!("stride must be at least 1, got {:?}", self.stride));
        }
        if self.groups == 0 || self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return bad(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            ));
        }
        Ok(())
    }

    /// `(out_channels, in_channels / groups, kh, kw)`.
    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels / self.groups, self.kernel.0, self.kernel.1)
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.bias { self.out_channels } else { 0 }
    }

    /// Output spatial size, `floor((H + 2p - k) / s) + 1` per axis.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize), TensorError> {
        let axis = |len: usize, k: usize, s: usize, p: usize, dim: &'static str| {
            let padded = len + 2 * p;
            if padded < k {
                Err(TensorError::shape("conv2d", dim, format!(">= {}", k.saturating_sub(2 * p)), len))
            } else {
                Ok((padded - k) / s + 1)
            }
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.padding.0, "height")?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1, "width")?,
        ))
    }

    /// Multiply-accumulates for a batch of `n` at the given output size.
    pub fn macs(&self, n: usize, out_h: usize, out_w: usize) -> u64 {
        let per_out = (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1;
        (n * self.out_channels * out_h * out_w * per_out) as u64
    }
}

fn check_args<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Shape, TensorError> {
    spec.validate()?;
    let s = x.shape();
    if s.c != spec.in_channels {
        return Err(TensorError::shape("conv2d", "input channels", spec.in_channels, s.c));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(TensorError::shape("conv2d", "weight shape", spec.weight_shape(), weight.shape()));
    }
    match (bias, spec.bias) {
        (Some(b), true) if b.shape() != Shape::channels(spec.out_channels) => {
            return Err(TensorError::shape("conv2d", "bias shape", Shape::channels(spec.out_channels), b.shape()));
        }
        (None, true) => return Err(TensorError::invalid("conv2d", "spec requires a bias tensor")),
        (Some(_), false) => return Err(TensorError::invalid("conv2d", "bias given for a bias-free spec")),
        _ => {}
    }
    let (oh, ow) = spec.output_hw(s.h, s.w)?;
    Ok(Shape::new(s.n, spec.out_channels, oh, ow))
}

/// Output indices `o` in `[lo, hi)` whose input coordinate `o * stride + tap - pad`
/// lies inside `[0, in_len)`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, tap: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if in_len + pad <= tap { 0 } else { (in_len + pad - tap).div_ceil(stride) };
    let hi = hi.min(out_len);
    (lo.min(hi), hi)
}

/// 2-D convolution (cross-correlation) with zero padding.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, TensorError> {
    let out_shape = check_args(x, weight, bias, spec)?;
    let mut out = Tensor::zeros(out_shape);
    if spec.is_depthwise() {
        depthwise_forward(x, weight, spec, &mut out);
    } else {
        gemm_forward(x, weight, spec, &mut out);
    }
    if let Some(b) = bias {
        let plane = out_shape.plane();
        let b = b.data();
        out.data_mut().chunks_mut(plane).enumerate().for_each(|(i, p)| {
            let v = b[i % out_shape.c];
            p.iter_mut().for_each(|o| *o += v);
        });
    }
    Ok(out)
}

fn depthwise_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, spec: &ConvSpec, out: &mut Tensor<T>) {
    let xs = x.shape();
    let os = out.shape();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let wdata = weight.data();
    out.data_mut().par_chunks_mut(os.plane()).enumerate().for_each(|(idx, oplane)| {
        let (n, c) = (idx / os.c, idx % os.c);
        let xplane = x.plane(n, c);
        let k = &wdata[c * kh * kw..(c + 1) * kh * kw];
        for i in 0..kh {
            let (oy0, oy1) = valid_range(os.h, xs.h, sh, ph, i);
            for j in 0..kw {
                let wv = k[i * kw + j];
                let (ox0, ox1) = valid_range(os.w, xs.w, sw, pw, j);
                if ox0 >= ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * sh + i - ph;
                    let xrow = &xplane[iy * xs.w..(iy + 1) * xs.w];
                    let orow = &mut oplane[oy * os.w + ox0..oy * os.w + ox1];
                    if sw == 1 {
                        let ix0 = ox0 + j - pw;
                        for (o, &xv) in orow.iter_mut().zip(&xrow[ix0..ix0 + (ox1 - ox0)]) {
                            *o += wv * xv;
                        }
                    } else {
                        for (t, o) in orow.iter_mut().enumerate() {
                            *o += wv * xrow[(ox0 + t) * sw + j - pw];
                        }
                    }
                }
            }
        }
    });
}

/// Unfolds one group of one batch item into a `(cin_g * kh * kw) x (oh * ow)` matrix.
fn im2col<T: Real>(item: &[T], in_hw: (usize, usize), c0: usize, cin_g: usize, spec: &ConvSpec, out_hw: (usize, usize), col: &mut [T]) {
    let (h, w) = in_hw;
    let (oh, ow) = out_hw;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    col.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..cin_g {
        let plane = &item[(c0 + ci) * h * w..(c0 + ci + 1) * h * w];
        for i in 0..kh {
            let (oy0, oy1) = valid_range(oh, h, sh, ph, i);
            for j in 0..kw {
                let (ox0, ox1) = valid_range(ow, w, sw, pw, j);
                let row = &mut col[((ci * kh + i) * kw + j) * oh * ow..((ci * kh + i) * kw + j + 1) * oh * ow];
                for oy in oy0..oy1 {
                    let iy = oy * sh + i - ph;
                    for ox in ox0..ox1 {
                        row[oy * ow + ox] = plane[iy * w + ox * sw + j - pw];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back into an item gradient.
fn col2im<T: Real>(col: &[T], in_hw: (usize, usize), c0: usize, cin_g: usize, spec: &ConvSpec, out_hw: (usize, usize), item: &mut [T]) {
    let (h, w) = in_hw;
    let (oh, ow) = out_hw;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    for ci in 0..cin_g {
        let plane = &mut item[(c0 + ci) * h * w..(c0 + ci + 1) * h * w];
        for i in 0..kh {
            let (oy0, oy1) = valid_range(oh, h, sh, ph, i);
            for j in 0..kw {
                let (ox0, ox1) = valid_range(ow, w, sw, pw, j);
                let row = &col[((ci * kh + i) * kw + j) * oh * ow..((ci * kh + i) * kw + j + 1) * oh * ow];
                for oy in oy0..oy1 {
                    let iy = oy * sh + i - ph;
                    for ox in ox0..ox1 {
                        plane[iy * w + ox * sw + j - pw] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn gemm_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, spec: &ConvSpec, out: &mut Tensor<T>) {
    let xs = x.shape();
    let os = out.shape();
    let g = spec.groups;
    let cin_g = spec.in_channels / g;
    let cout_g = spec.out_channels / g;
    let kdim = cin_g * spec.kernel.0 * spec.kernel.1;
    let p = os.plane();
    let wdata = weight.data();
    let direct = spec.kernel == (1, 1) && spec.stride == (1, 1) && spec.padding == (0, 0);
    out.data_mut().par_chunks_mut(os.c * p).enumerate().for_each(|(n, oitem)| {
        let item = x.item(n);
        let mut col = if direct { Vec::new() } else { vec![T::zero(); kdim * p] };
        for gi in 0..g {
            let cols: &[T] = if direct {
                &item[gi * cin_g * p..(gi + 1) * cin_g * p]
            } else {
                im2col(item, (xs.h, xs.w), gi * cin_g, cin_g, spec, (os.h, os.w), &mut col);
                &col
            };
            let wg = &wdata[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
            let og = &mut oitem[gi * cout_g * p..(gi + 1) * cout_g * p];
            T::gemm(cout_g, kdim, p, T::one(), wg, kdim as isize, 1, cols, p as isize, 1, T::zero(), og, p as isize, 1);
        }
    });
}

/// Gradients of a convolution with respect to its input, weight, and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

/// Reverse pass of [`conv2d`] given the upstream gradient `dy`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>, TensorError> {
    spec.validate()?;
    let out_shape = {
        let (oh, ow) = spec.output_hw(x.shape().h, x.shape().w)?;
        Shape::new(x.shape().n, spec.out_channels, oh, ow)
    };
    if dy.shape() != out_shape {
        return Err(TensorError::shape("conv2d_backward", "grad shape", out_shape, dy.shape()));
    }
    let db = spec.bias.then(|| {
        let mut db = Tensor::zeros(Shape::channels(spec.out_channels));
        let p = out_shape.plane();
        for (i, plane) in dy.data().chunks(p).enumerate() {
            let s: T = plane.iter().copied().sum();
            db.data_mut()[i % out_shape.c] += s;
        }
        db
    });
    let (dx, dw) = if spec.is_depthwise() {
        depthwise_backward(x, weight, spec, dy, need_dx)
    } else {
        gemm_backward(x, weight, spec, dy, need_dx)
    };
    Ok(ConvGrads { dx, dw, db })
}

fn depthwise_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let xs = x.shape();
    let os = dy.shape();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let wdata = weight.data();

    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(xs);
        dx.data_mut().par_chunks_mut(xs.plane()).enumerate().for_each(|(idx, dxplane)| {
            let (n, c) = (idx / xs.c, idx % xs.c);
            let gplane = dy.plane(n, c);
            let k = &wdata[c * kh * kw..(c + 1) * kh * kw];
            for i in 0..kh {
                let (oy0, oy1) = valid_range(os.h, xs.h, sh, ph, i);
                for j in 0..kw {
                    let wv = k[i * kw + j];
                    let (ox0, ox1) = valid_range(os.w, xs.w, sw, pw, j);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * sh + i - ph;
                        let grow = &gplane[oy * os.w + ox0..oy * os.w + ox1];
                        let drow = &mut dxplane[iy * xs.w..(iy + 1) * xs.w];
                        if sw == 1 {
                            let ix0 = ox0 + j - pw;
                            for (d, &g) in drow[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(grow) {
                                *d += wv * g;
                            }
                        } else {
                            for (t, &g) in grow.iter().enumerate() {
                                drow[(ox0 + t) * sw + j - pw] += wv * g;
                            }
                        }
                    }
                }
            }
        });
        dx
    });

    let mut dw = Tensor::zeros(spec.weight_shape());
    dw.data_mut().par_chunks_mut(kh * kw).enumerate().for_each(|(c, dk)| {
        for n in 0..xs.n {
            let xplane = x.plane(n, c);
            let gplane = dy.plane(n, c);
            for i in 0..kh {
                let (oy0, oy1) = valid_range(os.h, xs.h, sh, ph, i);
                for j in 0..kw {
                    let (ox0, ox1) = valid_range(os.w, xs.w, sw, pw, j);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * sh + i - ph;
                        let xrow = &xplane[iy * xs.w..(iy + 1) * xs.w];
                        let grow = &gplane[oy * os.w..(oy + 1) * os.w];
                        for ox in ox0..ox1 {
                            acc += grow[ox] * xrow[ox * sw + j - pw];
                        }
                    }
                    dk[i * kw + j] += acc;
                }
            }
        }
    });
    (dx, dw)
}

fn gemm_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let xs = x.shape();
    let os = dy.shape();
    let g = spec.groups;
    let cin_g = spec.in_channels / g;
    let cout_g = spec.out_channels / g;
    let kdim = cin_g * spec.kernel.0 * spec.kernel.1;
    let p = os.plane();
    let wdata = weight.data();
    let direct = spec.kernel == (1, 1) && spec.stride == (1, 1) && spec.padding == (0, 0);
    let wlen = spec.weight_shape().numel();

    // Per-item partial weight gradients, reduced below in batch order.
    let per_item: Vec<(Option<Vec<T>>, Vec<T>)> = (0..xs.n)
        .into_par_iter()
        .map(|n| {
            let item = x.item(n);
            let gitem = dy.item(n);
            let mut dw = vec![T::zero(); wlen];
            let mut dx_item = need_dx.then(|| vec![T::zero(); xs.c * xs.plane()]);
            let mut col = if direct { Vec::new() } else { vec![T::zero(); kdim * p] };
            let mut dcol = if direct || !need_dx { Vec::new() } else { vec![T::zero(); kdim * p] };
            for gi in 0..g {
                let cols: &[T] = if direct {
                    &item[gi * cin_g * p..(gi + 1) * cin_g * p]
                } else {
                    im2col(item, (xs.h, xs.w), gi * cin_g, cin_g, spec, (os.h, os.w), &mut col);
                    &col
                };
                let gg = &gitem[gi * cout_g * p..(gi + 1) * cout_g * p];
                let dwg = &mut dw[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
                // dW_g = dY_g * col^T
                T::gemm(cout_g, p, kdim, T::one(), gg, p as isize, 1, cols, 1, p as isize, T::zero(), dwg, kdim as isize, 1);
                if let Some(dxi) = dx_item.as_mut() {
                    let wg = &wdata[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
                    if direct {
                        let dst = &mut dxi[gi * cin_g * p..(gi + 1) * cin_g * p];
                        T::gemm(kdim, cout_g, p, T::one(), wg, 1, kdim as isize, gg, p as isize, 1, T::zero(), dst, p as isize, 1);
                    } else {
                        T::gemm(kdim, cout_g, p, T::one(), wg, 1, kdim as isize, gg, p as isize, 1, T::zero(), &mut dcol, p as isize, 1);
                        col2im(&dcol, (xs.h, xs.w), gi * cin_g, cin_g, spec, (os.h, os.w), dxi);
                    }
                }
            }
            (dx_item, dw)
        })
        .collect();

    let mut dw = Tensor::zeros(spec.weight_shape());
    let mut dx_data = need_dx.then(|| Vec::with_capacity(xs.numel()));
    for (dxi, dwi) in per_item {
        for (a, b) in dw.data_mut().iter_mut().zip(dwi) {
            *a += b;
        }
        if let (Some(all), Some(part)) = (dx_data.as_mut(), dxi) {
            all.extend(part);
        }
    }
    let dx = dx_data.map(|d| Tensor::from_vec(xs, d).expect("dx length matches input"));
    (dx, dw)
}
