//! Dense NCHW tensors, the kernels that operate on them, and a reverse-mode
//! tape for gradients.

mod conv;
mod ops;
mod tape;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvSpec};
pub use ops::{
    batchnorm2d, bilinear_resize, flip_horizontal, gelu, matmul, nearest_resize, BnOutput,
    BnState,
};
pub(crate) use ops::nearest_index;
pub use tape::{Gradients, ParamId, StatUpdate, Tape, Var};

use crate::error::TensorError;

/// Scalar element type. Implemented for `f32` (the compute default) and
/// `f64` (used for verification).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn erf(self) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

macro_rules! check_gemm_bounds {
    ($m:expr, $k:expr, $n:expr, $a:expr, $rsa:expr, $csa:expr, $b:expr, $rsb:expr, $csb:expr, $c:expr, $rsc:expr, $csc:expr) => {
        fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
            if rows == 0 || cols == 0 {
                0
            } else {
                ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
            }
        }
        assert!($rsa >= 0 && $csa >= 0 && $rsb >= 0 && $csb >= 0 && $rsc >= 0 && $csc >= 0);
        assert!(extent($m, $k, $rsa, $csa) <= $a.len(), "gemm: A out of bounds");
        assert!(extent($k, $n, $rsb, $csb) <= $b.len(), "gemm: B out of bounds");
        assert!(extent($m, $n, $rsc, $csc) <= $c.len(), "gemm: C out of bounds");
    };
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        // SAFETY: all three views were bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn erf(self) -> f32 {
        libm::erff(self)
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        // SAFETY: all three views were bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn erf(self) -> f64 {
        libm::erf(self)
    }
}

/// Batch, channel, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    /// Per-channel vector stored as `(1, C, 1, 1)`.
    pub const fn channels(c: usize) -> Self {
        Shape::new(1, c, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

/// Contiguous row-major NCHW tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        let head = &self.data[..self.data.len().min(SHOWN)];
        write!(f, "Tensor({}, {:?}", self.shape, head)?;
        if self.data.len() > SHOWN {
            write!(f, " ..")?;
        }
        write!(f, ")")
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self, TensorError> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![v] }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: impl Into<Shape>, lo: T, hi: T, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let (lo, hi) = (lo.as_f64(), hi.as_f64());
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    fn offset(&self, i: [usize; 4]) -> usize {
        let s = self.shape;
        debug_assert!(i[0] < s.n && i[1] < s.c && i[2] < s.h && i[3] < s.w);
        ((i[0] * s.c + i[1]) * s.h + i[2]) * s.w + i[3]
    }

    pub fn at(&self, i: [usize; 4]) -> T {
        self.data[self.offset(i)]
    }

    pub fn set(&mut self, i: [usize; 4], v: T) {
        let o = self.offset(i);
        self.data[o] = v;
    }

    /// The `H x W` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// All channels of sample `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Self, TensorError> {
        let shape = shape.into();
        if shape.numel() != self.numel() {
            return Err(TensorError::Reshape { from: self.shape, to: shape });
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::shape("elementwise", "shape", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::shape("accumulate", "shape", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty("concat of zero tensors"))?.shape;
        let mut c_total = 0;
        for p in parts {
            let s = p.shape;
            if s.n != first.n {
                return Err(TensorError::shape("concat", "batch", first, s));
            }
            if s.h != first.h || s.w != first.w {
                return Err(TensorError::shape("concat", "spatial", first, s));
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(first.n, c_total, first.h, first.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for p in parts {
                data.extend_from_slice(p.item(n));
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Split along the channel axis into pieces of the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Self>, TensorError> {
        let total: usize = widths.iter().sum();
        if total != self.shape.c {
            return Err(TensorError::shape(
                "split",
                "channels",
                self.shape,
                Shape::new(self.shape.n, total, self.shape.h, self.shape.w),
            ));
        }
        let plane = self.shape.plane();
        let mut out: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(w * plane * self.shape.n)).collect();
        for n in 0..self.shape.n {
            let item = self.item(n);
            let mut start = 0;
            for (buf, &w) in out.iter_mut().zip(widths) {
                buf.extend_from_slice(&item[start * plane..(start + w) * plane]);
                start += w;
            }
        }
        Ok(out
            .into_iter()
            .zip(widths)
            .map(|(data, &c)| Tensor { shape: Shape::new(self.shape.n, c, self.shape.h, self.shape.w), data })
            .collect())
    }

    /// Stack single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self, TensorError> {
        let first = items.first().ok_or(TensorError::Empty("stack of zero tensors"))?.shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(TensorError::shape("stack", "item", first, s));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: Shape::new(n, first.c, first.h, first.w), data })
    }

    /// Extract batch item `n` as a `1 x C x H x W` tensor.
    pub fn select(&self, n: usize) -> Self {
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.item(n).to_vec(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Index of the largest channel per pixel, per batch item.
    pub fn argmax_channels(&self) -> Vec<Vec<usize>> {
        let s = self.shape;
        let plane = s.plane();
        (0..s.n)
            .map(|n| {
                let item = self.item(n);
                (0..plane)
                    .map(|p| {
                        let mut best = 0;
                        let mut best_v = item[p];
                        for c in 1..s.c {
                            let v = item[c * plane + p];
                            if v > best_v {
                                best = c;
                                best_v = v;
                            }
                        }
                        best
                    })
                    .collect()
            })
            .collect()
    }
}

/// `max |a - b| / max |b|`, the error measure used throughout the test suites.
pub fn max_rel_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_error: shape mismatch");
    let scale = b.max_abs().as_f64().max(f64::MIN_POSITIVE);
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (&x, &y)| m.max((x.as_f64() - y.as_f64()).abs()));
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Tensor::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 8]).is_ok());
    }

    #[test]
    fn reshape_keeps_data_and_rejects_bad_counts() {
        let t = Tensor::<f64>::from_fn([2, 3, 2, 2], |i| (i[0] * 100 + i[1] * 10 + i[2] * 2 + i[3]) as f64);
        let r = t.reshape([2, 1, 3, 4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape([2, 3, 2, 3]).is_err());
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor::<f32>::from_fn([2, 1, 2, 3], |i| (i[0] * 7 + i[3]) as f32);
        let b = Tensor::<f32>::from_fn([2, 2, 2, 3], |i| -((i[1] * 5 + i[2]) as f32));
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 3, 2, 3));
        assert_eq!(cat.at([1, 0, 1, 2]), a.at([1, 0, 1, 2]));
        assert_eq!(cat.at([1, 2, 1, 0]), b.at([1, 1, 1, 0]));
        let parts = cat.split_channels(&[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn argmax_picks_largest_channel() {
        let t = Tensor::<f32>::from_vec([1, 3, 1, 2], vec![0.0, 5.0, 1.0, 2.0, 3.0, -1.0]).unwrap();
        assert_eq!(t.argmax_channels(), vec![vec![2, 0]]);
    }
}
