//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every op pushes one node holding what its adjoint needs. `backward` walks
//! the nodes in exact reverse order, summing contributions into each input.
//! A tape built with [`Tape::no_grad`] records nothing and keeps no
//! intermediates alive, which is what inference uses.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::conv::{conv2d, conv2d_backward, ConvSpec};
use super::ops::{self, BnState};
use super::{Real, Shape, Tensor};
use crate::error::TensorError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a learnable tensor in a model's parameter registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A value produced on a tape.
#[derive(Clone, Debug)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    node: Option<usize>,
    tape: u64,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn into_value(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|v| (*v).clone())
    }
}

/// New running statistics emitted by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub buffer: usize,
    pub state: BnState<T>,
}

enum Op<T> {
    Leaf,
    Conv { x: Arc<Tensor<T>>, w: Arc<Tensor<T>>, spec: ConvSpec },
    BatchNorm { xhat: Tensor<T>, inv_std: Vec<T>, gamma: Vec<T>, training: bool },
    Gelu { x: Arc<Tensor<T>> },
    Relu { x: Arc<Tensor<T>> },
    Add,
    Sub,
    Mul { a: Arc<Tensor<T>>, b: Arc<Tensor<T>> },
    Div { a: Arc<Tensor<T>>, b: Arc<Tensor<T>> },
    AddScalar,
    MulScalar(T),
    ChannelScale { x: Arc<Tensor<T>>, s: Arc<Tensor<T>> },
    Resize { in_shape: Shape, align_corners: bool },
    Concat { widths: Vec<usize> },
    Reshape { in_shape: Shape },
    Matmul { a: Arc<Tensor<T>>, b: Arc<Tensor<T>>, ta: bool, tb: bool },
    MeanSpatial { in_shape: Shape },
    Sum { in_shape: Shape },
    /// Gradient of the loss w.r.t. the logits, already divided by the pixel count.
    CrossEntropy { dlogits: Tensor<T> },
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<usize>,
    needs_grad: bool,
}

/// Ordered operation record for one forward pass.
pub struct Tape<T> {
    id: u64,
    recording: bool,
    nodes: Vec<Node<T>>,
    param_leaves: HashMap<ParamId, usize>,
    stats: Vec<StatUpdate<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            stats: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// A tape that evaluates ops without recording them.
    pub fn no_grad() -> Self {
        Tape { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reseeds the generator used by stochastic layers (drop-path).
    pub fn seed_rng(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn push_stats(&mut self, update: StatUpdate<T>) {
        self.stats.push(update);
    }

    pub fn take_stats(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stats)
    }

    fn leaf(&mut self, value: Arc<Tensor<T>>, needs_grad: bool) -> Var<T> {
        let node = self.recording.then(|| {
            self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), needs_grad });
            self.nodes.len() - 1
        });
        Var { value, node, tape: self.id }
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var<T> {
        self.leaf(Arc::new(value), false)
    }

    /// An input whose gradient `backward` will report.
    pub fn input(&mut self, value: Tensor<T>) -> Var<T> {
        self.leaf(Arc::new(value), true)
    }

    /// A learnable parameter. Repeated requests for the same id share one leaf,
    /// so multiple uses accumulate into a single gradient.
    pub fn param(&mut self, id: ParamId, value: &Arc<Tensor<T>>) -> Var<T> {
        if let Some(&node) = self.param_leaves.get(&id) {
            return Var { value: Arc::clone(value), node: Some(node), tape: self.id };
        }
        let var = self.leaf(Arc::clone(value), true);
        if let Some(node) = var.node {
            self.param_leaves.insert(id, node);
        }
        var
    }

    fn check(&self, vars: &[&Var<T>]) -> Result<(), TensorError> {
        if vars.iter().all(|v| v.tape == self.id) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[&Var<T>]) -> Var<T> {
        let ids: Vec<usize> = inputs.iter().filter_map(|v| v.node).collect();
        let needs_grad = self.recording && ids.iter().any(|&i| self.nodes[i].needs_grad);
        let node = (self.recording && needs_grad).then(|| {
            self.nodes.push(Node { op, inputs: inputs.iter().map(|v| v.node.unwrap_or(usize::MAX)).collect(), needs_grad });
            self.nodes.len() - 1
        });
        Var { value: Arc::new(value), node, tape: self.id }
    }

    pub fn conv2d(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, spec: &ConvSpec) -> Result<Var<T>, TensorError> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.check(&inputs)?;
        let y = conv2d(&x.value, &w.value, b.map(|b| b.value()), spec)?;
        let op = Op::Conv { x: Arc::clone(&x.value), w: Arc::clone(&w.value), spec: *spec };
        Ok(self.push(y, op, &inputs))
    }

    /// Batch norm with per-channel `gamma`/`beta` shaped `(1, C, 1, 1)`.
    /// Returns the updated running statistics in training mode.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        state: &BnState<T>,
        eps: T,
        momentum: T,
        training: bool,
    ) -> Result<(Var<T>, Option<BnState<T>>), TensorError> {
        self.check(&[x, gamma, beta])?;
        let out = ops::batchnorm2d(&x.value, gamma.value.data(), beta.value.data(), state, eps, training, momentum)?;
        let op = Op::BatchNorm { xhat: out.xhat, inv_std: out.inv_std, gamma: gamma.value.data().to_vec(), training };
        Ok((self.push(out.y, op, &[x, gamma, beta]), out.updated))
    }

    pub fn gelu(&mut self, x: &Var<T>) -> Result<Var<T>, TensorError> {
        self.check(&[x])?;
        let y = ops::gelu(&x.value);
        Ok(self.push(y, Op::Gelu { x: Arc::clone(&x.value) }, &[x]))
    }

    pub fn relu(&mut self, x: &Var<T>) -> Result<Var<T>, TensorError> {
        self.check(&[x])?;
        let y = x.value.map(|v| v.max(T::zero()));
        Ok(self.push(y, Op::Relu { x: Arc::clone(&x.value) }, &[x]))
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>, TensorError> {
        self.check(&[a, b])?;
        let y = a.value.add(&b.value)?;
        Ok(self.push(y, Op::Add, &[a, b]))
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>, TensorError> {
        self.check(&[a, b])?;
        let y = a.value.zip_map(&b.value, |x, y| x - y)?;
        Ok(self.push(y, Op::Sub, &[a, b]))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>, TensorError> {
        self.check(&[a, b])?;
        let y = a.value.mul(&b.value)?;
        Ok(self.push(y, Op::Mul { a: Arc::clone(&a.value), b: Arc::clone(&b.value) }, &[a, b]))
    }

    pub fn div(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>, TensorError> {
        self.check(&[a, b])?;
        let y = a.value.zip_map(&b.value, |x, y| x / y)?;
        Ok(self.push(y, Op::Div { a: Arc::clone(&a.value), b: Arc::clone(&b.value) }, &[a, b]))
    }

    pub fn add_scalar(&mut self, x: &Var<T>, k: T) -> Result<Var<T>, TensorError> {
        self.check(&[x])?;
        let y = x.value.map(|v| v + k);
        Ok(self.push(y, Op::AddScalar, &[x]))
    }

    pub fn mul_scalar(&mut self, x: &Var<T>, k: T) -> Result<Var<T>, TensorError> {
        self.check(&[x])?;
        let y = x.value.scale(k);
        Ok(self.push(y, Op::MulScalar(k), &[x]))
    }

    /// Multiplies every channel of `x` by the matching entry of `s` (`(1, C, 1, 1)`).
    pub fn channel_scale(&mut self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>, TensorError> {
        self.check(&[x, s])?;
        let xs = x.shape();
        if s.shape() != Shape::channels(xs.c) {
            return Err(TensorError::shape("channel_scale", "scale shape", Shape::channels(xs.c), s.shape()));
        }
        let sv = s.value.data();
        let mut y = (*x.value).clone();
        for (i, plane) in y.data_mut().chunks_mut(xs.plane()).enumerate() {
            let k = sv[i % xs.c];
            plane.iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.push(y, Op::ChannelScale { x: Arc::clone(&x.value), s: Arc::clone(&s.value) }, &[x, s]))
    }

    pub fn resize(&mut self, x: &Var<T>, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var<T>, TensorError> {
        self.check(&[x])?;
        let y = ops::bilinear_resize(&x.value, out_h, out_w, align_corners)?;
        Ok(self.push(y, Op::Resize { in_shape: x.shape(), align_corners }, &[x]))
    }

    pub fn concat(&mut self, parts: &[&Var<T>]) -> Result<Var<T>, TensorError> {
        self.check(parts)?;
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let y = Tensor::concat_channels(&values)?;
        let widths = parts.iter().map(|p| p.shape().c).collect();
        Ok(self.push(y, Op::Concat { widths }, parts))
    }

    pub fn reshape(&mut self, x: &Var<T>, shape: Shape) -> Result<Var<T>, TensorError> {
        self.check(&[x])?;
        let y = x.value.reshape(shape)?;
        Ok(self.push(y, Op::Reshape { in_shape: x.shape() }, &[x]))
    }

    /// Batched product of `(N, 1, R, C)` matrices with optional transposes.
    pub fn matmul(&mut self, a: &Var<T>, b: &Var<T>, ta: bool, tb: bool) -> Result<Var<T>, TensorError> {
        self.check(&[a, b])?;
        let y = ops::matmul(&a.value, &b.value, ta, tb)?;
        Ok(self.push(y, Op::Matmul { a: Arc::clone(&a.value), b: Arc::clone(&b.value), ta, tb }, &[a, b]))
    }

    /// Global average pool to `(N, C, 1, 1)`.
    pub fn mean_spatial(&mut self, x: &Var<T>) -> Result<Var<T>, TensorError> {
        self.check(&[x])?;
        let s = x.shape();
        if s.plane() == 0 {
            return Err(TensorError::invalid("mean_spatial", "empty spatial extent"));
        }
        let denom = T::from_usize(s.plane()).unwrap();
        let data = x.value.data().chunks(s.plane()).map(|p| p.iter().copied().sum::<T>() / denom).collect();
        let y = Tensor::from_vec([s.n, s.c, 1, 1], data)?;
        Ok(self.push(y, Op::MeanSpatial { in_shape: s }, &[x]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: &Var<T>) -> Result<Var<T>, TensorError> {
        self.check(&[x])?;
        let y = Tensor::scalar(x.value.sum());
        Ok(self.push(y, Op::Sum { in_shape: x.shape() }, &[x]))
    }

    pub fn mean(&mut self, x: &Var<T>) -> Result<Var<T>, TensorError> {
        let n = x.value.numel();
        if n == 0 {
            return Err(TensorError::Empty("mean of an empty tensor"));
        }
        let s = self.sum(x)?;
        self.mul_scalar(&s, T::one() / T::from_usize(n).unwrap())
    }

    /// Softmax cross-entropy averaged over pixels whose label is not `ignore`.
    /// `labels` holds `N * H * W` class indices in NHW order.
    pub fn cross_entropy(&mut self, logits: &Var<T>, labels: &[u8], ignore: u8) -> Result<Var<T>, TensorError> {
        self.check(&[logits])?;
        let s = logits.shape();
        let plane = s.plane();
        if labels.len() != s.n * plane {
            return Err(TensorError::shape("cross_entropy", "label count", s.n * plane, labels.len()));
        }
        let mut dlogits = Tensor::zeros(s);
        let mut total = 0.0f64;
        let mut count = 0usize;
        let mut scratch = vec![T::zero(); s.c];
        for n in 0..s.n {
            let item = logits.value.item(n);
            for p in 0..plane {
                let label = labels[n * plane + p];
                if label == ignore {
                    continue;
                }
                let label = label as usize;
                if label >= s.c {
                    return Err(TensorError::invalid("cross_entropy", format!("label {label} out of range for {} classes", s.c)));
                }
                let mut max = T::neg_infinity();
                for c in 0..s.c {
                    scratch[c] = item[c * plane + p];
                    max = max.max(scratch[c]);
                }
                let mut z = T::zero();
                for v in scratch.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                total += (z.ln() + max - item[label * plane + p]).as_f64();
                let d = dlogits.data_mut();
                let base = n * s.c * plane + p;
                for c in 0..s.c {
                    d[base + c * plane] = scratch[c] / z;
                }
                d[base + label * plane] -= T::one();
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::invalid("cross_entropy", "every pixel is ignored"));
        }
        let inv = T::one() / T::from_usize(count).unwrap();
        dlogits.data_mut().iter_mut().for_each(|v| *v *= inv);
        let y = Tensor::scalar(T::from_f64_lossy(total / count as f64));
        Ok(self.push(y, Op::CrossEntropy { dlogits }, &[logits]))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that needs one.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>, TensorError> {
        if loss.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        let root = loss.node.ok_or(TensorError::ForeignVar)?;
        if loss.value.numel() != 1 {
            return Err(TensorError::NotScalar(loss.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(loss.shape()));
        for idx in (0..=root).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contribs = self.adjoint(node, &g)?;
            for (input, contrib) in node.inputs.iter().zip(contribs) {
                let (Some(c), true) = (contrib, *input != usize::MAX) else { continue };
                if !self.nodes[*input].needs_grad {
                    continue;
                }
                match &mut grads[*input] {
                    Some(acc) => acc.add_assign(&c)?,
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { tape: self.id, grads, params: self.param_leaves.clone() })
    }

    fn wants(&self, node: &Node<T>, i: usize) -> bool {
        node.inputs.get(i).is_some_and(|&n| n != usize::MAX && self.nodes[n].needs_grad)
    }

    fn adjoint(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>, TensorError> {
        let zip = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| g.zip_map(a, f);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv { x, w, spec } => {
                let grads = conv2d_backward(x, w, spec, g, self.wants(node, 0))?;
                vec![grads.dx, Some(grads.dw), grads.db]
            }
            Op::BatchNorm { xhat, inv_std, gamma, training } => {
                let (dx, dgamma, dbeta) = ops::batchnorm2d_backward(xhat, inv_std, gamma, g, *training);
                let c = gamma.len();
                vec![
                    Some(dx),
                    Some(Tensor::from_vec(Shape::channels(c), dgamma)?),
                    Some(Tensor::from_vec(Shape::channels(c), dbeta)?),
                ]
            }
            Op::Gelu { x } => vec![Some(zip(x, &|g, x| g * ops::gelu_grad(x))?)],
            Op::Relu { x } => vec![Some(zip(x, &|g, x| if x > T::zero() { g } else { T::zero() })?)],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.scale(-T::one()))],
            Op::Mul { a, b } => vec![
                self.wants(node, 0).then(|| zip(b, &|g, b| g * b)).transpose()?,
                self.wants(node, 1).then(|| zip(a, &|g, a| g * a)).transpose()?,
            ],
            Op::Div { a, b } => vec![
                self.wants(node, 0).then(|| zip(b, &|g, b| g / b)).transpose()?,
                if self.wants(node, 1) {
                    let ab = a.zip_map(b, |a, b| a / (b * b))?;
                    Some(zip(&ab, &|g, q| -g * q)?)
                } else {
                    None
                },
            ],
            Op::AddScalar => vec![Some(g.clone())],
            Op::MulScalar(k) => vec![Some(g.scale(*k))],
            Op::ChannelScale { x, s } => {
                let xs = x.shape();
                let plane = xs.plane();
                let sv = s.data();
                let mut dx = g.clone();
                for (i, p) in dx.data_mut().chunks_mut(plane).enumerate() {
                    let k = sv[i % xs.c];
                    p.iter_mut().for_each(|v| *v *= k);
                }
                let mut ds = Tensor::zeros(s.shape());
                for (i, (gp, xp)) in g.data().chunks(plane).zip(x.data().chunks(plane)).enumerate() {
                    let acc: T = gp.iter().zip(xp).map(|(&a, &b)| a * b).sum();
                    ds.data_mut()[i % xs.c] += acc;
                }
                vec![Some(dx), Some(ds)]
            }
            Op::Resize { in_shape, align_corners } => {
                vec![Some(ops::bilinear_resize_backward(g, *in_shape, *align_corners))]
            }
            Op::Concat { widths } => g.split_channels(widths)?.into_iter().map(Some).collect(),
            Op::Reshape { in_shape } => vec![Some(g.reshape(*in_shape)?)],
            Op::Matmul { a, b, ta, tb } => {
                let da = if self.wants(node, 0) {
                    Some(if *ta { ops::matmul(b, g, *tb, true)? } else { ops::matmul(g, b, false, !*tb)? })
                } else {
                    None
                };
                let db = if self.wants(node, 1) {
                    Some(if *tb { ops::matmul(g, a, true, *ta)? } else { ops::matmul(a, g, !*ta, false)? })
                } else {
                    None
                };
                vec![da, db]
            }
            Op::MeanSpatial { in_shape } => {
                let denom = T::from_usize(in_shape.plane()).unwrap();
                let mut dx = Tensor::zeros(*in_shape);
                for (p, &gv) in dx.data_mut().chunks_mut(in_shape.plane()).zip(g.data()) {
                    p.iter_mut().for_each(|v| *v = gv / denom);
                }
                vec![Some(dx)]
            }
            Op::Sum { in_shape } => vec![Some(Tensor::full(*in_shape, g.data()[0]))],
            Op::CrossEntropy { dlogits } => vec![Some(dlogits.scale(g.data()[0]))],
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf created with [`Tape::input`] or [`Tape::param`].
    /// `None` when the loss does not depend on it.
    pub fn wrt(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        var.node.and_then(|n| self.grads.get(n)).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&n| self.grads[n].as_ref())
    }

    /// Gradient for `id`, or zeros of `shape` when the parameter went unused.
    pub fn param_or_zeros(&self, id: ParamId, shape: Shape) -> Tensor<T> {
        self.param(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
