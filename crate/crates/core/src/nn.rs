//! Parameter registry and the small set of layers the networks are built from.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::TensorError;
use crate::tensor::{BnState, ConvSpec, ParamId, Real, Shape, StatUpdate, Tape, Tensor, Var};

/// BN defaults: the de facto framework values.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LAYER_SCALE_INIT: f64 = 1e-2;

/// One learnable tensor.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    /// Whether decoupled weight decay applies (conv weights only).
    pub decay: bool,
}

/// Non-learnable running statistics of a batch-norm layer.
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub state: BnState<T>,
}

/// Flat, ordered registry of every parameter and buffer in a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Param { name: name.into(), value: Arc::new(value), decay });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, state: BnState<T>) -> usize {
        self.buffers.push(Buffer { name: name.into(), state });
        self.buffers.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Arc<Tensor<T>> {
        &self.params[id.0].value
    }

    /// Mutable access; clones the tensor first if a tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffer(&self, idx: usize) -> &BnState<T> {
        &self.buffers[idx].state
    }

    pub fn buffer_mut(&mut self, idx: usize) -> &mut BnState<T> {
        &mut self.buffers[idx].state
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn apply_stats(&mut self, updates: Vec<StatUpdate<T>>) {
        for u in updates {
            self.buffers[u.buffer].state = u.state;
        }
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: Arc::new(p.value.cast()), decay: p.decay })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    state: BnState {
                        running_mean: b.state.running_mean.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
                        running_var: b.state.running_var.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
                    },
                })
                .collect(),
        }
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    Normal(f64),
    /// Normal with std `sqrt(2 / fan_out)`, `fan_out = kh * kw * out / groups`.
    FanOut,
    Const(f64),
}

impl Init {
    /// Std of the per-pixel classifier weights.
    pub const CLASSIFIER_STD: f64 = 0.01;
    /// Std of the image-classification head weights.
    pub const LINEAR_STD: f64 = 0.02;

    pub fn sample<T: Real>(&self, shape: Shape, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
        match *self {
            Init::Const(v) => Tensor::full(shape, T::from_f64_lossy(v)),
            Init::TruncNormal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                let data = (0..shape.numel())
                    .map(|_| loop {
                        let v: f64 = dist.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break T::from_f64_lossy(v);
                        }
                    })
                    .collect();
                Tensor::from_vec(shape, data).expect("length matches")
            }
            Init::FanOut | Init::Normal(_) => {
                let std = match *self {
                    Init::Normal(std) => std,
                    _ => (2.0 / fan_out.max(1) as f64).sqrt(),
                };
                let dist = Normal::new(0.0, std).expect("positive std");
                let data = (0..shape.numel()).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
                Tensor::from_vec(shape, data).expect("length matches")
            }
        }
    }
}

/// Forward-pass context: the tape, the parameters, and the mode.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub training: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, training: bool) -> Self {
        Ctx { tape, store, training }
    }

    pub fn param(&mut self, id: ParamId) -> Var<T> {
        self.tape.param(id, self.store.get(id))
    }
}

/// Convolution layer with registered weight and optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, spec: ConvSpec) -> Self {
        Self::with_init(store, rng, name, spec, Init::FanOut)
    }

    pub fn with_init<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, spec: ConvSpec, init: Init) -> Self {
        let fan_out = spec.kernel.0 * spec.kernel.1 * spec.out_channels / spec.groups;
        let w = init.sample(spec.weight_shape(), fan_out, rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(Shape::channels(spec.out_channels)), false));
        Conv2d { name: name.to_string(), spec, weight, bias }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>, TensorError> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.tape.conv2d(x, &w, b.as_ref(), &self.spec)
    }
}

/// Batch normalization with learnable affine parameters.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub buffer: usize,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::ones(Shape::channels(channels)), false);
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(Shape::channels(channels)), false);
        let buffer = store.add_buffer(name, BnState::new(channels));
        BatchNorm2d { name: name.to_string(), channels, gamma, beta, buffer }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>, TensorError> {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        let (y, updated) = cx.tape.batchnorm(
            x,
            &g,
            &b,
            cx.store.buffer(self.buffer),
            T::from_f64_lossy(BN_EPS),
            T::from_f64_lossy(BN_MOMENTUM),
            cx.training,
        )?;
        if let Some(state) = updated {
            cx.tape.push_stats(StatUpdate { buffer: self.buffer, state });
        }
        Ok(y)
    }
}

/// Per-sample stochastic depth on a residual branch (training only).
pub fn drop_path<T: Real>(cx: &mut Ctx<T>, x: &Var<T>, rate: f64) -> Result<Var<T>, TensorError> {
    if !cx.training || rate <= 0.0 {
        return Ok(x.clone());
    }
    let s = x.shape();
    let keep = 1.0 - rate;
    let per_sample = s.c * s.plane();
    let mut mask = Tensor::zeros(s);
    for n in 0..s.n {
        let v = if cx.tape.rng().random::<f64>() < keep { T::from_f64_lossy(1.0 / keep) } else { T::zero() };
        mask.data_mut()[n * per_sample..(n + 1) * per_sample].iter_mut().for_each(|m| *m = v);
    }
    let mask = cx.tape.constant(mask);
    cx.tape.mul(x, &mask)
}
