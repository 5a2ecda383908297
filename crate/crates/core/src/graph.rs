//! Execution abstraction. Network code is written once against [`Graph`] and
//! runs either eagerly (inference, intermediates dropped as soon as they go
//! out of scope) or on the recording [`Tape`](crate::autodiff::Tape).

use std::sync::Arc;

use crate::blocks::ConvSpec;
use crate::error::{shape_err, Result};
use crate::kernels::{self, Neighbor};
use crate::params::{BnId, ParamId, ParameterSet};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm normalises with batch statistics.
    Train,
    /// Batch norm uses running statistics; the forward pass is pure.
    Eval,
}

pub trait Graph<T: Real> {
    type Var: Clone;

    fn shape(&self, v: &Self::Var) -> Shape;
    fn mode(&self) -> Mode;

    fn constant(&mut self, t: Tensor<T>) -> Self::Var;
    fn param(&mut self, id: ParamId) -> Self::Var;

    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var, spec: &ConvSpec) -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var;
    /// `softplus(h) / (1 + softplus(h))`.
    fn tone_map(&mut self, x: &Self::Var) -> Self::Var;
    fn clamp(&mut self, x: &Self::Var, lo: T, hi: T) -> Self::Var;

    /// `a + b` with `b` broadcast onto `a`.
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// `a - b` with `b` broadcast onto `a`.
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// `a * b` with `b` broadcast onto `a`.
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn square(&mut self, x: &Self::Var) -> Self::Var;
    fn add_scalar(&mut self, x: &Self::Var, s: T) -> Self::Var;
    fn mul_scalar(&mut self, x: &Self::Var, s: T) -> Self::Var;

    fn concat(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;
    fn upsample(&mut self, x: &Self::Var, h: usize, w: usize) -> Result<Self::Var>;
    fn global_avg_pool(&mut self, x: &Self::Var) -> Self::Var;
    fn batch_norm(&mut self, x: &Self::Var, gamma: &Self::Var, beta: &Self::Var, stats: BnId) -> Result<Self::Var>;
    fn max_pool2(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn avg_pool(&mut self, x: &Self::Var, k: usize) -> Result<Self::Var>;
    fn channel_mean(&mut self, x: &Self::Var) -> Self::Var;
    fn select_channel(&mut self, x: &Self::Var, c: usize) -> Result<Self::Var>;
    fn neighbor_diff(&mut self, x: &Self::Var, dir: Neighbor) -> Self::Var;

    /// Sum of every element, as a `[1, 1, 1, 1]` scalar.
    fn sum(&mut self, x: &Self::Var) -> Self::Var;
    fn mean(&mut self, x: &Self::Var) -> Self::Var;
    /// `mean(sqrt((a - b)^2 + eps^2))`.
    fn charbonnier(&mut self, a: &Self::Var, b: &Self::Var, eps: T) -> Result<Self::Var>;
    /// `mean(|a - b|)`.
    fn mean_abs_diff(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
}

/// Forward computations shared by both executors.
pub(crate) mod fwd {
    use super::*;

    /// NaN-preserving, unlike `max(0)`.
    pub fn relu<T: Real>(v: T) -> T {
        if v < T::zero() { T::zero() } else { v }
    }

    /// NaN-preserving clamp.
    pub fn clamp<T: Real>(v: T, lo: T, hi: T) -> T {
        if v < lo {
            lo
        } else if v > hi {
            hi
        } else {
            v
        }
    }

    pub fn tone_map<T: Real>(h: T) -> T {
        let sp = kernels::softplus(h);
        sp / (T::one() + sp)
    }

    pub fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(shape_err!("{what}: shapes {} and {} differ", a.shape(), b.shape()));
        }
        Ok(())
    }

    pub fn charbonnier<T: Real>(a: &Tensor<T>, b: &Tensor<T>, eps: T) -> Result<T> {
        same_shape(a, b, "charbonnier")?;
        let e2 = eps * eps;
        let s: T = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| ((x - y) * (x - y) + e2).sqrt())
            .sum();
        Ok(s / T::from_usize(a.data().len()).unwrap())
    }

    pub fn mean_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
        same_shape(a, b, "mean absolute difference")?;
        let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum();
        Ok(s / T::from_usize(a.data().len()).unwrap())
    }

    pub fn select_channel<T: Real>(x: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
        let s = x.shape();
        if c >= s.c {
            return Err(shape_err!("channel {c} out of range for {s}"));
        }
        let mut out = Tensor::zeros(s.with_c(1));
        for n in 0..s.n {
            out.plane_mut(n, 0).copy_from_slice(x.plane(n, c));
        }
        Ok(out)
    }
}

/// Eager executor: values are reference-counted tensors and nothing is
/// recorded.
pub struct Eager<'p, T> {
    params: Option<&'p ParameterSet<T>>,
    mode: Mode,
    cache: Vec<Option<Arc<Tensor<T>>>>,
}

impl<'p, T: Real> Eager<'p, T> {
    pub fn new(params: &'p ParameterSet<T>) -> Self {
        Eager {
            params: Some(params),
            mode: Mode::Eval,
            cache: vec![None; params.len()],
        }
    }

    /// An executor with no bound parameters, for parameter-free computations.
    pub fn detached() -> Self {
        Eager {
            params: None,
            mode: Mode::Eval,
            cache: Vec::new(),
        }
    }

    /// Training-mode batch norm without recording gradients.
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    fn wrap(t: Tensor<T>) -> Arc<Tensor<T>> {
        Arc::new(t)
    }
}

impl<T: Real> Graph<T> for Eager<'_, T> {
    type Var = Arc<Tensor<T>>;

    fn shape(&self, v: &Self::Var) -> Shape {
        v.shape()
    }

    fn mode(&self) -> Mode {
        self.mode
    }

    fn constant(&mut self, t: Tensor<T>) -> Self::Var {
        Self::wrap(t)
    }

    fn param(&mut self, id: ParamId) -> Self::Var {
        let params = self.params.expect("executor has no bound parameters");
        self.cache[id.0]
            .get_or_insert_with(|| Arc::new(params.get(id).clone()))
            .clone()
    }

    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var, spec: &ConvSpec) -> Result<Self::Var> {
        kernels::conv2d(x, spec, w, b).map(Self::wrap)
    }

    fn relu(&mut self, x: &Self::Var) -> Self::Var {
        Self::wrap(x.map(fwd::relu))
    }

    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var {
        Self::wrap(x.map(kernels::sigmoid))
    }

    fn tone_map(&mut self, x: &Self::Var) -> Self::Var {
        Self::wrap(x.map(fwd::tone_map))
    }

    fn clamp(&mut self, x: &Self::Var, lo: T, hi: T) -> Self::Var {
        Self::wrap(x.map(|v| fwd::clamp(v, lo, hi)))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        kernels::broadcast_zip(a, b, |x, y| x + y).map(Self::wrap)
    }

    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        kernels::broadcast_zip(a, b, |x, y| x - y).map(Self::wrap)
    }

    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        kernels::broadcast_zip(a, b, |x, y| x * y).map(Self::wrap)
    }

    fn square(&mut self, x: &Self::Var) -> Self::Var {
        Self::wrap(x.map(|v| v * v))
    }

    fn add_scalar(&mut self, x: &Self::Var, s: T) -> Self::Var {
        Self::wrap(x.map(|v| v + s))
    }

    fn mul_scalar(&mut self, x: &Self::Var, s: T) -> Self::Var {
        Self::wrap(x.map(|v| v * s))
    }

    fn concat(&mut self, parts: &[Self::Var]) -> Result<Self::Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| p.as_ref()).collect();
        kernels::concat_channels(&refs).map(Self::wrap)
    }

    fn upsample(&mut self, x: &Self::Var, h: usize, w: usize) -> Result<Self::Var> {
        kernels::upsample_bilinear(x, h, w).map(Self::wrap)
    }

    fn global_avg_pool(&mut self, x: &Self::Var) -> Self::Var {
        Self::wrap(kernels::global_avg_pool(x))
    }

    fn batch_norm(&mut self, x: &Self::Var, gamma: &Self::Var, beta: &Self::Var, stats: BnId) -> Result<Self::Var> {
        match self.mode {
            Mode::Train => kernels::batch_norm_train(x, gamma, beta, BN_EPS).map(|(y, _)| Self::wrap(y)),
            Mode::Eval => {
                let params = self.params.expect("executor has no bound parameters");
                let rs = params.running(stats);
                kernels::batch_norm_eval(x, gamma, beta, &rs.mean, &rs.var, BN_EPS).map(|(y, _)| Self::wrap(y))
            }
        }
    }

    fn max_pool2(&mut self, x: &Self::Var) -> Result<Self::Var> {
        kernels::max_pool2(x).map(|(y, _)| Self::wrap(y))
    }

    fn avg_pool(&mut self, x: &Self::Var, k: usize) -> Result<Self::Var> {
        kernels::avg_pool(x, k).map(Self::wrap)
    }

    fn channel_mean(&mut self, x: &Self::Var) -> Self::Var {
        Self::wrap(kernels::channel_mean(x))
    }

    fn select_channel(&mut self, x: &Self::Var, c: usize) -> Result<Self::Var> {
        fwd::select_channel(x, c).map(Self::wrap)
    }

    fn neighbor_diff(&mut self, x: &Self::Var, dir: Neighbor) -> Self::Var {
        Self::wrap(kernels::neighbor_diff(x, dir))
    }

    fn sum(&mut self, x: &Self::Var) -> Self::Var {
        Self::wrap(Tensor::scalar(x.sum()))
    }

    fn mean(&mut self, x: &Self::Var) -> Self::Var {
        Self::wrap(Tensor::scalar(x.mean()))
    }

    fn charbonnier(&mut self, a: &Self::Var, b: &Self::Var, eps: T) -> Result<Self::Var> {
        fwd::charbonnier(a, b, eps).map(|v| Self::wrap(Tensor::scalar(v)))
    }

    fn mean_abs_diff(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        fwd::mean_abs_diff(a, b).map(|v| Self::wrap(Tensor::scalar(v)))
    }
}
