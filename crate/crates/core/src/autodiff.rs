//! Reverse-mode differentiation over a recorded tape.

use std::collections::HashMap;

use crate::blocks::ConvSpec;
use crate::error::{shape_err, Result};
use crate::graph::{fwd, Graph, Mode, BN_EPS};
use crate::kernels::{self, BatchNormCache, Neighbor};
use crate::params::{BnId, ParamId, ParameterSet};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { x: usize, w: usize, b: usize, spec: ConvSpec },
    Relu(usize),
    Sigmoid(usize),
    ToneMap(usize),
    Clamp { x: usize, lo: T, hi: T },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Square(usize),
    AddScalar(usize),
    MulScalar(usize, T),
    Concat(Vec<usize>),
    Upsample(usize),
    Gap(usize),
    BatchNormTrain { x: usize, gamma: usize, beta: usize, cache: BatchNormCache<T> },
    BatchNormEval { x: usize, gamma: usize, beta: usize, mean: Vec<T>, inv_std: Vec<T> },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    AvgPool { x: usize, k: usize },
    ChannelMean(usize),
    SelectChannel { x: usize, c: usize },
    NeighborDiff { x: usize, dir: Neighbor },
    Sum(usize),
    Mean(usize),
    Charbonnier { a: usize, b: usize, eps: T },
    MeanAbsDiff { a: usize, b: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by training-mode batch norm during a forward
/// pass, to be folded into the running statistics by the caller.
#[derive(Debug, Clone)]
pub struct ObservedStats<T> {
    pub id: BnId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<'p, T> {
    params: Option<&'p ParameterSet<T>>,
    mode: Mode,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, usize>,
    observed: Vec<ObservedStats<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParameterSet<T>, mode: Mode) -> Self {
        Tape {
            params: Some(params),
            mode,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            observed: Vec::new(),
        }
    }

    pub fn detached(mode: Mode) -> Self {
        Tape {
            params: None,
            mode,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            observed: Vec::new(),
        }
    }

    /// A leaf whose gradient is tracked (e.g. an image being optimised).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn observed_stats(&self) -> &[ObservedStats<T>] {
        &self.observed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.rg(&[x.0]);
        self.push(value, op, rg)
    }

    fn v(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rs = self.nodes[root.0].value.shape();
        if rs.numel() != 1 {
            return Err(shape_err!("backward needs a scalar root, got {rs}"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rs, T::one()));
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            leaf: leaf_grads,
            params: self.param_vars.iter().map(|(&p, &n)| (p, n)).collect(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |idx: usize, t: Tensor<T>| {
            if !self.nodes[idx].requires_grad {
                return;
            }
            match &mut grads[idx] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |idx: usize| &self.nodes[idx].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let need_x = self.nodes[*x].requires_grad;
                let cg = kernels::conv2d_backward(val(*x), spec, val(*w), g, need_x);
                if need_x {
                    acc(*x, cg.input);
                }
                acc(*w, cg.weight);
                let bs = val(*b).shape();
                acc(*b, cg.bias.reshape(bs).expect("bias numel checked at forward"));
            }
            Op::Relu(x) => {
                let gx = g.zip_map(&node.value, |gv, y| if y > T::zero() { gv } else { T::zero() });
                acc(*x, gx.unwrap());
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y));
                acc(*x, gx.unwrap());
            }
            Op::ToneMap(x) => {
                let gx = g.zip_map(val(*x), |gv, h| {
                    let sp = kernels::softplus(h);
                    let d = T::one() + sp;
                    gv * kernels::sigmoid(h) / (d * d)
                });
                acc(*x, gx.unwrap());
            }
            Op::Clamp { x, lo, hi } => {
                let gx = g.zip_map(val(*x), |gv, v| if v > *lo && v < *hi { gv } else { T::zero() });
                acc(*x, gx.unwrap());
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, kernels::reduce_to(g, val(*b).shape()));
            }
            Op::Sub { a, b } => {
                acc(*a, g.clone());
                acc(*b, kernels::reduce_to(g, val(*b).shape()).scale(-T::one()));
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    acc(*a, kernels::broadcast_zip(g, val(*b), |gv, bv| gv * bv).unwrap());
                }
                if self.nodes[*b].requires_grad {
                    let ga = g.zip_map(val(*a), |gv, av| gv * av).unwrap();
                    acc(*b, kernels::reduce_to(&ga, val(*b).shape()));
                }
            }
            Op::Square(x) => {
                let two = T::one() + T::one();
                acc(*x, g.zip_map(val(*x), |gv, v| two * v * gv).unwrap());
            }
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::MulScalar(x, s) => acc(*x, g.scale(*s)),
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| val(p).shape().c).collect();
                for (p, gp) in parts.iter().zip(kernels::split_channels(g, &widths)) {
                    acc(*p, gp);
                }
            }
            Op::Upsample(x) => acc(*x, kernels::upsample_bilinear_backward(g, val(*x).shape())),
            Op::Gap(x) => acc(*x, kernels::global_avg_pool_backward(g, val(*x).shape())),
            Op::BatchNormTrain { x, gamma, beta, cache } => {
                let (gx, gg, gb) = kernels::batch_norm_train_backward(g, val(*gamma), cache);
                acc(*x, gx);
                acc(*gamma, gg.reshape(val(*gamma).shape()).unwrap());
                acc(*beta, gb.reshape(val(*beta).shape()).unwrap());
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let s = g.shape();
                let gam = val(*gamma).data();
                let xv = val(*x);
                let mut gx = Tensor::zeros(s);
                let mut gg = Tensor::zeros(val(*gamma).shape());
                let mut gb = Tensor::zeros(val(*beta).shape());
                for n in 0..s.n {
                    for c in 0..s.c {
                        let k = gam[c] * inv_std[c];
                        let gp = g.plane(n, c);
                        for (d, &gv) in gx.plane_mut(n, c).iter_mut().zip(gp) {
                            *d = gv * k;
                        }
                        let (mut sg, mut sgx) = (T::zero(), T::zero());
                        for (&gv, &v) in gp.iter().zip(xv.plane(n, c)) {
                            sg += gv;
                            sgx += gv * (v - mean[c]) * inv_std[c];
                        }
                        gb.data_mut()[c] += sg;
                        gg.data_mut()[c] += sgx;
                    }
                }
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                acc(*x, gx);
            }
            Op::AvgPool { x, k } => acc(*x, kernels::avg_pool_backward(g, val(*x).shape(), *k)),
            Op::ChannelMean(x) => {
                let s = val(*x).shape();
                let inv = T::one() / T::from_usize(s.c).unwrap();
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    let gp: Vec<T> = g.plane(n, 0).iter().map(|&v| v * inv).collect();
                    for c in 0..s.c {
                        gx.plane_mut(n, c).copy_from_slice(&gp);
                    }
                }
                acc(*x, gx);
            }
            Op::SelectChannel { x, c } => {
                let s = val(*x).shape();
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    gx.plane_mut(n, *c).copy_from_slice(g.plane(n, 0));
                }
                acc(*x, gx);
            }
            Op::NeighborDiff { x, dir } => acc(*x, kernels::neighbor_diff_backward(g, *dir)),
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.data()[0])),
            Op::Mean(x) => {
                let s = val(*x).shape();
                let v = g.data()[0] / T::from_usize(s.numel()).unwrap();
                acc(*x, Tensor::full(s, v));
            }
            Op::Charbonnier { a, b, eps } => {
                let (va, vb) = (val(*a), val(*b));
                let k = g.data()[0] / T::from_usize(va.data().len()).unwrap();
                let e2 = *eps * *eps;
                let ga = va.zip_map(vb, |x, y| k * (x - y) / ((x - y) * (x - y) + e2).sqrt()).unwrap();
                acc(*b, ga.scale(-T::one()));
                acc(*a, ga);
            }
            Op::MeanAbsDiff { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let k = g.data()[0] / T::from_usize(va.data().len()).unwrap();
                let ga = va
                    .zip_map(vb, |x, y| {
                        let d = x - y;
                        if d > T::zero() {
                            k
                        } else if d < T::zero() {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap();
                acc(*b, ga.scale(-T::one()));
                acc(*a, ga);
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    leaf: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with [`Tape::input`] or [`Graph::param`].
    /// `None` when the root does not depend on it.
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients indexed by parameter id (`None` for unused parameters).
    pub fn params(&self, count: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..count).map(|_| None).collect();
        for &(p, n) in &self.params {
            out[p.0] = self.leaf[n].clone();
        }
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, n)| self.leaf[n].as_ref())
    }
}

impl<T: Real> Graph<T> for Tape<'_, T> {
    type Var = Var;

    fn shape(&self, v: &Var) -> Shape {
        self.v(*v).shape()
    }

    fn mode(&self) -> Mode {
        self.mode
    }

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(&n) = self.param_vars.get(&id) {
            return Var(n);
        }
        let params = self.params.expect("tape has no bound parameters");
        let v = self.push(params.get(id).clone(), Op::Leaf, true);
        self.param_vars.insert(id, v.0);
        v
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, spec: &ConvSpec) -> Result<Var> {
        let y = kernels::conv2d(self.v(*x), spec, self.v(*w), self.v(*b))?;
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(y, Op::Conv { x: x.0, w: w.0, b: b.0, spec: *spec }, rg))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let y = self.v(*x).map(fwd::relu);
        self.unary(*x, y, Op::Relu(x.0))
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let y = self.v(*x).map(kernels::sigmoid);
        self.unary(*x, y, Op::Sigmoid(x.0))
    }

    fn tone_map(&mut self, x: &Var) -> Var {
        let y = self.v(*x).map(fwd::tone_map);
        self.unary(*x, y, Op::ToneMap(x.0))
    }

    fn clamp(&mut self, x: &Var, lo: T, hi: T) -> Var {
        let y = self.v(*x).map(|v| fwd::clamp(v, lo, hi));
        self.unary(*x, y, Op::Clamp { x: x.0, lo, hi })
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::broadcast_zip(self.v(*a), self.v(*b), |p, q| p + q)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(y, Op::Add { a: a.0, b: b.0 }, rg))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::broadcast_zip(self.v(*a), self.v(*b), |p, q| p - q)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(y, Op::Sub { a: a.0, b: b.0 }, rg))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::broadcast_zip(self.v(*a), self.v(*b), |p, q| p * q)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(y, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    fn square(&mut self, x: &Var) -> Var {
        let y = self.v(*x).map(|v| v * v);
        self.unary(*x, y, Op::Square(x.0))
    }

    fn add_scalar(&mut self, x: &Var, s: T) -> Var {
        let y = self.v(*x).map(|v| v + s);
        self.unary(*x, y, Op::AddScalar(x.0))
    }

    fn mul_scalar(&mut self, x: &Var, s: T) -> Var {
        let y = self.v(*x).scale(s);
        self.unary(*x, y, Op::MulScalar(x.0, s))
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.v(*p)).collect();
        let y = kernels::concat_channels(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(y, Op::Concat(ids), rg))
    }

    fn upsample(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let y = kernels::upsample_bilinear(self.v(*x), h, w)?;
        Ok(self.unary(*x, y, Op::Upsample(x.0)))
    }

    fn global_avg_pool(&mut self, x: &Var) -> Var {
        let y = kernels::global_avg_pool(self.v(*x));
        self.unary(*x, y, Op::Gap(x.0))
    }

    fn batch_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, stats: BnId) -> Result<Var> {
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        match self.mode {
            Mode::Train => {
                let (y, cache) = kernels::batch_norm_train(self.v(*x), self.v(*gamma), self.v(*beta), BN_EPS)?;
                self.observed.push(ObservedStats {
                    id: stats,
                    mean: cache.mean.clone(),
                    var: cache.var_unbiased.clone(),
                });
                Ok(self.push(y, Op::BatchNormTrain { x: x.0, gamma: gamma.0, beta: beta.0, cache }, rg))
            }
            Mode::Eval => {
                let params = self.params.expect("tape has no bound parameters");
                let rs = params.running(stats);
                let (y, inv_std) =
                    kernels::batch_norm_eval(self.v(*x), self.v(*gamma), self.v(*beta), &rs.mean, &rs.var, BN_EPS)?;
                let mean = rs.mean.clone();
                Ok(self.push(y, Op::BatchNormEval { x: x.0, gamma: gamma.0, beta: beta.0, mean, inv_std }, rg))
            }
        }
    }

    fn max_pool2(&mut self, x: &Var) -> Result<Var> {
        let (y, argmax) = kernels::max_pool2(self.v(*x))?;
        Ok(self.unary(*x, y, Op::MaxPool2 { x: x.0, argmax }))
    }

    fn avg_pool(&mut self, x: &Var, k: usize) -> Result<Var> {
        let y = kernels::avg_pool(self.v(*x), k)?;
        Ok(self.unary(*x, y, Op::AvgPool { x: x.0, k }))
    }

    fn channel_mean(&mut self, x: &Var) -> Var {
        let y = kernels::channel_mean(self.v(*x));
        self.unary(*x, y, Op::ChannelMean(x.0))
    }

    fn select_channel(&mut self, x: &Var, c: usize) -> Result<Var> {
        let y = fwd::select_channel(self.v(*x), c)?;
        Ok(self.unary(*x, y, Op::SelectChannel { x: x.0, c }))
    }

    fn neighbor_diff(&mut self, x: &Var, dir: Neighbor) -> Var {
        let y = kernels::neighbor_diff(self.v(*x), dir);
        self.unary(*x, y, Op::NeighborDiff { x: x.0, dir })
    }

    fn sum(&mut self, x: &Var) -> Var {
        let y = Tensor::scalar(self.v(*x).sum());
        self.unary(*x, y, Op::Sum(x.0))
    }

    fn mean(&mut self, x: &Var) -> Var {
        let y = Tensor::scalar(self.v(*x).mean());
        self.unary(*x, y, Op::Mean(x.0))
    }

    fn charbonnier(&mut self, a: &Var, b: &Var, eps: T) -> Result<Var> {
        let y = Tensor::scalar(fwd::charbonnier(self.v(*a), self.v(*b), eps)?);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(y, Op::Charbonnier { a: a.0, b: b.0, eps }, rg))
    }

    fn mean_abs_diff(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = Tensor::scalar(fwd::mean_abs_diff(self.v(*a), self.v(*b))?);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(y, Op::MeanAbsDiff { a: a.0, b: b.0 }, rg))
    }
}

impl<T: Real> Tape<'_, T> {
    /// Shape of a recorded node.
    pub fn value(&self, v: &Var) -> &Tensor<T> {
        self.v(*v)
    }
}
