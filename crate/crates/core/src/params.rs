//! Named, ordered parameter storage.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Index of a batch-norm running-statistics buffer pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BnId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
}

#[derive(Debug, Clone)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Shape,
}

#[derive(Debug, Clone)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ParameterSet<T> {
    infos: Vec<ParamInfo>,
    values: Vec<Tensor<T>>,
    running: Vec<RunningStats<T>>,
}

impl<T: Real> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            infos: Vec::new(),
            values: Vec::new(),
            running: Vec::new(),
        }
    }

    /// Registers a zero-initialised parameter.
    pub fn register(&mut self, name: impl Into<String>, kind: ParamKind, shape: Shape) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.infos.push(ParamInfo { name, kind, shape });
        self.values.push(Tensor::zeros(shape));
        ParamId(self.values.len() - 1)
    }

    pub fn register_running(&mut self, name: impl Into<String>, channels: usize) -> BnId {
        self.running.push(RunningStats {
            name: name.into(),
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        BnId(self.running.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id.0]
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let want = self.infos[id.0].shape;
        if value.shape() != want {
            return Err(shape_err!(
                "parameter {} expects {want}, got {}",
                self.infos[id.0].name,
                value.shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.infos.iter().position(|i| i.name == name).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn running(&self, id: BnId) -> &RunningStats<T> {
        &self.running[id.0]
    }

    pub fn running_mut(&mut self, id: BnId) -> &mut RunningStats<T> {
        &mut self.running[id.0]
    }

    pub fn running_all(&self) -> &[RunningStats<T>] {
        &self.running
    }

    /// Exponential moving update of running statistics (PyTorch convention).
    pub fn update_running(&mut self, id: BnId, batch_mean: &[T], batch_var: &[T], momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        let rs = &mut self.running[id.0];
        for (r, &b) in rs.mean.iter_mut().zip(batch_mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in rs.var.iter_mut().zip(batch_var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.infos.iter().map(|i| i.shape.numel()).sum()
    }

    /// Kaiming-normal conv kernels (fan-in), zero biases, unit BN gammas.
    pub fn init_kaiming(&mut self, rng: &mut impl Rng) {
        for (info, value) in self.infos.iter().zip(self.values.iter_mut()) {
            *value = match info.kind {
                ParamKind::ConvWeight => {
                    let s = info.shape;
                    let fan_in = (s.c * s.h * s.w) as f64;
                    Tensor::normal(s, (2.0 / fan_in).sqrt(), rng)
                }
                ParamKind::ConvBias | ParamKind::BnBeta => Tensor::zeros(info.shape),
                ParamKind::BnGamma => Tensor::full(info.shape, T::one()),
            };
        }
        for rs in &mut self.running {
            rs.mean.fill(T::zero());
            rs.var.fill(T::one());
        }
    }

    /// Same layout with every value converted to another scalar type.
    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        ParameterSet {
            infos: self.infos.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    name: r.name.clone(),
                    mean: conv(&r.mean),
                    var: conv(&r.var),
                })
                .collect(),
        }
    }

    /// Zero every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut hit = 0;
        for (info, value) in self.infos.iter().zip(self.values.iter_mut()) {
            if info.name.starts_with(prefix) {
                value.data_mut().fill(T::zero());
                hit += 1;
            }
        }
        hit
    }
}
