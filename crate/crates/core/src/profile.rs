//! Parameter and FLOP accounting.
//!
//! FLOPs follow the 2 x multiply-accumulate convention for convolutions
//! (bias adds are not counted). Every other operation that produces values
//! (activations, gating, batch norm, pooling, upsampling, residual adds) is
//! charged 2 FLOPs per element it produces.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::blocks::ConvSpec;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Mode};
use crate::kernels::{self, Neighbor};
use crate::model::{ModelConfig, Network};
use crate::params::{BnId, ParamId, ParameterSet};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

pub const ELEMENTWISE_ROW: &str = "elementwise";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerProfile {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileReport {
    /// `(height, width)` the FLOPs were counted at, if any.
    pub resolution: Option<(usize, usize)>,
    pub layers: Vec<LayerProfile>,
    pub total_params: u64,
    pub flops: u64,
}

impl ProfileReport {
    fn from_layers(resolution: Option<(usize, usize)>, layers: Vec<LayerProfile>) -> Self {
        ProfileReport {
            resolution,
            total_params: layers.iter().map(|l| l.params).sum(),
            flops: layers.iter().map(|l| l.flops).sum(),
            layers,
        }
    }

    pub fn table(&self) -> String {
        let w = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        writeln!(s, "{:<w$}  {:>10}  {:>16}", "layer", "params", "flops").unwrap();
        for l in &self.layers {
            writeln!(s, "{:<w$}  {:>10}  {:>16}", l.name, l.params, l.flops).unwrap();
        }
        writeln!(s, "{:<w$}  {:>10}  {:>16}", "total", self.total_params, self.flops).unwrap();
        if let Some((h, wd)) = self.resolution {
            writeln!(s, "resolution {wd}x{h}: {:.3} GFLOPs, {:.4} M params", self.flops as f64 / 1e9, self.total_params as f64 / 1e6).unwrap();
        }
        s
    }
}

/// Layer name owning a parameter: the parameter name without its last
/// component (`decom.conv1.weight` belongs to `decom.conv1`).
fn layer_of(param_name: &str) -> &str {
    param_name.rsplit_once('.').map_or(param_name, |(l, _)| l)
}

fn param_rows<T: Real>(params: &ParameterSet<T>) -> (Vec<LayerProfile>, HashMap<String, usize>) {
    let mut rows: Vec<LayerProfile> = Vec::new();
    let mut index = HashMap::new();
    for info in params.infos() {
        let layer = layer_of(&info.name);
        let i = *index.entry(layer.to_string()).or_insert_with(|| {
            rows.push(LayerProfile { name: layer.to_string(), params: 0, flops: 0 });
            rows.len() - 1
        });
        rows[i].params += info.shape.numel() as u64;
    }
    (rows, index)
}

/// Exact count of every learnable scalar, grouped by layer.
pub fn count_params<T: Real>(params: &ParameterSet<T>) -> ProfileReport {
    ProfileReport::from_layers(None, param_rows(params).0)
}

/// Parameters and FLOPs of one forward pass over a single `height x width`
/// image.
pub fn count_flops(cfg: &ModelConfig, height: usize, width: usize) -> Result<ProfileReport> {
    let (net, params) = Network::build::<f32>(*cfg)?;
    let (rows, index) = param_rows(&params);
    let mut c = Counter {
        params: &params,
        rows,
        index,
        elementwise: 0,
    };
    let x = c.input(Shape::new(1, 3, height, width));
    net.forward(&mut c, &x)?;
    let mut layers = c.rows;
    layers.push(LayerProfile { name: ELEMENTWISE_ROW.into(), params: 0, flops: c.elementwise });
    Ok(ProfileReport::from_layers(Some((height, width)), layers))
}

/// Shape-only executor that tallies FLOPs instead of computing values.
struct Counter<'p> {
    params: &'p ParameterSet<f32>,
    rows: Vec<LayerProfile>,
    index: HashMap<String, usize>,
    elementwise: u64,
}

#[derive(Debug, Clone, Copy)]
struct Sym {
    shape: Shape,
    param: Option<ParamId>,
}

impl Counter<'_> {
    fn input(&self, shape: Shape) -> Sym {
        Sym { shape, param: None }
    }

    fn ew(&mut self, shape: Shape) -> Sym {
        self.elementwise += 2 * shape.numel() as u64;
        Sym { shape, param: None }
    }

    fn charge(&mut self, layer: &str, flops: u64) {
        match self.index.get(layer) {
            Some(&i) => self.rows[i].flops += flops,
            None => self.elementwise += flops,
        }
    }
}

fn scalar() -> Shape {
    Shape::new(1, 1, 1, 1)
}

impl Graph<f32> for Counter<'_> {
    type Var = Sym;

    fn shape(&self, v: &Sym) -> Shape {
        v.shape
    }

    fn mode(&self) -> Mode {
        Mode::Eval
    }

    fn constant(&mut self, t: Tensor<f32>) -> Sym {
        Sym { shape: t.shape(), param: None }
    }

    fn param(&mut self, id: ParamId) -> Sym {
        Sym { shape: self.params.info(id).shape, param: Some(id) }
    }

    fn conv2d(&mut self, x: &Sym, w: &Sym, _b: &Sym, spec: &ConvSpec) -> Result<Sym> {
        if w.shape != spec.weight_shape() {
            return Err(shape_err!("conv weight {} does not match {spec:?}", w.shape));
        }
        let out = kernels::conv_output_shape(x.shape, spec)?;
        let flops = 2 * (spec.kernel * spec.kernel * spec.in_channels) as u64 * out.numel() as u64;
        match w.param {
            Some(id) => {
                let layer = layer_of(&self.params.info(id).name).to_string();
                self.charge(&layer, flops);
            }
            None => self.elementwise += flops,
        }
        Ok(Sym { shape: out, param: None })
    }

    fn relu(&mut self, x: &Sym) -> Sym {
        self.ew(x.shape)
    }

    fn sigmoid(&mut self, x: &Sym) -> Sym {
        self.ew(x.shape)
    }

    fn tone_map(&mut self, x: &Sym) -> Sym {
        self.ew(x.shape)
    }

    fn clamp(&mut self, x: &Sym, _lo: f32, _hi: f32) -> Sym {
        self.ew(x.shape)
    }

    fn add(&mut self, a: &Sym, b: &Sym) -> Result<Sym> {
        kernels::check_broadcast(a.shape, b.shape)?;
        Ok(self.ew(a.shape))
    }

    fn sub(&mut self, a: &Sym, b: &Sym) -> Result<Sym> {
        self.add(a, b)
    }

    fn mul(&mut self, a: &Sym, b: &Sym) -> Result<Sym> {
        self.add(a, b)
    }

    fn square(&mut self, x: &Sym) -> Sym {
        self.ew(x.shape)
    }

    fn add_scalar(&mut self, x: &Sym, _s: f32) -> Sym {
        self.ew(x.shape)
    }

    fn mul_scalar(&mut self, x: &Sym, _s: f32) -> Sym {
        self.ew(x.shape)
    }

    fn concat(&mut self, parts: &[Sym]) -> Result<Sym> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?.shape;
        let mut c = 0;
        for p in parts {
            if (p.shape.n, p.shape.h, p.shape.w) != (first.n, first.h, first.w) {
                return Err(shape_err!("cannot concat {} with {first}", p.shape));
            }
            c += p.shape.c;
        }
        Ok(Sym { shape: first.with_c(c), param: None })
    }

    fn upsample(&mut self, x: &Sym, h: usize, w: usize) -> Result<Sym> {
        if h < x.shape.h || w < x.shape.w {
            return Err(shape_err!("cannot upsample {} to {h}x{w}", x.shape));
        }
        Ok(self.ew(x.shape.with_hw(h, w)))
    }

    fn global_avg_pool(&mut self, x: &Sym) -> Sym {
        self.elementwise += 2 * x.shape.numel() as u64;
        Sym { shape: x.shape.with_hw(1, 1), param: None }
    }

    fn batch_norm(&mut self, x: &Sym, _gamma: &Sym, _beta: &Sym, stats: BnId) -> Result<Sym> {
        let layer = self.params.running(stats).name.clone();
        self.charge(&layer, 2 * x.shape.numel() as u64);
        Ok(Sym { shape: x.shape, param: None })
    }

    fn max_pool2(&mut self, x: &Sym) -> Result<Sym> {
        Ok(self.ew(x.shape.with_hw(x.shape.h / 2, x.shape.w / 2)))
    }

    fn avg_pool(&mut self, x: &Sym, k: usize) -> Result<Sym> {
        Ok(self.ew(x.shape.with_hw(x.shape.h / k, x.shape.w / k)))
    }

    fn channel_mean(&mut self, x: &Sym) -> Sym {
        self.ew(x.shape.with_c(1))
    }

    fn select_channel(&mut self, x: &Sym, c: usize) -> Result<Sym> {
        if c >= x.shape.c {
            return Err(shape_err!("channel {c} out of range for {}", x.shape));
        }
        Ok(Sym { shape: x.shape.with_c(1), param: None })
    }

    fn neighbor_diff(&mut self, x: &Sym, _dir: Neighbor) -> Sym {
        self.ew(x.shape)
    }

    fn sum(&mut self, x: &Sym) -> Sym {
        self.elementwise += 2 * x.shape.numel() as u64;
        Sym { shape: scalar(), param: None }
    }

    fn mean(&mut self, x: &Sym) -> Sym {
        self.sum(x)
    }

    fn charbonnier(&mut self, a: &Sym, _b: &Sym, _eps: f32) -> Result<Sym> {
        Ok(self.sum(a))
    }

    fn mean_abs_diff(&mut self, a: &Sym, _b: &Sym) -> Result<Sym> {
        Ok(self.sum(a))
    }
}
