//! Recombination of enhanced illumination with reflectance, and the residual
//! denoiser that produces the final image.

use std::sync::Arc;

use crate::blocks::{maybe_se, Conv, ConvSpec, SEBlockConfig, SeBlock};
use crate::error::{shape_err, Result};
use crate::graph::{Eager, Graph};
use crate::params::{BnId, ParamId, ParamKind, ParameterSet};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Final enhanced image, clamped to [0, 1].
pub type EnhancedImage<T> = Tensor<T>;

/// `i_bar * r (+ s)`, with `i_bar` broadcast over the colour channels. The
/// result is not clamped.
pub fn reconstruct_graph<T: Real, G: Graph<T>>(
    g: &mut G,
    i_bar: &G::Var,
    r: &G::Var,
    s: Option<&G::Var>,
) -> Result<G::Var> {
    let (si, sr) = (g.shape(i_bar), g.shape(r));
    if si.c != 1 || sr.c != 3 || (si.n, si.h, si.w) != (sr.n, sr.h, sr.w) {
        return Err(shape_err!("cannot recombine illumination {si} with reflectance {sr}"));
    }
    let prod = g.mul(r, i_bar)?;
    match s {
        Some(s) => {
            if g.shape(s) != sr {
                return Err(shape_err!("source image {} does not match reflectance {sr}", g.shape(s)));
            }
            g.add(&prod, s)
        }
        None => Ok(prod),
    }
}

/// `out[c] = i_bar * r[c] + s[c]`.
pub fn reconstruct<T: Real>(i_bar: &Tensor<T>, r: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Eager::detached();
    let (i, r, s) = (g.constant(i_bar.clone()), g.constant(r.clone()), g.constant(s.clone()));
    let y = reconstruct_graph(&mut g, &i, &r, Some(&s))?;
    Ok(Arc::unwrap_or_clone(y))
}

#[derive(Debug, Clone)]
pub struct DenoiseStage {
    pub conv: Conv,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnId,
    pub se: Option<SeBlock>,
}

/// Residual denoiser: head conv, `depth` x [conv, batch norm, ReLU, SE],
/// tail conv; the input is added back and the sum clamped to [0, 1].
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub head: Conv,
    pub stages: Vec<DenoiseStage>,
    pub tail: Conv,
}

impl Denoiser {
    pub fn register<T: Real>(ps: &mut ParameterSet<T>, width: usize, depth: usize, se: Option<usize>) -> Result<Self> {
        let head = Conv::register(ps, "denoise.head", ConvSpec::same(3, width, 3));
        let mut stages = Vec::with_capacity(depth);
        for i in 0..depth {
            let name = format!("denoise.stage{i}");
            let conv = Conv::register(ps, &format!("{name}.conv"), ConvSpec::same(width, width, 3));
            let cs = Shape::new(1, width, 1, 1);
            let gamma = ps.register(format!("{name}.bn.gamma"), ParamKind::BnGamma, cs);
            let beta = ps.register(format!("{name}.bn.beta"), ParamKind::BnBeta, cs);
            let stats = ps.register_running(format!("{name}.bn"), width);
            let se = match se {
                Some(r) => Some(SeBlock::register(ps, &format!("{name}.se"), SEBlockConfig::new(width, r)?)),
                None => None,
            };
            stages.push(DenoiseStage { conv, gamma, beta, stats, se });
        }
        let tail = Conv::register(ps, "denoise.tail", ConvSpec::same(width, 3, 3));
        Ok(Denoiser { head, stages, tail })
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let s = g.shape(x);
        if s.c != 3 {
            return Err(shape_err!("denoiser expects 3 channels, got {s}"));
        }
        let h = self.head.forward(g, x)?;
        let mut h = g.relu(&h);
        for st in &self.stages {
            let y = st.conv.forward(g, &h)?;
            let gamma = g.param(st.gamma);
            let beta = g.param(st.beta);
            let y = g.batch_norm(&y, &gamma, &beta, st.stats)?;
            let y = g.relu(&y);
            h = maybe_se(&st.se, g, y)?;
        }
        let corr = self.tail.forward(g, &h)?;
        let y = g.add(x, &corr)?;
        Ok(g.clamp(&y, T::zero(), T::one()))
    }
}

/// Inference-mode denoising of a pre-denoise image.
pub fn denoise<T: Real>(net: &Denoiser, params: &ParameterSet<T>, x: &Tensor<T>) -> Result<EnhancedImage<T>> {
    let mut g = Eager::new(params);
    let xv = g.constant(x.clone());
    let y = net.forward(&mut g, &xv)?;
    Ok(Arc::unwrap_or_clone(y))
}
