//! Decomposition network: splits a low-light image into a 3-channel
//! reflectance map and a 1-channel illumination map with two separate heads
//! over a shared trunk.

use crate::blocks::{maybe_se, Conv, ConvSpec, SEBlockConfig, SeBlock};
use crate::error::{shape_err, Result};
use crate::graph::Graph;
use crate::params::ParameterSet;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Three-channel reflectance in (0, 1).
pub type ReflectanceMap<T> = Tensor<T>;
/// Single-channel illumination in (0, 1).
pub type IlluminationMap<T> = Tensor<T>;

#[derive(Debug, Clone)]
pub struct DecomNet {
    pub conv1: Conv,
    pub conv2: Conv,
    pub se: Option<SeBlock>,
    pub head_reflectance: Conv,
    pub head_illumination: Conv,
}

/// Network input must be at least 8x8 with both sides divisible by 4.
pub fn check_network_input(s: Shape) -> Result<()> {
    if s.c != 3 {
        return Err(shape_err!("expected a 3-channel image, got {s}"));
    }
    if s.h < 8 || s.w < 8 || s.h % 4 != 0 || s.w % 4 != 0 {
        return Err(shape_err!(
            "image {}x{} must be at least 8x8 with both sides divisible by 4",
            s.w,
            s.h
        ));
    }
    Ok(())
}

impl DecomNet {
    pub fn register<T: Real>(ps: &mut ParameterSet<T>, width: usize, se_reduction: Option<usize>) -> Result<Self> {
        let se = match se_reduction {
            Some(r) => Some(SeBlock::register(ps, "decom.se", SEBlockConfig::new(width, r)?)),
            None => None,
        };
        Ok(DecomNet {
            conv1: Conv::register(ps, "decom.conv1", ConvSpec::same(3, width, 3)),
            conv2: Conv::register(ps, "decom.conv2", ConvSpec::same(width, width, 3)),
            se,
            head_reflectance: Conv::register(ps, "decom.head_r", ConvSpec::same(width, 3, 3)),
            head_illumination: Conv::register(ps, "decom.head_i", ConvSpec::same(width, 1, 3)),
        })
    }

    /// Returns `(reflectance, illumination)`.
    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, s: &G::Var) -> Result<(G::Var, G::Var)> {
        check_network_input(g.shape(s))?;
        let h = self.conv1.forward(g, s)?;
        let h = g.relu(&h);
        let h = self.conv2.forward(g, &h)?;
        let h = g.relu(&h);
        let h = maybe_se(&self.se, g, h)?;
        let r = self.head_reflectance.forward(g, &h)?;
        let r = g.sigmoid(&r);
        let i = self.head_illumination.forward(g, &h)?;
        let i = g.sigmoid(&i);
        Ok((r, i))
    }
}
