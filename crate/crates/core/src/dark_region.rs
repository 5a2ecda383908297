//! Dark-region attention over the illumination map.
//!
//! The map is lifted to `width` channels, then processed by two stride-2
//! pathways (3x3 and 5x5). Each pathway is gated by its own sigmoid spatial
//! attention map, upsampled back to full resolution and concatenated with the
//! lifted map (`3 * width` channels). A 1x1 convolution and a sigmoid reduce
//! the result to a single channel.

use crate::blocks::{Conv, ConvSpec};
use crate::error::{shape_err, Result};
use crate::graph::{Eager, Graph};
use crate::params::ParameterSet;
use crate::real::Real;
use crate::tensor::{FeatureMap, Tensor};

/// Re-weighted illumination in (0, 1).
pub type AttendedIllumination<T> = Tensor<T>;

#[derive(Debug, Clone)]
pub struct DarkRegionNet {
    pub width: usize,
    pub lift: Conv,
    pub path3: Conv,
    pub attn3: Conv,
    pub path5: Conv,
    pub attn5: Conv,
    pub fuse: Conv,
}

/// Intermediate values of one detection pass.
pub struct DarkRegionTrace<V> {
    pub attention3: V,
    pub attention5: V,
    pub concat: V,
    pub output: V,
}

impl DarkRegionNet {
    pub fn register<T: Real>(ps: &mut ParameterSet<T>, width: usize) -> Self {
        DarkRegionNet {
            width,
            lift: Conv::register(ps, "dark.lift", ConvSpec::same(1, width, 3)),
            path3: Conv::register(ps, "dark.path3", ConvSpec::strided(width, width, 3, 2)),
            attn3: Conv::register(ps, "dark.attn3", ConvSpec::same(width, 1, 1)),
            path5: Conv::register(ps, "dark.path5", ConvSpec::strided(width, width, 5, 2)),
            attn5: Conv::register(ps, "dark.attn5", ConvSpec::same(width, 1, 1)),
            fuse: Conv::register(ps, "dark.fuse", ConvSpec::same(3 * width, 1, 1)),
        }
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, illum: &G::Var) -> Result<G::Var> {
        Ok(self.trace(g, illum)?.output)
    }

    pub fn trace<T: Real, G: Graph<T>>(&self, g: &mut G, illum: &G::Var) -> Result<DarkRegionTrace<G::Var>> {
        let s = g.shape(illum);
        if s.c != 1 {
            return Err(shape_err!("dark-region detection expects 1 channel, got {s}"));
        }
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(shape_err!("dark-region detection needs even dims, got {}x{}", s.w, s.h));
        }
        let lifted = self.lift.forward(g, illum)?;
        let lifted = g.relu(&lifted);
        let (up3, attention3) = self.pathway(g, &lifted, &self.path3, &self.attn3, s.h, s.w)?;
        let (up5, attention5) = self.pathway(g, &lifted, &self.path5, &self.attn5, s.h, s.w)?;
        let concat = g.concat(&[lifted, up3, up5])?;
        let out = self.fuse.forward(g, &concat)?;
        let output = g.sigmoid(&out);
        Ok(DarkRegionTrace {
            attention3,
            attention5,
            concat,
            output,
        })
    }

    fn pathway<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        lifted: &G::Var,
        conv: &Conv,
        attn: &Conv,
        h: usize,
        w: usize,
    ) -> Result<(G::Var, G::Var)> {
        let f = conv.forward(g, lifted)?;
        let f = g.relu(&f);
        let a = attn.forward(g, &f)?;
        let a = g.sigmoid(&a);
        let gated = g.mul(&f, &a)?;
        Ok((g.upsample(&gated, h, w)?, a))
    }
}

/// Attended illumination for a batch of illumination maps.
pub fn detect<T: Real>(net: &DarkRegionNet, params: &ParameterSet<T>, illum: &Tensor<T>) -> Result<AttendedIllumination<T>> {
    let mut g = Eager::new(params);
    let x = g.constant(illum.clone());
    let y = net.forward(&mut g, &x)?;
    Ok(std::sync::Arc::unwrap_or_clone(y))
}

/// Align-corners-false bilinear upsampling of a feature map.
pub fn bilinear_upsample<T: Real>(x: &FeatureMap<T>, height: usize, width: usize) -> Result<FeatureMap<T>> {
    crate::kernels::upsample_bilinear(x, height, width)
}
