//! U-shaped illumination enhancer, tone-mapping head and refinement layer.
//!
//! ```text
//! [I_hat | R] (4ch) -> enc1 (b) ------------------------------------+
//!                      down1 (b, 1/2) -> enc2 ---------------+      |
//!                                       down2 (B, 1/4)       |      |
//!                                       bottleneck (B)       |      |
//!                                       up2 (b, 1/2) -- cat -+      |
//!                                       dec2 (2b -> b)              |
//!                      up1 (b, full) -------------------- cat ------+
//!                      dec1 (2b -> b) -> head (1ch) -> tone map
//! ```
//! `b` is the base width, `B` the bottleneck width.

use crate::blocks::{Conv, ConvSpec, ResSeBlock};
use crate::error::{shape_err, Result};
use crate::graph::Graph;
use crate::params::ParameterSet;
use crate::real::Real;
use crate::tensor::Tensor;

/// Enhanced illumination in [0, 1).
pub type EnhancedIllumination<T> = Tensor<T>;

#[derive(Debug, Clone)]
pub struct Enhancer {
    pub enc1_conv: Conv,
    pub enc1: ResSeBlock,
    pub down1: Conv,
    pub enc2: ResSeBlock,
    pub down2: Conv,
    pub bottleneck: ResSeBlock,
    pub up2: Conv,
    pub dec2_fuse: Conv,
    pub dec2: ResSeBlock,
    pub up1: Conv,
    pub dec1_fuse: Conv,
    pub dec1: ResSeBlock,
    pub head: Conv,
}

/// `softplus(h) / (1 + softplus(h))`: monotone, range [0, 1).
pub fn tone_map<T: Real>(h: T) -> T {
    crate::graph::fwd::tone_map(h)
}

/// Elementwise [`tone_map`] over a map of pre-activations.
pub fn tone_map_map<T: Real>(h: &Tensor<T>) -> Tensor<T> {
    h.map(tone_map)
}

impl Enhancer {
    pub fn register<T: Real>(ps: &mut ParameterSet<T>, base: usize, bottleneck: usize, se: Option<usize>) -> Result<Self> {
        let b = base;
        let big = bottleneck;
        Ok(Enhancer {
            enc1_conv: Conv::register(ps, "enhancer.enc1.conv", ConvSpec::same(4, b, 3)),
            enc1: ResSeBlock::register(ps, "enhancer.enc1", b, se)?,
            down1: Conv::register(ps, "enhancer.down1", ConvSpec::strided(b, b, 3, 2)),
            enc2: ResSeBlock::register(ps, "enhancer.enc2", b, se)?,
            down2: Conv::register(ps, "enhancer.down2", ConvSpec::strided(b, big, 3, 2)),
            bottleneck: ResSeBlock::register(ps, "enhancer.bottleneck", big, se)?,
            up2: Conv::register(ps, "enhancer.up2", ConvSpec::same(big, b, 3)),
            dec2_fuse: Conv::register(ps, "enhancer.dec2.fuse", ConvSpec::same(2 * b, b, 3)),
            dec2: ResSeBlock::register(ps, "enhancer.dec2", b, se)?,
            up1: Conv::register(ps, "enhancer.up1", ConvSpec::same(b, b, 3)),
            dec1_fuse: Conv::register(ps, "enhancer.dec1.fuse", ConvSpec::same(2 * b, b, 3)),
            dec1: ResSeBlock::register(ps, "enhancer.dec1", b, se)?,
            head: Conv::register(ps, "enhancer.head", ConvSpec::same(b, 1, 3)),
        })
    }

    /// Pre-tone-map head output.
    pub fn forward_logits<T: Real, G: Graph<T>>(&self, g: &mut G, i_hat: &G::Var, r: &G::Var) -> Result<G::Var> {
        let (si, sr) = (g.shape(i_hat), g.shape(r));
        if si.c != 1 || sr.c != 3 || (si.n, si.h, si.w) != (sr.n, sr.h, sr.w) {
            return Err(shape_err!("enhancer inputs {si} and {sr} are incompatible"));
        }
        if si.h % 4 != 0 || si.w % 4 != 0 {
            return Err(shape_err!("enhancer needs dims divisible by 4, got {}x{}", si.w, si.h));
        }
        let x = g.concat(&[i_hat.clone(), r.clone()])?;

        let e1 = self.enc1_conv.forward(g, &x)?;
        let e1 = g.relu(&e1);
        let e1 = self.enc1.forward(g, &e1)?;

        let e2 = self.down1.forward(g, &e1)?;
        let e2 = g.relu(&e2);
        let e2 = self.enc2.forward(g, &e2)?;

        let bn = self.down2.forward(g, &e2)?;
        let bn = g.relu(&bn);
        let bn = self.bottleneck.forward(g, &bn)?;

        let s2 = g.shape(&e2);
        let u2 = g.upsample(&bn, s2.h, s2.w)?;
        let u2 = self.up2.forward(g, &u2)?;
        let u2 = g.relu(&u2);
        let d2 = g.concat(&[u2, e2])?;
        let d2 = self.dec2_fuse.forward(g, &d2)?;
        let d2 = g.relu(&d2);
        let d2 = self.dec2.forward(g, &d2)?;

        let u1 = g.upsample(&d2, si.h, si.w)?;
        let u1 = self.up1.forward(g, &u1)?;
        let u1 = g.relu(&u1);
        let d1 = g.concat(&[u1, e1])?;
        let d1 = self.dec1_fuse.forward(g, &d1)?;
        let d1 = g.relu(&d1);
        let d1 = self.dec1.forward(g, &d1)?;

        self.head.forward(g, &d1)
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, i_hat: &G::Var, r: &G::Var) -> Result<G::Var> {
        let h = self.forward_logits(g, i_hat, r)?;
        Ok(g.tone_map(&h))
    }

    pub fn convs(&self) -> Vec<&Conv> {
        let mut v = vec![&self.enc1_conv];
        push_block(&mut v, &self.enc1);
        v.push(&self.down1);
        push_block(&mut v, &self.enc2);
        v.push(&self.down2);
        push_block(&mut v, &self.bottleneck);
        v.extend([&self.up2, &self.dec2_fuse]);
        push_block(&mut v, &self.dec2);
        v.extend([&self.up1, &self.dec1_fuse]);
        push_block(&mut v, &self.dec1);
        v.push(&self.head);
        v
    }
}

fn push_block<'a>(v: &mut Vec<&'a Conv>, b: &'a ResSeBlock) {
    v.extend([&b.res.conv1, &b.res.conv2]);
    if let Some(se) = &b.se {
        v.extend([&se.squeeze, &se.excite]);
    }
}

/// Residual refinement of the enhanced illumination:
/// `clamp(x + conv(ResSE(relu(conv(x)))), 0, 1)` with the upper bound just
/// below one.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub lift: Conv,
    pub block: ResSeBlock,
    pub out: Conv,
}

impl Refiner {
    pub fn register<T: Real>(ps: &mut ParameterSet<T>, width: usize, se: Option<usize>) -> Result<Self> {
        Ok(Refiner {
            lift: Conv::register(ps, "refine.lift", ConvSpec::same(1, width, 3)),
            block: ResSeBlock::register(ps, "refine.block", width, se)?,
            out: Conv::register(ps, "refine.out", ConvSpec::same(width, 1, 3)),
        })
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let s = g.shape(x);
        if s.c != 1 {
            return Err(shape_err!("refinement expects a 1-channel map, got {s}"));
        }
        let h = self.lift.forward(g, x)?;
        let h = g.relu(&h);
        let h = self.block.forward(g, &h)?;
        let corr = self.out.forward(g, &h)?;
        let y = g.add(x, &corr)?;
        Ok(g.clamp(&y, T::zero(), upper_open_bound()))
    }
}

/// Largest representable value strictly below one.
pub fn upper_open_bound<T: Real>() -> T {
    T::one() - T::epsilon() / (T::one() + T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tone_map_closed_forms() {
        assert!(tone_map(-40.0f64) < 1e-15);
        let ln2 = 2f64.ln();
        assert!((tone_map(0.0f64) - ln2 / (1.0 + ln2)).abs() < 1e-15);
        assert!((tone_map(0.0f64) - 0.4094).abs() < 1e-4);
        assert!(tone_map(1e6f64) < 1.0);
    }

    #[test]
    fn tone_map_is_strictly_monotone_on_a_grid() {
        let mut prev = tone_map(-20.0f64);
        for i in 1..=400 {
            let h = -20.0 + 40.0 * i as f64 / 400.0;
            let y = tone_map(h);
            assert!(y > prev, "not increasing at {h}");
            assert!((0.0..1.0).contains(&y));
            prev = y;
        }
    }

    #[test]
    fn open_bound_is_below_one() {
        assert!(upper_open_bound::<f32>() < 1.0);
        assert!(upper_open_bound::<f64>() < 1.0);
    }
}
