//! Model configuration, ablation variants and the full enhancement pipeline.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::Conv;
use crate::dark_region::DarkRegionNet;
use crate::decom::DecomNet;
use crate::enhancer::{Enhancer, Refiner};
use crate::error::{config_err, shape_err, Error, Result};
use crate::graph::{Eager, Graph};
use crate::params::ParameterSet;
use crate::real::Real;
use crate::reconstruction::{reconstruct_graph, Denoiser};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_width: usize,
    pub bottleneck_width: usize,
    pub se_reduction: usize,
    pub denoiser_depth: usize,
    pub use_seblock: bool,
    pub use_dark_region: bool,
    pub use_residual_add: bool,
    pub use_refinement: bool,
    pub use_denoiser: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 32,
            bottleneck_width: 64,
            se_reduction: 8,
            denoiser_depth: 4,
            use_seblock: true,
            use_dark_region: true,
            use_residual_add: true,
            use_refinement: true,
            use_denoiser: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.bottleneck_width == 0 || self.se_reduction == 0 {
            return Err(config_err!("model widths and SE reduction must be positive"));
        }
        if self.bottleneck_width < self.base_width {
            return Err(config_err!(
                "bottleneck_width {} is smaller than base_width {}",
                self.bottleneck_width,
                self.base_width
            ));
        }
        if self.use_seblock {
            for w in [self.base_width, self.bottleneck_width] {
                if w % self.se_reduction != 0 {
                    return Err(config_err!("width {w} is not divisible by se_reduction {}", self.se_reduction));
                }
            }
        }
        Ok(())
    }

    pub fn se(&self) -> Option<usize> {
        self.use_seblock.then_some(self.se_reduction)
    }

    pub fn with_variant(self, v: Variant) -> Self {
        let mut c = self;
        match v {
            Variant::Baseline => {}
            Variant::NoSeBlock => c.use_seblock = false,
            Variant::NoDarkRegion => c.use_dark_region = false,
            Variant::NoResidual => c.use_residual_add = false,
            Variant::NoRefinement => c.use_refinement = false,
            Variant::NoDenoiser => c.use_denoiser = false,
        }
        c
    }
}

/// One pipeline component switched off, as in the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    NoSeBlock,
    NoDarkRegion,
    NoResidual,
    NoRefinement,
    NoDenoiser,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::NoSeBlock,
        Variant::NoDarkRegion,
        Variant::NoResidual,
        Variant::NoRefinement,
        Variant::NoDenoiser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::NoSeBlock => "no-seblock",
            Variant::NoDarkRegion => "no-dark",
            Variant::NoResidual => "no-residual",
            Variant::NoRefinement => "no-refine",
            Variant::NoDenoiser => "no-denoise",
        }
    }

    /// Whether disabling this component removes parameters.
    pub fn removes_parameters(self) -> bool {
        !matches!(self, Variant::Baseline | Variant::NoResidual)
    }

    /// Reference (PSNR dB, SSIM) for the full-scale component ablation on
    /// the synthetic LOL-v2 split.
    pub fn reference_scores(self) -> (f64, f64) {
        match self {
            Variant::Baseline => (24.91, 0.912),
            Variant::NoSeBlock => (20.85, 0.875),
            Variant::NoDarkRegion => (21.75, 0.890),
            Variant::NoResidual => (23.06, 0.902),
            Variant::NoRefinement => (22.13, 0.882),
            Variant::NoDenoiser => (21.90, 0.880),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                config_err!("unknown variant `{s}`; expected one of {}", names.join(", "))
            })
    }
}

/// The full enhancement network.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub decom: DecomNet,
    pub dark: Option<DarkRegionNet>,
    pub enhancer: Enhancer,
    pub refiner: Option<Refiner>,
    pub denoiser: Option<Denoiser>,
}

/// Every intermediate of one pipeline pass.
pub struct Stages<V> {
    pub reflectance: V,
    pub illumination: V,
    /// Equals `illumination` when dark-region detection is disabled.
    pub attended: V,
    pub enhanced: V,
    /// Equals `enhanced` when refinement is disabled.
    pub refined: V,
    pub reconstructed: V,
    pub output: V,
}

impl Network {
    /// Builds the network and its zero-initialised parameter layout.
    pub fn build<T: Real>(cfg: ModelConfig) -> Result<(Self, ParameterSet<T>)> {
        cfg.validate()?;
        let mut ps = ParameterSet::new();
        let se = cfg.se();
        let b = cfg.base_width;
        let decom = DecomNet::register(&mut ps, b, se)?;
        let dark = cfg.use_dark_region.then(|| DarkRegionNet::register(&mut ps, b));
        let enhancer = Enhancer::register(&mut ps, b, cfg.bottleneck_width, se)?;
        let refiner = match cfg.use_refinement {
            true => Some(Refiner::register(&mut ps, b, se)?),
            false => None,
        };
        let denoiser = match cfg.use_denoiser {
            true => Some(Denoiser::register(&mut ps, b, cfg.denoiser_depth, se)?),
            false => None,
        };
        Ok((
            Network {
                cfg,
                decom,
                dark,
                enhancer,
                refiner,
                denoiser,
            },
            ps,
        ))
    }

    /// Builds the network with seeded Kaiming initialisation.
    pub fn init<T: Real>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParameterSet<T>)> {
        let (net, mut ps) = Self::build(cfg)?;
        ps.init_kaiming(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((net, ps))
    }

    pub fn stages<T: Real, G: Graph<T>>(&self, g: &mut G, s: &G::Var) -> Result<Stages<G::Var>> {
        let sv = g.shape(s);
        if sv.c != 3 {
            return Err(shape_err!("pipeline expects a 3-channel image, got {sv}"));
        }
        let (r, i) = self.decom.forward(g, s)?;
        let attended = match &self.dark {
            Some(d) => d.forward(g, &i)?,
            None => i.clone(),
        };
        let enhanced = self.enhancer.forward(g, &attended, &r)?;
        let refined = match &self.refiner {
            Some(rf) => rf.forward(g, &enhanced)?,
            None => enhanced.clone(),
        };
        let residual = self.cfg.use_residual_add.then_some(s);
        let reconstructed = reconstruct_graph(g, &refined, &r, residual)?;
        let output = match &self.denoiser {
            Some(d) => d.forward(g, &reconstructed)?,
            None => g.clamp(&reconstructed, T::zero(), T::one()),
        };
        Ok(Stages {
            reflectance: r,
            illumination: i,
            attended,
            enhanced,
            refined,
            reconstructed,
            output,
        })
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, s: &G::Var) -> Result<G::Var> {
        Ok(self.stages(g, s)?.output)
    }

    /// Inference-mode enhancement of a batch of images.
    pub fn enhance<T: Real>(&self, params: &ParameterSet<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.enhance_stages(params, s)?.output)
    }

    /// Inference-mode pass returning every intermediate as an owned tensor.
    pub fn enhance_stages<T: Real>(&self, params: &ParameterSet<T>, s: &Tensor<T>) -> Result<Stages<Tensor<T>>> {
        let mut g = Eager::new(params);
        let x = g.constant(s.clone());
        let st = self.stages(&mut g, &x)?;
        let own = |v: Arc<Tensor<T>>| Arc::unwrap_or_clone(v);
        Ok(Stages {
            reflectance: own(st.reflectance),
            illumination: own(st.illumination),
            attended: own(st.attended),
            enhanced: own(st.enhanced),
            refined: own(st.refined),
            reconstructed: own(st.reconstructed),
            output: own(st.output),
        })
    }

    /// Every convolution in declaration order, with its owning stage name.
    pub fn convs(&self) -> Vec<(&'static str, &Conv)> {
        let mut out = Vec::new();
        let d = &self.decom;
        for c in [&d.conv1, &d.conv2] {
            out.push(("decom", c));
        }
        if let Some(se) = &d.se {
            out.push(("decom", &se.squeeze));
            out.push(("decom", &se.excite));
        }
        out.push(("decom", &d.head_reflectance));
        out.push(("decom", &d.head_illumination));
        if let Some(dk) = &self.dark {
            for c in [&dk.lift, &dk.path3, &dk.attn3, &dk.path5, &dk.attn5, &dk.fuse] {
                out.push(("dark", c));
            }
        }
        for c in self.enhancer.convs() {
            out.push(("enhancer", c));
        }
        if let Some(rf) = &self.refiner {
            out.push(("refine", &rf.lift));
            out.push(("refine", &rf.block.res.conv1));
            out.push(("refine", &rf.block.res.conv2));
            if let Some(se) = &rf.block.se {
                out.push(("refine", &se.squeeze));
                out.push(("refine", &se.excite));
            }
            out.push(("refine", &rf.out));
        }
        if let Some(dn) = &self.denoiser {
            out.push(("denoise", &dn.head));
            for st in &dn.stages {
                out.push(("denoise", &st.conv));
                if let Some(se) = &st.se {
                    out.push(("denoise", &se.squeeze));
                    out.push(("denoise", &se.excite));
                }
            }
            out.push(("denoise", &dn.tail));
        }
        out
    }
}
