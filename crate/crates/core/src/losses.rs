//! Training objectives: perceptual feature loss, Charbonnier, the
//! zero-reference spatial/exposure/colour terms and their weighted sum.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Array, MetaValue};
use crate::blocks::ConvSpec;
use crate::error::{config_err, shape_err, Error, Result};
use crate::graph::{fwd, Eager, Graph};
use crate::kernels::Neighbor;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

pub const CHARBONNIER_EPS: f64 = 1e-3;
pub const SPATIAL_REGION: usize = 4;
pub const EXPOSURE_PATCH: usize = 16;
pub const EXPOSURE_LEVEL: f64 = 0.6;

#[derive(Debug, Clone)]
pub enum ExtractorStage<T> {
    Conv { spec: ConvSpec, weight: Tensor<T>, bias: Tensor<T> },
    Relu,
    MaxPool2,
    /// Emit the current activation as one feature layer.
    Tap,
}

/// Frozen feature mapping producing one or more feature maps per image.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    stages: Vec<ExtractorStage<T>>,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new(stages: Vec<ExtractorStage<T>>) -> Result<Self> {
        let fx = FeatureExtractor { stages };
        if fx.layer_count() == 0 {
            return Err(config_err!("feature extractor has no output layers"));
        }
        Ok(fx)
    }

    /// One layer whose features are the pixels themselves.
    pub fn identity() -> Self {
        FeatureExtractor { stages: vec![ExtractorStage::Tap] }
    }

    /// Seeded random stand-in for a pretrained network: three stride-2 3x3
    /// convolutions (8, 16, 16 channels) with ReLU, each tapped.
    pub fn surrogate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut cin = 3;
        for cout in [8, 16, 16] {
            let spec = ConvSpec::strided(cin, cout, 3, 2);
            let fan_in = (cin * 9) as f64;
            stages.push(ExtractorStage::Conv {
                spec,
                weight: Tensor::normal(spec.weight_shape(), (2.0 / fan_in).sqrt(), &mut rng),
                bias: Tensor::zeros(Shape::new(1, cout, 1, 1)),
            });
            stages.push(ExtractorStage::Relu);
            stages.push(ExtractorStage::Tap);
            cin = cout;
        }
        FeatureExtractor { stages }
    }

    pub fn stages(&self) -> &[ExtractorStage<T>] {
        &self.stages
    }

    pub fn layer_count(&self) -> usize {
        self.stages.iter().filter(|s| matches!(s, ExtractorStage::Tap)).count()
    }

    pub fn features<G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<Vec<G::Var>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.layer_count());
        for st in &self.stages {
            h = match st {
                ExtractorStage::Conv { spec, weight, bias } => {
                    let w = g.constant(weight.clone());
                    let b = g.constant(bias.clone());
                    g.conv2d(&h, &w, &b, spec)?
                }
                ExtractorStage::Relu => g.relu(&h),
                ExtractorStage::MaxPool2 => g.max_pool2(&h)?,
                ExtractorStage::Tap => {
                    out.push(h.clone());
                    continue;
                }
            };
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> FeatureExtractor<U> {
        let stages = self
            .stages
            .iter()
            .map(|s| match s {
                ExtractorStage::Conv { spec, weight, bias } => ExtractorStage::Conv {
                    spec: *spec,
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                ExtractorStage::Relu => ExtractorStage::Relu,
                ExtractorStage::MaxPool2 => ExtractorStage::MaxPool2,
                ExtractorStage::Tap => ExtractorStage::Tap,
            })
            .collect();
        FeatureExtractor { stages }
    }

    /// Serialises the stack. The `stages` meta entry lists the stage kinds
    /// (`conv`, `relu`, `pool`, `tap`) separated by commas; the j-th conv
    /// stores `conv<j>.weight` `[out, in, k, k]`, `conv<j>.bias` `[out]` and
    /// the integer meta entry `conv<j>.stride`.
    pub fn to_archive(&self) -> Archive {
        let mut ar = Archive::new();
        ar.set_meta("kind", MetaValue::Str("feature-extractor".into()));
        let mut kinds = Vec::new();
        let mut j = 0;
        for st in &self.stages {
            match st {
                ExtractorStage::Conv { spec, weight, bias } => {
                    kinds.push("conv");
                    ar.set_meta(format!("conv{j}.stride"), MetaValue::U64(spec.stride as u64));
                    let to32 = |t: &Tensor<T>| t.data().iter().map(|v| v.to_f64_lossy() as f32).collect();
                    let ws = spec.weight_shape();
                    ar.push_array(format!("conv{j}.weight"), Array { dims: vec![ws.n, ws.c, ws.h, ws.w], data: to32(weight) });
                    ar.push_array(format!("conv{j}.bias"), Array { dims: vec![spec.out_channels], data: to32(bias) });
                    j += 1;
                }
                ExtractorStage::Relu => kinds.push("relu"),
                ExtractorStage::MaxPool2 => kinds.push("pool"),
                ExtractorStage::Tap => kinds.push("tap"),
            }
        }
        ar.set_meta("stages", MetaValue::Str(kinds.join(",")));
        ar
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let mut stages = Vec::new();
        let mut j = 0;
        let mut channels: Option<usize> = Some(3);
        for kind in ar.meta_str("stages")?.split(',').map(str::trim) {
            stages.push(match kind {
                "conv" => {
                    let w = ar
                        .array(&format!("conv{j}.weight"))
                        .ok_or_else(|| Error::Format(format!("missing conv{j}.weight")))?;
                    let b = ar
                        .array(&format!("conv{j}.bias"))
                        .ok_or_else(|| Error::Format(format!("missing conv{j}.bias")))?;
                    let stride = ar.meta_u64(&format!("conv{j}.stride")).unwrap_or(1) as usize;
                    let [out, cin, k, k2] = w.dims[..] else {
                        return Err(Error::Format(format!("conv{j}.weight must have rank 4, got {:?}", w.dims)));
                    };
                    if k != k2 || b.dims != [out] || channels.is_some_and(|c| c != cin) {
                        return Err(Error::Format(format!("conv{j} has inconsistent shapes {:?} / {:?}", w.dims, b.dims)));
                    }
                    let spec = ConvSpec::strided(cin, out, k, stride);
                    spec.validate()?;
                    channels = Some(out);
                    j += 1;
                    let from32 = |d: &[f32]| d.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
                    ExtractorStage::Conv {
                        spec,
                        weight: Tensor::from_vec(spec.weight_shape(), from32(&w.data))?,
                        bias: Tensor::from_vec(Shape::new(1, out, 1, 1), from32(&b.data))?,
                    }
                }
                "relu" => ExtractorStage::Relu,
                "pool" => ExtractorStage::MaxPool2,
                "tap" => ExtractorStage::Tap,
                other => return Err(Error::Format(format!("unknown extractor stage `{other}`"))),
            });
        }
        Self::new(stages)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// `sum_l mean |phi_l(pred) - phi_l(gt)|`.
pub fn perceptual_graph<T: Real, G: Graph<T>>(
    g: &mut G,
    pred: &G::Var,
    gt: &G::Var,
    fx: &FeatureExtractor<T>,
) -> Result<G::Var> {
    same_shape(g.shape(pred), g.shape(gt), "perceptual loss")?;
    let fp = fx.features(g, pred)?;
    let fg = fx.features(g, gt)?;
    let mut total: Option<G::Var> = None;
    for (a, b) in fp.iter().zip(&fg) {
        let l = g.mean_abs_diff(a, b)?;
        total = Some(match total {
            Some(t) => g.add(&t, &l)?,
            None => l,
        });
    }
    total.ok_or_else(|| config_err!("feature extractor has no output layers"))
}

fn same_shape(a: Shape, b: Shape, what: &str) -> Result<()> {
    if a != b {
        return Err(shape_err!("{what}: shapes {a} and {b} differ"));
    }
    Ok(())
}

fn check_min_size(s: Shape, k: usize, what: &str) -> Result<()> {
    if s.h < k || s.w < k {
        return Err(config_err!("{what} needs images of at least {k}x{k}, got {}x{}", s.w, s.h));
    }
    Ok(())
}

/// Mean over 4x4 regions of the squared difference between the 4-neighbour
/// gradients of `pred` and `src`, summed over the four directions.
pub fn spatial_graph<T: Real, G: Graph<T>>(g: &mut G, pred: &G::Var, src: &G::Var) -> Result<G::Var> {
    same_shape(g.shape(pred), g.shape(src), "spatial consistency loss")?;
    check_min_size(g.shape(pred), SPATIAL_REGION, "spatial consistency loss")?;
    let pm = g.channel_mean(pred);
    let sm = g.channel_mean(src);
    let pp = g.avg_pool(&pm, SPATIAL_REGION)?;
    let sp = g.avg_pool(&sm, SPATIAL_REGION)?;
    let mut total: Option<G::Var> = None;
    for dir in Neighbor::ALL {
        let dp = g.neighbor_diff(&pp, dir);
        let ds = g.neighbor_diff(&sp, dir);
        let d = g.sub(&dp, &ds)?;
        let d = g.square(&d);
        let m = g.mean(&d);
        total = Some(match total {
            Some(t) => g.add(&t, &m)?,
            None => m,
        });
    }
    Ok(total.expect("four directions"))
}

/// Mean over 16x16 patches of `(patch mean - 0.6)^2`.
pub fn exposure_graph<T: Real, G: Graph<T>>(g: &mut G, pred: &G::Var) -> Result<G::Var> {
    check_min_size(g.shape(pred), EXPOSURE_PATCH, "exposure loss")?;
    let m = g.channel_mean(pred);
    let p = g.avg_pool(&m, EXPOSURE_PATCH)?;
    let d = g.add_scalar(&p, T::from_f64_lossy(-EXPOSURE_LEVEL));
    let d = g.square(&d);
    Ok(g.mean(&d))
}

/// `sum over channel pairs (mean_p - mean_q)^2`, averaged over the batch.
pub fn color_graph<T: Real, G: Graph<T>>(g: &mut G, pred: &G::Var) -> Result<G::Var> {
    let s = g.shape(pred);
    if s.c != 3 {
        return Err(config_err!("colour constancy loss needs 3 channels, got {s}"));
    }
    let means = g.global_avg_pool(pred);
    let ch: Vec<G::Var> = (0..3).map(|c| g.select_channel(&means, c)).collect::<Result<_>>()?;
    let mut total: Option<G::Var> = None;
    for (p, q) in [(0, 1), (0, 2), (1, 2)] {
        let d = g.sub(&ch[p], &ch[q])?;
        let d = g.square(&d);
        total = Some(match total {
            Some(t) => g.add(&t, &d)?,
            None => d,
        });
    }
    Ok(g.mean(&total.expect("three pairs")))
}

pub fn combined_graph<T: Real, G: Graph<T>>(g: &mut G, pred: &G::Var, src: &G::Var) -> Result<G::Var> {
    let spa = spatial_graph(g, pred, src)?;
    let exp = exposure_graph(g, pred)?;
    let col = color_graph(g, pred)?;
    let t = g.add(&spa, &exp)?;
    g.add(&t, &col)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    VggOnly,
    CharbonnierOnly,
    CombinedOnly,
    All,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::VggOnly, LossMode::CharbonnierOnly, LossMode::CombinedOnly, LossMode::All];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::VggOnly => "vgg_only",
            LossMode::CharbonnierOnly => "charbonnier_only",
            LossMode::CombinedOnly => "combined_only",
            LossMode::All => "all",
        }
    }

    pub fn uses_extractor(self) -> bool {
        matches!(self, LossMode::VggOnly | LossMode::All)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = LossMode::ALL.iter().map(|m| m.name()).collect();
            config_err!("unknown loss mode `{s}`; expected one of {}", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_vgg: f64,
    pub w_charbonnier: f64,
    pub w_combined: f64,
}

impl LossWeights {
    /// Unit weight for a sole loss; 0.5 on the perceptual term when all are
    /// combined.
    pub fn default_for(mode: LossMode) -> Self {
        let w_vgg = if mode == LossMode::All { 0.5 } else { 1.0 };
        LossWeights {
            w_vgg,
            w_charbonnier: 1.0,
            w_combined: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("w_vgg", self.w_vgg), ("w_charbonnier", self.w_charbonnier), ("w_combined", self.w_combined)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err!("loss weight {k} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// A complete training objective.
#[derive(Debug, Clone)]
pub struct Objective<T> {
    pub mode: LossMode,
    pub weights: LossWeights,
    pub extractor: FeatureExtractor<T>,
    pub charbonnier_eps: f64,
}

impl<T: Real> Objective<T> {
    pub fn new(mode: LossMode, weights: LossWeights, extractor: FeatureExtractor<T>) -> Result<Self> {
        weights.validate()?;
        Ok(Objective {
            mode,
            weights,
            extractor,
            charbonnier_eps: CHARBONNIER_EPS,
        })
    }

    /// Default weights for `mode` with the seeded surrogate extractor.
    pub fn with_surrogate(mode: LossMode, seed: u64) -> Self {
        Objective {
            mode,
            weights: LossWeights::default_for(mode),
            extractor: FeatureExtractor::surrogate(seed),
            charbonnier_eps: CHARBONNIER_EPS,
        }
    }

    /// Weighted loss of `pred` against `gt`; `src` is the low-light input,
    /// used by the spatial-consistency term.
    pub fn graph<G: Graph<T>>(&self, g: &mut G, pred: &G::Var, gt: &G::Var, src: &G::Var) -> Result<G::Var> {
        let w = self.weights;
        let mut terms = Vec::new();
        if self.mode.uses_extractor() {
            let l = perceptual_graph(g, pred, gt, &self.extractor)?;
            terms.push(g.mul_scalar(&l, T::from_f64_lossy(w.w_vgg)));
        }
        if matches!(self.mode, LossMode::CharbonnierOnly | LossMode::All) {
            let l = g.charbonnier(pred, gt, T::from_f64_lossy(self.charbonnier_eps))?;
            terms.push(g.mul_scalar(&l, T::from_f64_lossy(w.w_charbonnier)));
        }
        if matches!(self.mode, LossMode::CombinedOnly | LossMode::All) {
            let l = combined_graph(g, pred, src)?;
            terms.push(g.mul_scalar(&l, T::from_f64_lossy(w.w_combined)));
        }
        let mut it = terms.into_iter();
        let mut total = it.next().expect("every mode has a term");
        for t in it {
            total = g.add(&total, &t)?;
        }
        Ok(total)
    }

    pub fn eval(&self, pred: &Tensor<T>, gt: &Tensor<T>, src: &Tensor<T>) -> Result<T> {
        eager3(pred, gt, src, |g, p, t, s| self.graph(g, p, t, s))
    }
}

type EagerVar<T> = std::sync::Arc<Tensor<T>>;

fn eager1<T: Real>(a: &Tensor<T>, f: impl FnOnce(&mut Eager<'static, T>, &EagerVar<T>) -> Result<EagerVar<T>>) -> Result<T> {
    let mut g = Eager::detached();
    let a = g.constant(a.clone());
    Ok(f(&mut g, &a)?.data()[0])
}

fn eager2<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl FnOnce(&mut Eager<'static, T>, &EagerVar<T>, &EagerVar<T>) -> Result<EagerVar<T>>,
) -> Result<T> {
    let mut g = Eager::detached();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    Ok(f(&mut g, &a, &b)?.data()[0])
}

fn eager3<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    f: impl FnOnce(&mut Eager<'static, T>, &EagerVar<T>, &EagerVar<T>, &EagerVar<T>) -> Result<EagerVar<T>>,
) -> Result<T> {
    let mut g = Eager::detached();
    let (a, b, c) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(c.clone()));
    Ok(f(&mut g, &a, &b, &c)?.data()[0])
}

pub fn perceptual_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, fx: &FeatureExtractor<T>) -> Result<T> {
    eager2(pred, gt, |g, p, t| perceptual_graph(g, p, t, fx))
}

pub fn charbonnier_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, eps: T) -> Result<T> {
    fwd::charbonnier(pred, gt, eps)
}

pub fn spatial_consistency_loss<T: Real>(pred: &Tensor<T>, src: &Tensor<T>) -> Result<T> {
    eager2(pred, src, |g, p, s| spatial_graph(g, p, s))
}

pub fn exposure_loss<T: Real>(pred: &Tensor<T>) -> Result<T> {
    eager1(pred, |g, p| exposure_graph(g, p))
}

pub fn color_constancy_loss<T: Real>(pred: &Tensor<T>) -> Result<T> {
    eager1(pred, |g, p| color_graph(g, p))
}

pub fn combined_zero_dce_loss<T: Real>(pred: &Tensor<T>, src: &Tensor<T>) -> Result<T> {
    eager2(pred, src, |g, p, s| combined_graph(g, p, s))
}

pub fn total_loss<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    src: &Tensor<T>,
    weights: LossWeights,
    mode: LossMode,
    fx: &FeatureExtractor<T>,
) -> Result<T> {
    Objective::new(mode, weights, fx.clone())?.eval(pred, gt, src)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64, s: Shape) -> Tensor<f64> {
        Tensor::uniform(s, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn charbonnier_closed_forms() {
        let a = img(1, Shape::new(1, 3, 8, 8));
        assert!((charbonnier_loss(&a, &a, 1e-3).unwrap() - 1e-3).abs() < 1e-15);
        let b = a.map(|v| v + 3e-3);
        assert!((charbonnier_loss(&a, &b, 1e-3).unwrap() - 1e-5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn perceptual_identity_extractor_is_mean_l1() {
        let s = Shape::new(2, 3, 8, 8);
        let (a, b) = (img(2, s), img(3, s));
        let l = perceptual_loss(&a, &b, &FeatureExtractor::identity()).unwrap();
        let oracle = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / s.numel() as f64;
        assert!((l - oracle).abs() < 1e-14);
        assert_eq!(perceptual_loss(&a, &a, &FeatureExtractor::surrogate(5)).unwrap(), 0.0);
    }

    #[test]
    fn empty_extractor_is_config_error() {
        assert!(matches!(FeatureExtractor::<f64>::new(vec![ExtractorStage::Relu]), Err(Error::Config(_))));
    }

    #[test]
    fn zero_reference_definitional_zeros() {
        let s = Shape::new(1, 3, 32, 32);
        let a = img(4, s);
        assert_eq!(spatial_consistency_loss(&a, &a).unwrap(), 0.0);
        assert!(exposure_loss(&Tensor::full(s, 0.6)).unwrap() < 1e-30);
        let gray = Tensor::from_fn(s, |_, _, y, x| ((y * 32 + x) as f64 / 1024.0).sin().abs());
        assert_eq!(color_constancy_loss(&gray).unwrap(), 0.0);
    }

    #[test]
    fn small_images_are_config_errors() {
        let a = img(6, Shape::new(1, 3, 8, 8));
        assert!(matches!(exposure_loss(&a), Err(Error::Config(_))));
        assert!(matches!(combined_zero_dce_loss(&a, &a), Err(Error::Config(_))));
    }

    #[test]
    fn loss_modes_parse_and_weight() {
        for m in LossMode::ALL {
            assert_eq!(m.name().parse::<LossMode>().unwrap(), m);
        }
        assert!(matches!("l2".parse::<LossMode>(), Err(Error::Config(_))));
        let w = LossWeights::default_for(LossMode::All);
        assert_eq!((w.w_vgg, w.w_charbonnier, w.w_combined), (0.5, 1.0, 1.0));
    }

    #[test]
    fn all_mode_is_weighted_sum() {
        let s = Shape::new(1, 3, 16, 16);
        let (p, t, src) = (img(7, s), img(8, s), img(9, s));
        let fx = FeatureExtractor::surrogate(1);
        let w = LossWeights::default_for(LossMode::All);
        let total = total_loss(&p, &t, &src, w, LossMode::All, &fx).unwrap();
        let expect = 0.5 * perceptual_loss(&p, &t, &fx).unwrap()
            + charbonnier_loss(&p, &t, CHARBONNIER_EPS).unwrap()
            + combined_zero_dce_loss(&p, &src).unwrap();
        assert!((total - expect).abs() < 1e-12);
    }

    #[test]
    fn extractor_archive_round_trip() {
        let fx = FeatureExtractor::<f64>::surrogate(3);
        let back = FeatureExtractor::<f64>::from_archive(&fx.to_archive()).unwrap();
        assert_eq!(back.layer_count(), 3);
        let x = img(10, Shape::new(1, 3, 16, 16));
        let y = img(11, Shape::new(1, 3, 16, 16));
        let a = perceptual_loss(&x, &y, &fx.cast::<f32>().cast::<f64>()).unwrap();
        let b = perceptual_loss(&x, &y, &back).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
