#![allow(dead_code)]

use dimlight::autodiff::{Tape, Var};
use dimlight::dataset::PairedSample;
use dimlight::graph::{Graph, Mode};
use dimlight::params::{ParamKind, ParameterSet};
use dimlight::{ModelConfig, Result, Shape, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Narrow model used wherever the full width only costs time.
pub fn tiny_model() -> ModelConfig {
    ModelConfig { base_width: 4, bottleneck_width: 8, se_reduction: 2, denoiser_depth: 1, ..ModelConfig::default() }
}

/// The fixed 96x96 pair used by the overfit and loss-zoo runs: a smooth
/// colour pattern and a darkened, gamma-bent copy of it.
pub fn overfit_pair() -> PairedSample {
    let s = Shape::new(1, 3, 96, 96);
    let high = Tensor::<f32>::from_fn(s, |_, c, y, x| {
        let (xf, yf) = (x as f32 / 96.0, y as f32 / 96.0);
        (0.45 + 0.25 * (6.0 * xf + 2.0 * c as f32).sin() * (4.0 * yf).cos() + 0.15 * yf).clamp(0.0, 1.0)
    });
    let low = high.map(|v| 0.2 * v.powf(1.3));
    PairedSample::new("overfit", low, high).expect("valid pair")
}

pub fn uniform(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, &mut rng(seed))
}

/// Kaiming weights plus small random biases and BN affine terms, so that
/// no gradient is zero by construction.
pub fn randomize(ps: &mut ParameterSet<f64>, seed: u64) {
    let mut r = rng(seed);
    ps.init_kaiming(&mut r);
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let kind = ps.info(id).kind;
        let t = ps.get_mut(id);
        for v in t.data_mut() {
            match kind {
                ParamKind::ConvBias | ParamKind::BnBeta => *v = r.random_range(-0.1..0.1),
                ParamKind::BnGamma => *v = r.random_range(0.8..1.2),
                ParamKind::ConvWeight => {}
            }
        }
    }
}

/// Denominator floor of the relative error, as a fraction of the largest
/// checked gradient magnitude. Entries whose true gradient is zero (a conv
/// bias ahead of training-mode batch norm) are judged against the
/// gradient's scale rather than against finite-difference round-off.
pub const GRAD_FLOOR_REL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
    /// Entries below the floor, compared against it instead.
    pub floored: usize,
    pub scale: f64,
}

impl GradReport {
    fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let scale = pairs.iter().map(|p| p.0.abs().max(p.1.abs())).fold(0.0, f64::max);
        let floor = GRAD_FLOOR_REL * scale;
        let mut rep = GradReport { max_rel: 0.0, checked: pairs.len(), floored: 0, scale };
        for &(fd, an) in pairs {
            let d = fd.abs().max(an.abs());
            if d < floor {
                rep.floored += 1;
            }
            rep.max_rel = rep.max_rel.max((fd - an).abs() / d.max(floor).max(f64::MIN_POSITIVE));
        }
        rep
    }
}

/// Central-difference check of `f` with respect to every parameter tensor
/// (`per_tensor` sampled entries each) and every input (`per_input`
/// entries each). Runs the tape in training mode.
pub fn grad_check<F>(params: &ParameterSet<f64>, inputs: &[Tensor<f64>], per_tensor: usize, per_input: usize, seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &ParameterSet<f64>, xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new(ps, Mode::Train);
        let vars: Vec<Var> = xs.iter().map(|x| t.input(x.clone())).collect();
        let root = f(&mut t, &vars)?;
        Ok(t.value(&root).data()[0])
    };
    let (pgrads, igrads) = {
        let mut t = Tape::new(params, Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
        let root = f(&mut t, &vars)?;
        let g = t.backward(root)?;
        let ig: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, x)| g.of(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        (g.params(params.len()), ig)
    };
    let mut r = rng(seed);
    let mut pairs = Vec::new();
    let mut record = |fd: f64, an: f64| pairs.push((fd, an));
    for id in params.ids() {
        let n = params.get(id).data().len();
        for i in sample(&mut r, n, per_tensor.min(n)) {
            let mut p = params.clone();
            p.get_mut(id).data_mut()[i] += FD_STEP;
            let up = eval(&p, inputs)?;
            p.get_mut(id).data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&p, inputs)?;
            let an = pgrads[id.0].as_ref().map_or(0.0, |g| g.data()[i]);
            record((up - down) / (2.0 * FD_STEP), an);
        }
    }
    for (k, x) in inputs.iter().enumerate() {
        let n = x.data().len();
        for i in sample(&mut r, n, per_input.min(n)) {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += FD_STEP;
            let up = eval(params, &xs)?;
            xs[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(params, &xs)?;
            record((up - down) / (2.0 * FD_STEP), igrads[k].data()[i]);
        }
    }
    Ok(GradReport::from_pairs(&pairs))
}

/// `sum(x * w)` for a fixed random `w`: a scalar whose gradient with
/// respect to `x` is dense.
pub fn weighted_sum(t: &mut Tape<'_, f64>, x: &Var, seed: u64) -> Result<Var> {
    let w = t.constant(uniform(t.shape(x), -1.0, 1.0, seed));
    let p = t.mul(x, &w)?;
    Ok(t.sum(&p))
}
