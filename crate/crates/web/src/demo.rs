//! Plain-Rust logic behind the browser page; the wasm bindings in `lib.rs`
//! only marshal arguments.

use dimlight::archive::Archive;
use dimlight::checkpoint::Checkpoint;
use dimlight::enhancer::tone_map;
use dimlight::image_io::{crop, pad_reflect, quantize};
use dimlight::metrics;
use dimlight::profile::count_flops;
use dimlight::schedule::{lr_at, ScheduleConfig};
use dimlight::{Error, ModelConfig, Network, ParameterSet, Result, Shape, Tensor};

/// Component switches exposed as checkboxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flags {
    pub seblock: bool,
    pub dark_region: bool,
    pub residual_add: bool,
    pub refinement: bool,
    pub denoiser: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags { seblock: true, dark_region: true, residual_add: true, refinement: true, denoiser: true }
    }
}

impl Flags {
    pub fn apply(self, base: ModelConfig) -> ModelConfig {
        ModelConfig {
            use_seblock: self.seblock,
            use_dark_region: self.dark_region,
            use_residual_add: self.residual_add,
            use_refinement: self.refinement,
            use_denoiser: self.denoiser,
            ..base
        }
    }
}

/// `n + 1` samples of the tone-map head over `[-range, range]`.
pub fn tone_curve(n: usize, range: f64) -> Vec<(f64, f64)> {
    let n = n.max(1);
    (0..=n)
        .map(|i| {
            let h = -range + 2.0 * range * i as f64 / n as f64;
            (h, tone_map(h))
        })
        .collect()
}

/// Learning rate for every epoch `0..=total_epochs`.
pub fn schedule_curve(cfg: &ScheduleConfig) -> Result<Vec<f64>> {
    (0..=cfg.total_epochs).map(|e| lr_at(e, cfg)).collect()
}

/// Params, FLOPs and the per-layer table for a configuration.
pub fn profile(flags: Flags, width: usize, height: usize) -> Result<(u64, u64, String)> {
    let r = count_flops(&flags.apply(ModelConfig::default()), height, width)?;
    Ok((r.total_params, r.flops, r.table()))
}

fn check_rgba(width: usize, height: usize, rgba: &[u8]) -> Result<()> {
    if width == 0 || height == 0 || rgba.len() != width * height * 4 {
        return Err(Error::Shape(format!("{} bytes is not a {width}x{height} RGBA image", rgba.len())));
    }
    Ok(())
}

pub fn rgba_to_tensor(width: usize, height: usize, rgba: &[u8]) -> Result<Tensor<f32>> {
    check_rgba(width, height, rgba)?;
    Ok(Tensor::from_fn(Shape::new(1, 3, height, width), |_, c, y, x| rgba[(y * width + x) * 4 + c] as f32 / 255.0))
}

/// Sample 0 as opaque RGBA; single-channel maps become gray.
pub fn tensor_to_rgba(t: &Tensor<f32>) -> Vec<u8> {
    let s = t.shape();
    let mut out = Vec::with_capacity(s.h * s.w * 4);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push(quantize(t.at(0, c.min(s.c - 1), y, x)));
            }
            out.push(255);
        }
    }
    out
}

pub fn compare(width: usize, height: usize, a: &[u8], b: &[u8]) -> Result<(f64, f64)> {
    let (a, b) = (rgba_to_tensor(width, height, a)?, rgba_to_tensor(width, height, b)?);
    Ok((metrics::psnr(&a, &b)?, metrics::ssim(&a, &b)?))
}

/// A model held by the page: either seeded or loaded from a checkpoint.
pub struct Demo {
    base: ModelConfig,
    base_params: ParameterSet<f32>,
    net: Network,
    params: ParameterSet<f32>,
    pub source: String,
}

/// Copies every parameter and running statistic of `src` whose name also
/// exists in `dst`. Disabling a component only removes parameters, so a
/// trained model keeps its weights for what remains.
fn copy_by_name(src: &ParameterSet<f32>, dst: &mut ParameterSet<f32>) -> Result<()> {
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let name = dst.info(id).name.clone();
        if let Some(s) = src.find(&name) {
            dst.set(id, src.get(s).clone())?;
        }
    }
    for i in 0..dst.running_all().len() {
        let id = dimlight::params::BnId(i);
        let name = dst.running(id).name.clone();
        if let Some(r) = src.running_all().iter().find(|r| r.name == name) {
            *dst.running_mut(id) = r.clone();
        }
    }
    Ok(())
}

impl Demo {
    pub fn seeded(seed: u64) -> Result<Self> {
        let cfg = ModelConfig::default();
        let (net, params) = Network::init::<f32>(cfg, seed)?;
        Ok(Demo { base: cfg, base_params: params.clone(), net, params, source: format!("untrained, seed {seed}") })
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = Checkpoint::from_archive(&Archive::from_bytes(bytes)?)?;
        let (net, _) = Network::build::<f32>(ck.model)?;
        Ok(Demo {
            base: ck.model,
            base_params: ck.params.clone(),
            net,
            params: ck.params,
            source: format!("checkpoint, epoch {}", ck.epoch),
        })
    }

    /// Rebuilds the model with some components switched off. Components
    /// the loaded model never had stay off.
    pub fn set_flags(&mut self, flags: Flags) -> Result<()> {
        let b = self.base;
        let want = Flags {
            seblock: flags.seblock && b.use_seblock,
            dark_region: flags.dark_region && b.use_dark_region,
            residual_add: flags.residual_add && b.use_residual_add,
            refinement: flags.refinement && b.use_refinement,
            denoiser: flags.denoiser && b.use_denoiser,
        };
        let (net, mut params) = Network::build::<f32>(want.apply(b))?;
        copy_by_name(&self.base_params, &mut params)?;
        self.net = net;
        self.params = params;
        Ok(())
    }

    pub fn config(&self) -> ModelConfig {
        self.net.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Output followed by the reflectance, illumination, attended and
    /// enhanced illumination maps, each as RGBA at the input size.
    pub fn enhance(&self, width: usize, height: usize, rgba: &[u8]) -> Result<[Vec<u8>; 5]> {
        let x = rgba_to_tensor(width, height, rgba)?;
        let st = self.net.enhance_stages(&self.params, &pad_reflect(&x, 4, 8))?;
        let c = |t: &Tensor<f32>| crop(t, height, width).map(|t| tensor_to_rgba(&t));
        Ok([c(&st.output)?, c(&st.reflectance)?, c(&st.illumination)?, c(&st.attended)?, c(&st.refined)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Vec<u8> {
        (0..w * h).flat_map(|i| [(i % 251) as u8, (i / w * 3) as u8, 40, 255]).collect()
    }

    #[test]
    fn tone_curve_is_monotone_and_bounded() {
        let c = tone_curve(64, 8.0);
        assert_eq!(c.len(), 65);
        assert!(c.windows(2).all(|p| p[1].1 > p[0].1));
        assert!(c.iter().all(|p| p.1 > 0.0 && p.1 < 1.0));
    }

    #[test]
    fn schedule_curve_matches_lr_at() {
        let c = schedule_curve(&ScheduleConfig::default()).unwrap();
        assert_eq!(c.len(), 751);
        assert_eq!(c[0], 1e-8);
        assert_eq!(c[600], 2e-5);
        assert!(schedule_curve(&ScheduleConfig { warmup_epochs: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn toggles_shrink_the_profile() {
        let (full, flops, table) = profile(Flags::default(), 224, 224).unwrap();
        assert!(table.contains("total"));
        let (less, fewer, _) = profile(Flags { denoiser: false, ..Flags::default() }, 224, 224).unwrap();
        assert!(less < full && fewer < flops);
    }

    #[test]
    fn enhance_keeps_input_size_and_flags_keep_weights() {
        let mut d = Demo::seeded(1).unwrap();
        let img = gradient(13, 10);
        let outs = d.enhance(13, 10, &img).unwrap();
        assert!(outs.iter().all(|o| o.len() == 13 * 10 * 4));
        let before = d.param_count();
        d.set_flags(Flags { refinement: false, ..Flags::default() }).unwrap();
        assert!(d.param_count() < before);
        let id = d.params.find("decom.conv1.weight").unwrap();
        let base = d.base_params.find("decom.conv1.weight").unwrap();
        assert_eq!(d.params.get(id), d.base_params.get(base));
        d.set_flags(Flags::default()).unwrap();
        assert_eq!(d.enhance(13, 10, &img).unwrap(), outs);
        assert!(d.enhance(13, 10, &img[4..]).is_err());
    }

    #[test]
    fn checkpoint_bytes_load() {
        let (_, params) = Network::init::<f32>(ModelConfig::default(), 2).unwrap();
        let optimizer = dimlight::optim::AdamW::new(Default::default(), &params);
        let ck = Checkpoint { model: ModelConfig::default(), params, optimizer, epoch: 7, seed: 2 };
        let d = Demo::from_checkpoint_bytes(&ck.to_archive().to_bytes()).unwrap();
        assert!(d.source.contains('7'));
        assert!(Demo::from_checkpoint_bytes(b"nonsense").is_err());
    }

    #[test]
    fn compare_identity() {
        let img = gradient(16, 12);
        let (p, s) = compare(16, 12, &img, &img).unwrap();
        assert_eq!(p, f64::INFINITY);
        assert_eq!(s, 1.0);
    }
}
