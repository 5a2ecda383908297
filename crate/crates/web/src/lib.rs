//! Browser demo: curves, model budget and the enhancement pipeline on an
//! uploaded image. See `www/index.html`.

pub mod demo;

#[cfg(target_arch = "wasm32")]
pub use bindings::*;

#[cfg(target_arch = "wasm32")]
mod bindings {
    use dimlight::schedule::ScheduleConfig;
    use wasm_bindgen::prelude::*;

    use crate::demo::{self, Demo, Flags};

    fn js(e: dimlight::Error) -> JsError {
        JsError::new(&e.to_string())
    }

    fn flags(seblock: bool, dark: bool, residual: bool, refine: bool, denoise: bool) -> Flags {
        Flags { seblock, dark_region: dark, residual_add: residual, refinement: refine, denoiser: denoise }
    }

    /// Interleaved `(h, tone_map(h))` samples.
    #[wasm_bindgen(js_name = toneCurve)]
    pub fn tone_curve(n: usize, range: f64) -> Vec<f64> {
        demo::tone_curve(n, range).into_iter().flat_map(|(h, v)| [h, v]).collect()
    }

    #[wasm_bindgen(js_name = scheduleCurve)]
    pub fn schedule_curve(lr_min: f64, lr_max: f64, warmup: usize, hold_until: usize, total: usize) -> Result<Vec<f64>, JsError> {
        let cfg = ScheduleConfig { lr_min, lr_max, warmup_epochs: warmup, hold_until, total_epochs: total };
        demo::schedule_curve(&cfg).map_err(js)
    }

    /// Per-layer table; the first line holds `params flops`.
    #[wasm_bindgen]
    pub fn profile(seblock: bool, dark: bool, residual: bool, refine: bool, denoise: bool, width: usize, height: usize) -> Result<String, JsError> {
        let (p, f, table) = demo::profile(flags(seblock, dark, residual, refine, denoise), width, height).map_err(js)?;
        Ok(format!("{p} {f}\n{table}"))
    }

    /// `[psnr_db, ssim]` of two RGBA images.
    #[wasm_bindgen]
    pub fn compare(width: usize, height: usize, a: &[u8], b: &[u8]) -> Result<Vec<f64>, JsError> {
        let (p, s) = demo::compare(width, height, a, b).map_err(js)?;
        Ok(vec![p, s])
    }

    #[wasm_bindgen]
    pub struct Pipeline(Demo);

    #[wasm_bindgen]
    impl Pipeline {
        #[wasm_bindgen(constructor)]
        pub fn new(seed: u32) -> Result<Pipeline, JsError> {
            Demo::seeded(seed as u64).map(Pipeline).map_err(js)
        }

        #[wasm_bindgen(js_name = fromCheckpoint)]
        pub fn from_checkpoint(bytes: &[u8]) -> Result<Pipeline, JsError> {
            Demo::from_checkpoint_bytes(bytes).map(Pipeline).map_err(js)
        }

        #[wasm_bindgen(js_name = setFlags)]
        pub fn set_flags(&mut self, seblock: bool, dark: bool, residual: bool, refine: bool, denoise: bool) -> Result<(), JsError> {
            self.0.set_flags(flags(seblock, dark, residual, refine, denoise)).map_err(js)
        }

        pub fn describe(&self) -> String {
            format!("{} · {} parameters", self.0.source, self.0.param_count())
        }

        /// Five RGBA images back to back: output, R, I, Î, Ī.
        pub fn enhance(&self, width: usize, height: usize, rgba: &[u8]) -> Result<Vec<u8>, JsError> {
            Ok(self.0.enhance(width, height, rgba).map_err(js)?.concat())
        }
    }
}
