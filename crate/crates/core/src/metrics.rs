//! Full-reference quality metrics and the per-image evaluation report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{config_err, shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("cannot compare {} with {}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(s / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB for signals on [0, 1]; infinite for
/// identical inputs.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable valid-mode Gaussian filtering of one plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &p[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(i, gi)| gi * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over valid 11x11 Gaussian windows, computed
/// per channel and averaged over channels and batch.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same(a, b)?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(config_err!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}", s.w, s.h));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let pa: Vec<f64> = a.plane(n, c).iter().map(|v| v.to_f64_lossy()).collect();
            let pb: Vec<f64> = b.plane(n, c).iter().map(|v| v.to_f64_lossy()).collect();
            let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
            let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
            let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
            let [mu_a, mu_b, e_aa, e_bb, e_ab] = [&pa, &pb, &aa, &bb, &ab].map(|p| filter_valid(p, s.h, s.w, &g));
            let mut acc = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = e_aa[i] - ma * ma;
                let vb = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
            total += acc / mu_a.len() as f64;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Dataset("no images to evaluate".into()));
        }
        let n = per_image.len() as f64;
        Ok(MetricReport {
            psnr_db: per_image.iter().map(|m| m.psnr_db).sum::<f64>() / n,
            ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / n,
            per_image,
        })
    }

    /// One `key=value` pair per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "images={}", self.per_image.len()).unwrap();
        writeln!(s, "psnr_db={}", self.psnr_db).unwrap();
        writeln!(s, "ssim={}", self.ssim).unwrap();
        for (i, m) in self.per_image.iter().enumerate() {
            writeln!(s, "image.{i}.id={}", m.id).unwrap();
            writeln!(s, "image.{i}.psnr_db={}", m.psnr_db).unwrap();
            writeln!(s, "image.{i}.ssim={}", m.ssim).unwrap();
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("report line {}: expected key=value", ln + 1)))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("report is missing `{k}`")));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Format(format!("report value `{k}` is not a number")))
        };
        let count: usize = get("images")?
            .parse()
            .map_err(|_| Error::Format("report value `images` is not an integer".into()))?;
        let per_image = (0..count)
            .map(|i| {
                Ok(ImageMetrics {
                    id: get(&format!("image.{i}.id"))?.clone(),
                    psnr_db: num(&format!("image.{i}.psnr_db"))?,
                    ssim: num(&format!("image.{i}.ssim"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MetricReport {
            psnr_db: num("psnr_db")?,
            ssim: num("ssim")?,
            per_image,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_kv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let w = self.per_image.iter().map(|m| m.id.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        writeln!(s, "{:<w$}  {:>9}  {:>7}", "image", "PSNR(dB)", "SSIM").unwrap();
        for m in &self.per_image {
            writeln!(s, "{:<w$}  {:>9.3}  {:>7.4}", m.id, m.psnr_db, m.ssim).unwrap();
        }
        writeln!(s, "{:<w$}  {:>9.3}  {:>7.4}", "mean", self.psnr_db, self.ssim).unwrap();
        s
    }
}
