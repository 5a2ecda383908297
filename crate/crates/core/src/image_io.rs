//! 8-bit raster images to and from `[1, C, H, W]` tensors on [0, 1].

use std::path::Path;

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};

use crate::decom::check_network_input;
use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// A validated network input: one 3-channel image on [0, 1], at least 8x8
/// with both sides divisible by 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    data: Tensor<T>,
}

impl<T: Real> Image<T> {
    /// Values are clamped to [0, 1].
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 {
            return Err(shape_err!("an image holds one sample, got {s}"));
        }
        check_network_input(s)?;
        Ok(Image { data: t.map(|v| v.max(T::zero()).min(T::one())) })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape().h
    }

    pub fn width(&self) -> usize {
        self.data.shape().w
    }
}

pub fn rgb_to_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let scale = T::one() / T::from_f64_lossy(255.0);
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        T::from_f64_lossy(img.get_pixel(x as u32, y as u32)[c] as f64) * scale
    })
}

/// Round-half-up quantisation of a [0, 1] value to 0..=255.
pub fn quantize<T: Real>(v: T) -> u8 {
    let x = v.to_f64_lossy();
    if x.is_nan() {
        return 0;
    }
    (x.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Sample `n` of a 3-channel tensor as an RGB image.
pub fn tensor_to_rgb<T: Real>(t: &Tensor<T>, n: usize) -> Result<RgbImage> {
    let s = t.shape();
    if s.c != 3 || n >= s.n {
        return Err(shape_err!("cannot view sample {n} of {s} as RGB"));
    }
    Ok(ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| quantize(t.at(n, c, y as usize, x as usize))))
    }))
}

/// Sample `n` of a 1-channel tensor as a grayscale image.
pub fn tensor_to_gray<T: Real>(t: &Tensor<T>, n: usize) -> Result<GrayImage> {
    let s = t.shape();
    if s.c != 1 || n >= s.n {
        return Err(shape_err!("cannot view sample {n} of {s} as grayscale"));
    }
    Ok(ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        image::Luma([quantize(t.at(n, 0, y as usize, x as usize))])
    }))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.to_rgb8())
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    Ok(rgb_to_tensor(&read_rgb(path)?))
}

/// Writes a 1- or 3-channel single-sample tensor; the format follows the
/// file extension.
pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let res = match t.shape().c {
        1 => tensor_to_gray(t, 0)?.save(path),
        _ => tensor_to_rgb(t, 0)?.save(path),
    };
    res.map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Reflection padding (without repeating the edge) on the bottom and right
/// so both sides become multiples of `multiple` and at least `min_side`.
/// Returns the padded tensor; the original occupies the top-left corner.
pub fn pad_reflect<T: Real>(t: &Tensor<T>, multiple: usize, min_side: usize) -> Tensor<T> {
    let s = t.shape();
    let target = |d: usize| d.max(min_side).div_ceil(multiple) * multiple;
    let (h, w) = (target(s.h), target(s.w));
    if (h, w) == (s.h, s.w) {
        return t.clone();
    }
    Tensor::from_fn(s.with_hw(h, w), |n, c, y, x| t.at(n, c, reflect(y, s.h), reflect(x, s.w)))
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n { r } else { period - r }
}

/// Top-left `h x w` window.
pub fn crop<T: Real>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if h > s.h || w > s.w {
        return Err(shape_err!("cannot crop {s} to {w}x{h}"));
    }
    Ok(Tensor::from_fn(s.with_hw(h, w), |n, c, y, x| t.at(n, c, y, x)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.0f64), 0);
        assert_eq!(quantize(1.0f64), 255);
        assert_eq!(quantize(0.5f64), 128);
        assert_eq!(quantize(0.5 / 255.0f64), 1);
        assert_eq!(quantize(2.0f64), 255);
        assert_eq!(quantize(-1.0f64), 0);
    }

    #[test]
    fn reflection_padding() {
        let t = Tensor::<f64>::from_fn(Shape::new(1, 1, 3, 5), |_, _, y, x| (y * 10 + x) as f64);
        let p = pad_reflect(&t, 4, 8);
        assert_eq!(p.shape(), Shape::new(1, 1, 8, 8));
        assert_eq!(crop(&p, 3, 5).unwrap(), t);
        // Columns continue 4, 3, 2 past the right edge; rows 1, 0, 1, 2, 1.
        assert_eq!(p.at(0, 0, 0, 5), 3.0);
        assert_eq!(p.at(0, 0, 0, 7), 1.0);
        assert_eq!(p.at(0, 0, 3, 0), 10.0);
        assert_eq!(p.at(0, 0, 4, 0), 0.0);
    }

    #[test]
    fn image_validation() {
        assert!(Image::new(Tensor::<f32>::zeros(Shape::new(1, 3, 8, 12))).is_ok());
        assert!(Image::new(Tensor::<f32>::zeros(Shape::new(1, 3, 8, 10))).is_err());
        assert!(Image::new(Tensor::<f32>::zeros(Shape::new(1, 1, 8, 8))).is_err());
        let img = Image::new(Tensor::<f32>::full(Shape::new(1, 3, 8, 8), 1.5)).unwrap();
        assert!(img.tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rgb_round_trip() {
        let img = RgbImage::from_fn(5, 4, |x, y| Rgb([(x * 50) as u8, (y * 60) as u8, 7]));
        let t = rgb_to_tensor::<f32>(&img);
        assert_eq!(tensor_to_rgb(&t, 0).unwrap(), img);
    }
}
