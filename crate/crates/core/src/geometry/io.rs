//! 8-bit PNG / binary PPM images and single-channel PNG masks.

use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};

use super::EquirectImage;
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Quantize `[0, 1]` to a byte, rounding to nearest.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn format_for(path: &Path) -> ImageFormat {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ppm") | Some("pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    }
}

/// Load any supported image as `[H, W, 3]` in `[0, 1]`.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

pub fn rgb_image(t: &Tensor) -> Result<RgbImage> {
    ensure!(t.rank() == 3 && t.shape()[2] == 3, Dimension, "expected [H, W, 3], got {:?}", t.shape());
    let (h, w) = (t.shape()[0] as u32, t.shape()[1] as u32);
    let mut img = RgbImage::new(w, h);
    for (i, p) in img.pixels_mut().enumerate() {
        let s = &t.data()[i * 3..i * 3 + 3];
        *p = Rgb([to_u8(s[0]), to_u8(s[1]), to_u8(s[2])]);
    }
    Ok(img)
}

/// Save `[H, W, 3]` as PNG, or binary PPM when the extension is `.ppm`.
pub fn save_rgb(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    rgb_image(t)?.save_with_format(path, format_for(path))?;
    Ok(())
}

/// Load a grayscale mask as `[H, W]` of 0/1 (threshold at half scale).
pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path.as_ref())?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| if b >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[h as usize, w as usize], data)
}

/// Save a `[H, W]` mask as single-channel PNG (known = 255).
pub fn save_mask(path: impl AsRef<Path>, m: &Tensor) -> Result<()> {
    ensure!(m.rank() == 2, Dimension, "expected [H, W] mask, got {:?}", m.shape());
    let (h, w) = (m.shape()[0] as u32, m.shape()[1] as u32);
    let mut img = GrayImage::new(w, h);
    for (p, &v) in img.pixels_mut().zip(m.data()) {
        *p = Luma([if v > 0.5 { 255 } else { 0 }]);
    }
    img.save_with_format(path.as_ref(), ImageFormat::Png)?;
    Ok(())
}

pub fn load_equirect(path: impl AsRef<Path>, mask: Option<&Path>) -> Result<EquirectImage> {
    let pixels = load_rgb(path)?;
    let mask = mask.map(load_mask).transpose()?;
    EquirectImage::new(pixels, mask)
}
