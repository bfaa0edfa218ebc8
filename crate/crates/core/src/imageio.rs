//! Conversions between `image` buffers and the float `(H, W, 3)` arrays used
//! throughout the crate. Channels are in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use ndarray::{Array3, ArrayView3};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn from_rgb8(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

pub fn to_rgb8(pixels: ArrayView3<f64>) -> RgbImage {
    let (h, w, _) = pixels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |c: usize| (pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    })
}

pub fn load_rgb8(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn load(path: &Path) -> Result<Array3<f64>> {
    Ok(from_rgb8(&load_rgb8(path)?))
}

pub fn save_png(pixels: ArrayView3<f64>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, encode_png(pixels)?)?;
    Ok(())
}

pub fn encode_png(pixels: ArrayView3<f64>) -> Result<Vec<u8>> {
    encode_png_rgb8(&to_rgb8(pixels))
}

pub fn encode_png_rgb8(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode(bytes: &[u8]) -> Result<Array3<f64>> {
    Ok(from_rgb8(&image::load_from_memory(bytes)?.to_rgb8()))
}

pub fn check_rgb(pixels: ArrayView3<f64>) -> Result<()> {
    if pixels.dim().2 != 3 {
        return Err(Error::shape("(H, W, 3)", format!("{:?}", pixels.dim())));
    }
    Ok(())
}

/// Hex SHA-256 of the decoded 8-bit pixels and dimensions.
pub fn content_hash(img: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Center crop of `pixels` to `(h, w)`; returns a view.
pub fn center_crop(pixels: ArrayView3<'_, f64>, h: usize, w: usize) -> Result<ArrayView3<'_, f64>> {
    let (ph, pw, _) = pixels.dim();
    if h > ph || w > pw {
        return Err(Error::shape(format!("at least {h}x{w}"), format!("{ph}x{pw}")));
    }
    let y0 = (ph - h) / 2;
    let x0 = (pw - w) / 2;
    Ok(pixels.slice_move(ndarray::s![y0..y0 + h, x0..x0 + w, ..]))
}
