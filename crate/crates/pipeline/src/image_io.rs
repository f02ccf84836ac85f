//! 8-bit RGB PNG input and output.

use std::path::Path;

use fcppn_core::{Real, Tensor};
use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Result, RunError};

/// Reads a PNG (any colour type) as `[H, W, 3]` in `[0, 1]`.
pub fn read_png<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(RunError::io(path))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| RunError::parse(path, e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| T::of(v as f64 / 255.0)).collect();
    Ok(Tensor::new(vec![h as usize, w as usize, 3], data)?)
}

/// `round_half_even(255·clamp(v, 0, 1))`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

pub fn to_rgb8<T: Real>(image: &Tensor<T>) -> Result<RgbImage> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(RunError::Usage(format!("image has {c} channels, expected 3")));
    }
    let raw: Vec<u8> = image.data().iter().map(|v| quantize(v.as_f64())).collect();
    Ok(ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw).expect("sized buffer"))
}

pub fn write_png<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    to_rgb8(image)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => RunError::Io {
                path: path.to_path_buf(),
                source: io,
            },
            other => RunError::parse(path, other),
        })
}
