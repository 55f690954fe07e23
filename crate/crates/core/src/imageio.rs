//! Conversions between encoded image files and [`ImageTensor`].

use std::path::Path;

use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::backends::ImageTensor;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("cannot decode image {what}: {source}")]
    Decode {
        what: String,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot write image {path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

pub fn from_rgb8(img: &RgbImage) -> ImageTensor {
    let (w, h) = img.dimensions();
    let pixels = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    ImageTensor::new(h as usize, w as usize, pixels).expect("8-bit pixels are in range")
}

pub fn to_rgb8(img: &ImageTensor) -> RgbImage {
    let mut out = RgbImage::new(img.width() as u32, img.height() as u32);
    for (i, p) in img.pixels().iter().enumerate() {
        let q = p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
        out.put_pixel((i % img.width()) as u32, (i / img.width()) as u32, Rgb(q));
    }
    out
}

pub fn decode(bytes: &[u8], what: &str) -> Result<ImageTensor, ImageIoError> {
    let img = image::load_from_memory(bytes)
        .map_err(|source| ImageIoError::Decode { what: what.to_string(), source })?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn load(path: &Path) -> Result<ImageTensor, ImageIoError> {
    let img = image::open(path)
        .map_err(|source| ImageIoError::Decode { what: path.display().to_string(), source })?;
    Ok(from_rgb8(&img.to_rgb8()))
}

/// Writes in the format implied by the file extension.
pub fn save(img: &ImageTensor, path: &Path) -> Result<(), ImageIoError> {
    to_rgb8(img)
        .save(path)
        .map_err(|source| ImageIoError::Encode { path: path.display().to_string(), source })
}
