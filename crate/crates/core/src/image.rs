//! Display encoding of linear RGB renders.

use std::path::Path;

use crate::error::{Error, Result};

/// Display gamma applied when encoding linear radiance to 8 bits.
pub const GAMMA: f32 = 2.2;

/// `round(255 * clamp(v, 0, 1)^(1 / 2.2))`.
pub fn encode_channel(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0).powf(1.0 / GAMMA)).round() as u8
}

/// 8-bit RGB PNG of a row-major linear image.
pub fn to_png(img: &[f32], width: usize, height: usize) -> Result<Vec<u8>> {
    if img.len() != width * height * 3 {
        return Err(Error::invalid("image", format!("{} values for {width}x{height} RGB", img.len())));
    }
    let data: Vec<u8> = img.iter().map(|&v| encode_channel(v)).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::invalid("png", e.to_string()))?;
        w.write_image_data(&data).map_err(|e| Error::invalid("png", e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, img: &[f32], width: usize, height: usize) -> Result<()> {
    std::fs::write(path, to_png(img, width, height)?).map_err(|e| Error::io(path, e))
}

/// Little-endian `f32` bytes of an image.
pub fn to_raw(img: &[f32]) -> Vec<u8> {
    img.iter().flat_map(|v| v.to_le_bytes()).collect()
}
