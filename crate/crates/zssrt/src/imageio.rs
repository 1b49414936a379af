//! PNG and float-map files.

use std::path::Path;

use image::ImageEncoder;
use serde::{Deserialize, Serialize};
use zssrt_core::Image;

use crate::error::{read, write_atomic, AppError, Result};

/// Load an 8-bit PNG as RGB in `[0, 1]`, compositing any alpha over `background`.
pub fn load_png(path: &Path, background: [f64; 3]) -> Result<Image> {
    let bytes = read(path)?;
    let dynimg = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| AppError::format(path, e))?;
    let rgba = dynimg.to_rgba8();
    let (w, h) = rgba.dimensions();
    let mut out = Image::new(w as usize, h as usize, 3);
    for (i, px) in rgba.pixels().enumerate() {
        let a = px[3] as f64 / 255.0;
        for c in 0..3 {
            out.data[3 * i + c] = px[c] as f64 / 255.0 * a + background[c] * (1.0 - a);
        }
    }
    Ok(out)
}

/// Quantize to 8 bits per channel.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save an RGB or single-channel image as an 8-bit PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(AppError::format(path, format!("cannot write {c}-channel PNG"))),
    };
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(&bytes, w, h, color)
        .map_err(|e| AppError::format(path, e))?;
    write_atomic(path, &buf)
}

#[derive(Debug, Serialize, Deserialize)]
struct FloatHeader {
    width: usize,
    height: usize,
    channels: usize,
    dtype: String,
}

const FLOAT_MAGIC: &[u8] = b"zssrt-float-v1\n";

/// Full-precision map: magic line, JSON header line, then little-endian f64 values.
pub fn save_float_map(path: &Path, img: &Image) -> Result<()> {
    let header = FloatHeader { width: img.width, height: img.height, channels: img.channels, dtype: "f64le".into() };
    let mut buf = FLOAT_MAGIC.to_vec();
    buf.extend(serde_json::to_vec(&header).expect("header serializes"));
    buf.push(b'\n');
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub fn load_float_map(path: &Path) -> Result<Image> {
    let bytes = read(path)?;
    let rest = bytes.strip_prefix(FLOAT_MAGIC).ok_or_else(|| AppError::format(path, "bad magic"))?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| AppError::format(path, "missing header"))?;
    let header: FloatHeader = serde_json::from_slice(&rest[..nl]).map_err(|e| AppError::format(path, e))?;
    let payload = &rest[nl + 1..];
    let n = header.width * header.height * header.channels;
    if payload.len() != 8 * n {
        return Err(AppError::format(path, "payload length does not match header"));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Image::from_vec(header.width, header.height, header.channels, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(9, 7, 3, |y, x, c| ((y * 7 + x * 3 + c) % 17) as f64 / 16.0);
        let p = dir.path().join("a.png");
        save_png(&p, &img).unwrap();
        let back = load_png(&p, [1.0; 3]).unwrap();
        assert!(img.data.iter().zip(&back.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }

    #[test]
    fn alpha_is_composited_over_background() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgba.png");
        let px = image::RgbaImage::from_pixel(2, 2, image::Rgba([255, 0, 0, 0]));
        px.save(&p).unwrap();
        let img = load_png(&p, [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(img.pixel(0, 0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn float_map_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 4, 1, |y, x, _| (y as f64).sin() * 1e3 + x as f64 / 3.0);
        let p = dir.path().join("d.f64");
        save_float_map(&p, &img).unwrap();
        assert_eq!(load_float_map(&p).unwrap(), img);
    }
}
