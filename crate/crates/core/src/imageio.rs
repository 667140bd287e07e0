//! PNG (and PPM fallback) export/import for latents and RGB scenes.
//! Values in [0,1] map to 8-bit with round-half-up; encoding is
//! deterministic for identical pixels.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::Tensor;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves a `[H×W]` tensor as 8-bit grayscale (PNG by extension, PPM for
/// `.ppm`).
pub fn save_gray(t: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = t.dims2()?;
    if is_ppm(path) {
        let mut body = format!("P5\n{w} {h}\n255\n").into_bytes();
        body.extend(t.data().iter().map(|&v| to_u8(v)));
        std::fs::write(path, body)?;
        return Ok(());
    }
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([to_u8(t.at2(y, x))]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Saves a `[3×H×W]` tensor as 8-bit RGB.
pub fn save_rgb(t: &Tensor, path: &Path) -> Result<()> {
    let shape = t.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(format!("save_rgb: expected 3xHxW, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    if is_ppm(path) {
        let mut body = format!("P6\n{w} {h}\n255\n").into_bytes();
        for i in 0..plane {
            body.push(to_u8(t.data()[i]));
            body.push(to_u8(t.data()[plane + i]));
            body.push(to_u8(t.data()[2 * plane + i]));
        }
        std::fs::write(path, body)?;
        return Ok(());
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(t.data()[i]),
                    to_u8(t.data()[plane + i]),
                    to_u8(t.data()[2 * plane + i]),
                ]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}

/// Loads an RGB PNG into a `[3×H×W]` tensor in [0,1].
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            let i = y * w + x;
            data[i] = p[0] as f64 / 255.0;
            data[plane + i] = p[1] as f64 / 255.0;
            data[2 * plane + i] = p[2] as f64 / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Loads a grayscale PNG into `[H×W]` in [0,1].
pub fn load_gray(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0;
        }
    }
    Tensor::from_vec(vec![h, w], data)
}

fn is_ppm(path: &Path) -> bool {
    path.extension().map_or(false, |e| e.eq_ignore_ascii_case("ppm"))
        || path.extension().map_or(false, |e| e.eq_ignore_ascii_case("pgm"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_vec(
            vec![3, 2, 2],
            vec![1.0, 0.0, 0.5, 0.25, 0.0, 1.0, 0.5, 0.75, 0.0, 0.0, 1.0, 0.5],
        )
        .unwrap();
        let path = dir.path().join("t.png");
        save_rgb(&t, &path).unwrap();
        let back = load_rgb(&path).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn ppm_fallback_writes() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_vec(vec![2, 2], vec![0.0, 0.5, 0.75, 1.0]).unwrap();
        let path = dir.path().join("t.ppm");
        save_gray(&t, &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert!(raw.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&raw[raw.len() - 4..], &[0u8, 128, 191, 255]);
    }
}
