//! RGB image buffer with values in `[0, 1]` plus the PNG quantization
//! contract used by the corpus (`round(p * 255)`).

use crate::{Error, Result};
use ndarray::{Array2, Array3};
use std::path::Path;

pub const DEFAULT_SIZE: usize = 32;

/// H×W×3 image, channels last, values clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image {
            pixels: Array3::zeros((h, w, 3)),
        }
    }

    pub fn filled(h: usize, w: usize, v: f32) -> Self {
        Image {
            pixels: Array3::from_elem((h, w, 3), v),
        }
    }

    pub fn from_pixels(pixels: Array3<f32>) -> Result<Self> {
        if pixels.shape()[2] != 3 {
            return Err(Error::Contract(format!(
                "image must have 3 channels, got {}",
                pixels.shape()[2]
            )));
        }
        Ok(Image { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Clamp all values into `[0, 1]` in place.
    pub fn clamp(&mut self) {
        self.pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> Array2<f32> {
        let (h, w) = (self.height(), self.width());
        Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * self.pixels[[y, x, 0]]
                + 0.587 * self.pixels[[y, x, 1]]
                + 0.114 * self.pixels[[y, x, 2]]
        })
    }

    pub fn is_constant(&self) -> bool {
        let mut it = self.pixels.iter();
        match it.next() {
            Some(&first) => it.all(|&v| (v - first).abs() < 1e-6),
            None => true,
        }
    }

    /// Quantize to 8-bit exactly as stored on disk. Round-trips with
    /// [`Image::load_png`] bit-identically.
    pub fn quantize(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// In-memory 8-bit round trip: exactly what a save/load cycle produces.
    pub fn quantized(&self) -> Image {
        Image {
            pixels: self
                .pixels
                .mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let buf = self.quantize();
        image::save_buffer(
            path,
            &buf,
            w as u32,
            h as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let im = image::open(path)?.to_rgb8();
        let (w, h) = (im.width() as usize, im.height() as usize);
        let data: Vec<f32> = im.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
        let pixels = Array3::from_shape_vec((h, w, 3), data)
            .map_err(|e| Error::other(format!("png shape: {e}")))?;
        Ok(Image { pixels })
    }
}

/// Convert HSV (h in degrees, s/v in [0,1]) to RGB.
pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// RGB to hue in degrees, plus saturation. Returns `None` for gray pixels.
pub fn rgb_to_hue(r: f32, g: f32, b: f32) -> Option<(f32, f32)> {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    if c < 1e-4 || max < 1e-4 {
        return None;
    }
    let hue = if (max - r).abs() < 1e-7 {
        60.0 * ((g - b) / c).rem_euclid(6.0)
    } else if (max - g).abs() < 1e-7 {
        60.0 * ((b - r) / c + 2.0)
    } else {
        60.0 * ((r - g) / c + 4.0)
    };
    Some((hue.rem_euclid(360.0), c / max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip_on_primaries() {
        for (h, want) in [(0.0, [1.0, 0.0, 0.0]), (120.0, [0.0, 1.0, 0.0]), (240.0, [0.0, 0.0, 1.0])] {
            let rgb = hsv_to_rgb(h, 1.0, 1.0);
            for i in 0..3 {
                assert!((rgb[i] - want[i]).abs() < 1e-6);
            }
            let (hue, _) = rgb_to_hue(rgb[0], rgb[1], rgb[2]).unwrap();
            assert!((hue - h).abs() < 1e-3);
        }
    }

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = std::env::temp_dir().join("vat_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut im = Image::new(8, 8);
        for (i, v) in im.pixels.iter_mut().enumerate() {
            *v = (i as f32 * 0.017) % 1.0;
        }
        let p = dir.join("t.png");
        im.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        let q: Vec<u8> = im.quantize();
        assert_eq!(q, back.quantize());
    }
}
