//! Text-conditioned DDPM backbone: schedule, closed-vocab text encoding,
//! epsilon-predictor U-Net, and a DDIM sampler with classifier-free
//! guidance.

pub mod sample;
pub mod schedule;
pub mod text;
pub mod unet;

pub use sample::{sample, SampleOpts};
pub use schedule::NoiseSchedule;
pub use text::{TextTokens, Vocab, MAX_TEXT_LEN, PAD_TOKEN};
pub use unet::{dual_cross_attention, BackboneConfig, EpsPredictor};

use crate::img::Image;
use crate::Result;
use candle_core::{DType, Device, Tensor};

/// Image -> (3, S, S) tensor in [-1, 1].
pub fn image_to_tensor(img: &Image, dtype: DType, dev: &Device) -> Result<Tensor> {
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(3 * h * w);
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data.push(img.pixels[[y, x, ch]] as f64 * 2.0 - 1.0);
            }
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), dev)?.to_dtype(dtype)?)
}

/// (3, S, S) tensor in [-1, 1] -> clamped Image.
pub fn tensor_to_image(t: &Tensor) -> Result<Image> {
    let (c, h, w) = t.dims3()?;
    assert_eq!(c, 3);
    let vals: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mut img = Image::new(h, w);
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = (vals[ch * h * w + y * w + x] + 1.0) / 2.0;
                img.pixels[[y, x, ch]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(img)
}

/// Batch of images -> (B, 3, S, S).
pub fn images_to_batch(imgs: &[&Image], dtype: DType, dev: &Device) -> Result<Tensor> {
    let ts: Vec<Tensor> = imgs
        .iter()
        .map(|im| image_to_tensor(im, dtype, dev))
        .collect::<Result<_>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_tensor_round_trip() {
        let dev = Device::Cpu;
        let mut img = Image::new(8, 8);
        for (i, v) in img.pixels.iter_mut().enumerate() {
            *v = (i % 17) as f32 / 16.0;
        }
        let t = image_to_tensor(&img, DType::F64, &dev).unwrap();
        let back = tensor_to_image(&t).unwrap();
        for (a, b) in img.pixels.iter().zip(back.pixels.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
