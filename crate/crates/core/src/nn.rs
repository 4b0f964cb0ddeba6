//! Small neural building blocks on candle. Everything here works in both
//! f32 and f64 — candle's fused LayerNorm/GroupNorm custom ops are
//! f32-only, so the norms are hand-rolled from primitive ops (which keeps
//! the double-precision gradient checks honest).

use crate::Result;
use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Init, VarBuilder};

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    g: Tensor,
    b: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(LayerNorm {
            g: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            b: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.g)?.broadcast_add(&self.b)?)
    }
}

/// Group normalization over (C/G, H, W) groups of an NCHW tensor.
pub struct GroupNorm {
    g: Tensor,
    b: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        assert_eq!(channels % groups, 0, "channels must divide into groups");
        Ok(GroupNorm {
            g: vb.get_with_hints(channels, "weight", Init::Const(1.0))?,
            b: vb.get_with_hints(channels, "bias", Init::Const(0.0))?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let xg = x.reshape((n, self.groups, c / self.groups * h * w))?;
        let mean = xg.mean_keepdim(D::Minus1)?;
        let xc = xg.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let xn = xn.reshape((n, c, h, w))?;
        let g = self.g.reshape((1, c, 1, 1))?;
        let b = self.b.reshape((1, c, 1, 1))?;
        Ok(xn.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

/// Scaled dot-product attention over (B, N, D) tensors, single head.
/// Scale defaults to 1/sqrt(key width) when `scale` is None.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: Option<f64>) -> Result<Tensor> {
    let dk = k.dim(D::Minus1)? as f64;
    let scale = scale.unwrap_or(1.0 / dk.sqrt());
    let att = (q.matmul(&k.transpose(D::Minus2, D::Minus1)?)? * scale)?;
    let att = candle_nn::ops::softmax(&att, D::Minus1)?;
    Ok(att.matmul(v)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Sinusoidal timestep embedding: (B,) integer steps -> (B, dim).
pub fn timestep_embedding(t: &Tensor, dim: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    assert_eq!(dim % 2, 0, "embedding dim must be even");
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(i as f64) * (10000f64).ln() / (half as f64 - 1.0).max(1.0)).exp())
        .collect();
    let freqs = Tensor::from_vec(freqs, half, dev)?.to_dtype(DType::F64)?;
    let t = t.to_dtype(DType::F64)?.unsqueeze(1)?; // (B, 1)
    let args = t.broadcast_mul(&freqs.unsqueeze(0)?)?; // (B, half)
    let emb = Tensor::cat(&[args.sin()?, args.cos()?], 1)?;
    Ok(emb.to_dtype(dtype)?)
}

/// Nearest-neighbor 2x upsampling of an NCHW tensor.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * 2, w * 2)?)
}

/// Linear layer with fan-in scaled normal init.
pub fn linear(inp: usize, out: usize, vb: VarBuilder) -> Result<candle_nn::Linear> {
    let init = Init::Randn {
        mean: 0.0,
        stdev: 1.0 / (inp as f64).sqrt(),
    };
    let w = vb.get_with_hints((out, inp), "weight", init)?;
    let b = vb.get_with_hints(out, "bias", Init::Const(0.0))?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

pub fn linear_no_bias(inp: usize, out: usize, vb: VarBuilder) -> Result<candle_nn::Linear> {
    let init = Init::Randn {
        mean: 0.0,
        stdev: 1.0 / (inp as f64).sqrt(),
    };
    let w = vb.get_with_hints((out, inp), "weight", init)?;
    Ok(candle_nn::Linear::new(w, None))
}

/// 3x3 same-padding conv with fan-in scaled init.
pub fn conv3x3(inp: usize, out: usize, vb: VarBuilder) -> Result<candle_nn::Conv2d> {
    conv2d(inp, out, 3, 1, 1, vb)
}

pub fn conv2d(
    inp: usize,
    out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    vb: VarBuilder,
) -> Result<candle_nn::Conv2d> {
    let fan_in = inp * kernel * kernel;
    let init = Init::Randn {
        mean: 0.0,
        stdev: 1.0 / (fan_in as f64).sqrt(),
    };
    let w = vb.get_with_hints((out, inp, kernel, kernel), "weight", init)?;
    let b = vb.get_with_hints(out, "bias", Init::Const(0.0))?;
    let cfg = candle_nn::Conv2dConfig {
        stride,
        padding,
        ..Default::default()
    };
    Ok(candle_nn::Conv2d::new(w, Some(b), cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};

    #[test]
    fn layer_norm_zero_mean_unit_var_in_f64() {
        let dev = Device::Cpu;
        let vm = candle_nn::VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F64, &dev);
        let ln = LayerNorm::new(16, vb).unwrap();
        let x = Tensor::randn(3.0f64, 2.0, (4, 16), &dev).unwrap();
        let y = ln.forward(&x).unwrap();
        let mean: f64 = y
            .mean(D::Minus1)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar()
            .unwrap();
        let var: f64 = y
            .sqr()
            .unwrap()
            .mean(D::Minus1)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .iter()
            .map(|v| (v - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(mean < 1e-10, "mean {mean}");
        assert!(var < 1e-3, "var deviation {var}");
    }

    #[test]
    fn attention_uniform_when_keys_identical() {
        let dev = Device::Cpu;
        let q = Tensor::randn(0.0f64, 1.0, (1, 2, 4), &dev).unwrap();
        let k = Tensor::ones((1, 3, 4), DType::F64, &dev).unwrap();
        let v = Tensor::randn(0.0f64, 1.0, (1, 3, 4), &dev).unwrap();
        let out = attention(&q, &k, &v, None).unwrap();
        let expect = v.mean_keepdim(1).unwrap().broadcast_add(
            &Tensor::zeros((1, 2, 4), DType::F64, &dev).unwrap(),
        );
        let diff: f64 = (out - expect.unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar()
            .unwrap();
        assert!(diff < 1e-12, "diff {diff}");
    }

    #[test]
    fn timestep_embedding_distinguishes_steps() {
        let dev = Device::Cpu;
        let t = Tensor::from_vec(vec![0u32, 1, 199], 3, &dev).unwrap();
        let e = timestep_embedding(&t, 32, DType::F64, &dev).unwrap();
        assert_eq!(e.dims(), &[3, 32]);
        let rows = e.to_vec2::<f64>().unwrap();
        assert_ne!(rows[0], rows[1]);
        assert_ne!(rows[1], rows[2]);
    }
}
