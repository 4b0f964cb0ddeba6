//! Multi-reference attribute adapter: frozen convolutional image encoder,
//! attribute-specific Q-Former extractor, channel projector, zero-feature
//! padding, and N-slot condition assembly. The dual cross-attention sites
//! themselves live inside the U-Net (`backbone::unet`).

use crate::backbone::text::{TextTokens, MAX_TEXT_LEN};
use crate::nn::{attention, conv2d, linear, linear_no_bias, silu, upsample2, LayerNorm};
use crate::rng::Rng;
use crate::{Error, Result};
use candle_core::{DType, Device, Tensor};
use candle_nn::{Conv2d, Embedding, Linear, Module, VarBuilder};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Condition slots N.
    pub n_slots: usize,
    /// Query tokens per slot M.
    pub m_tokens: usize,
    /// Q-Former width.
    pub width: usize,
    /// Q-Former blocks.
    pub blocks: usize,
    /// Output width d (must equal the backbone's cross-attention dim).
    pub attn_dim: usize,
    /// Conv encoder channel progression (three stages).
    pub enc_channels: Vec<usize>,
    /// Image-branch attention scale lambda.
    pub lambda: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            n_slots: 3,
            m_tokens: 8,
            width: 64,
            blocks: 2,
            attn_dim: 64,
            enc_channels: vec![16, 32, 64],
            lambda: 1.0,
        }
    }
}

/// One reference: image V_k plus attribute instruction a_k.
#[derive(Debug, Clone)]
pub struct ConditionSlot {
    pub image: crate::img::Image,
    pub tag: String,
}

/// Up to N slots; assembly pads the remainder with F_zero.
#[derive(Debug, Clone, Default)]
pub struct ConditionSet {
    pub slots: Vec<ConditionSlot>,
}

/// Frozen-after-pretraining conv encoder: 32x32x3 -> 8x8 patch grid.
pub struct ConvEncoder {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl ConvEncoder {
    pub fn new(channels: &[usize], vb: VarBuilder) -> Result<Self> {
        if channels.len() != 3 {
            return Err(Error::Config("encoder needs exactly 3 channel sizes".into()));
        }
        Ok(ConvEncoder {
            c1: conv2d(3, channels[0], 3, 2, 1, vb.pp("c1"))?,
            c2: conv2d(channels[0], channels[1], 3, 2, 1, vb.pp("c2"))?,
            c3: conv2d(channels[1], channels[2], 3, 1, 1, vb.pp("c3"))?,
        })
    }

    /// (B, 3, 32, 32) -> (B, P, e) patch features, P = 64 patches.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = silu(&self.c1.forward(x)?)?;
        let h = silu(&self.c2.forward(&h)?)?;
        let h = self.c3.forward(&h)?;
        let (b, e, hh, ww) = h.dims4()?;
        Ok(h.reshape((b, e, hh * ww))?.transpose(1, 2)?)
    }
}

/// Decoder used only to pretrain the encoder as an autoencoder.
pub struct ConvDecoder {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl ConvDecoder {
    pub fn new(channels: &[usize], vb: VarBuilder) -> Result<Self> {
        Ok(ConvDecoder {
            c1: conv2d(channels[2], channels[1], 3, 1, 1, vb.pp("c1"))?,
            c2: conv2d(channels[1], channels[0], 3, 1, 1, vb.pp("c2"))?,
            c3: conv2d(channels[0], 3, 3, 1, 1, vb.pp("c3"))?,
        })
    }

    /// (B, e, 8, 8) feature grid -> (B, 3, 32, 32) reconstruction.
    pub fn forward(&self, feat: &Tensor) -> Result<Tensor> {
        let h = silu(&self.c1.forward(feat)?)?;
        let h = upsample2(&h)?;
        let h = silu(&self.c2.forward(&h)?)?;
        let h = upsample2(&h)?;
        Ok(self.c3.forward(&h)?.tanh()?)
    }
}

struct QBlock {
    ln_self: LayerNorm,
    sq: Linear,
    sk: Linear,
    sv: Linear,
    so: Linear,
    ln_cross: LayerNorm,
    cq: Linear,
    ck: Linear,
    cv: Linear,
    co: Linear,
    ln_ff: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl QBlock {
    fn new(w: usize, e: usize, vb: VarBuilder) -> Result<Self> {
        Ok(QBlock {
            ln_self: LayerNorm::new(w, vb.pp("ln_self"))?,
            sq: linear_no_bias(w, w, vb.pp("sq"))?,
            sk: linear_no_bias(w, w, vb.pp("sk"))?,
            sv: linear_no_bias(w, w, vb.pp("sv"))?,
            so: linear(w, w, vb.pp("so"))?,
            ln_cross: LayerNorm::new(w, vb.pp("ln_cross"))?,
            cq: linear_no_bias(w, w, vb.pp("cq"))?,
            ck: linear_no_bias(e, w, vb.pp("ck"))?,
            cv: linear_no_bias(e, w, vb.pp("cv"))?,
            co: linear(w, w, vb.pp("co"))?,
            ln_ff: LayerNorm::new(w, vb.pp("ln_ff"))?,
            ff1: linear(w, 2 * w, vb.pp("ff1"))?,
            ff2: linear(2 * w, w, vb.pp("ff2"))?,
        })
    }

    /// `q`: (B, M, w) queries; `tag`: (B, L, w); `patches`: (B, P, e).
    /// Self-attention runs over [q ; tag]; cross-attention and the FFN act
    /// on the query positions only.
    fn forward(&self, q: &Tensor, tag: &Tensor, patches: &Tensor) -> Result<(Tensor, Tensor)> {
        let m = q.dim(1)?;
        let seq = Tensor::cat(&[q, tag], 1)?;
        let n = self.ln_self.forward(&seq)?;
        let att = attention(
            &self.sq.forward(&n)?,
            &self.sk.forward(&n)?,
            &self.sv.forward(&n)?,
            None,
        )?;
        let seq = (seq + self.so.forward(&att)?)?;
        let q2 = seq.narrow(1, 0, m)?;
        let tag2 = seq.narrow(1, m, seq.dim(1)? - m)?;
        let n = self.ln_cross.forward(&q2)?;
        let att = attention(
            &self.cq.forward(&n)?,
            &self.ck.forward(patches)?,
            &self.cv.forward(patches)?,
            None,
        )?;
        let q2 = (q2 + self.co.forward(&att)?)?;
        let n = self.ln_ff.forward(&q2)?;
        let q2 = (q2 + self.ff2.forward(&silu(&self.ff1.forward(&n)?)?)?)?;
        Ok((q2, tag2))
    }
}

/// Attribute-specific extractor: learnable queries + 2 transformer blocks
/// mixing tag tokens and frozen image patch features.
pub struct QFormer {
    queries: Tensor,
    tag_embed: Embedding,
    tag_pos: Tensor,
    blocks: Vec<QBlock>,
}

impl QFormer {
    pub fn new(cfg: &AdapterConfig, vocab_size: usize, enc_width: usize, vb: VarBuilder) -> Result<Self> {
        let w = cfg.width;
        let queries = vb.get_with_hints(
            (cfg.m_tokens, w),
            "queries",
            candle_nn::Init::Randn {
                mean: 0.0,
                stdev: 0.02,
            },
        )?;
        let tag_embed = candle_nn::embedding(vocab_size, w, vb.pp("tag_embed"))?;
        let tag_pos = vb.get_with_hints(
            (MAX_TEXT_LEN, w),
            "tag_pos",
            candle_nn::Init::Randn {
                mean: 0.0,
                stdev: 0.02,
            },
        )?;
        let blocks = (0..cfg.blocks)
            .map(|i| QBlock::new(w, enc_width, vb.pp(format!("b{i}"))))
            .collect::<Result<_>>()?;
        Ok(QFormer {
            queries,
            tag_embed,
            tag_pos,
            blocks,
        })
    }

    /// (B, P, e) patches + (B, L) tag tokens -> (B, M, w).
    pub fn forward(&self, patches: &Tensor, tag_tokens: &Tensor) -> Result<Tensor> {
        let b = patches.dim(0)?;
        let mut q = self.queries.unsqueeze(0)?.expand((b, self.queries.dim(0)?, self.queries.dim(1)?))?;
        let mut tag = self
            .tag_embed
            .forward(tag_tokens)?
            .broadcast_add(&self.tag_pos.unsqueeze(0)?)?;
        for blk in &self.blocks {
            let (q2, tag2) = blk.forward(&q, &tag, patches)?;
            q = q2;
            tag = tag2;
        }
        Ok(q)
    }
}

/// Linear + LayerNorm from Q-Former width to the cross-attention dim d.
pub struct Projector {
    lin: Linear,
    ln: LayerNorm,
}

impl Projector {
    pub fn new(w: usize, d: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Projector {
            lin: linear(w, d, vb.pp("lin"))?,
            ln: LayerNorm::new(d, vb.pp("ln"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.ln.forward(&self.lin.forward(x)?)
    }
}

/// The assembled adapter: encoder (frozen during adapter training) +
/// Q-Former + projector. The U-Net's W'_k/W'_v complete the picture.
pub struct Adapter {
    cfg: AdapterConfig,
    pub encoder: ConvEncoder,
    pub qformer: QFormer,
    pub projector: Projector,
    device: Device,
    dtype: DType,
}

impl Adapter {
    /// `vb_frozen` roots the encoder (base group); `vb_train` roots the
    /// Q-Former and projector (adapter group).
    pub fn new(
        cfg: &AdapterConfig,
        vocab_size: usize,
        vb_frozen: VarBuilder,
        vb_train: VarBuilder,
    ) -> Result<Self> {
        let device = vb_train.device().clone();
        let dtype = vb_train.dtype();
        let enc_width = *cfg.enc_channels.last().unwrap();
        Ok(Adapter {
            cfg: cfg.clone(),
            encoder: ConvEncoder::new(&cfg.enc_channels, vb_frozen.pp("encoder"))?,
            qformer: QFormer::new(cfg, vocab_size, enc_width, vb_train.pp("qformer"))?,
            projector: Projector::new(cfg.width, cfg.attn_dim, vb_train.pp("projector"))?,
            device,
            dtype,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    /// F_k = Projector(QFormer(encode(V_k), tokenize(a_k))): (B, M, d).
    /// `imgs` is (B, 3, S, S) in [-1, 1]; `tags` is (B, L) token ids.
    pub fn extract(&self, imgs: &Tensor, tags: &Tensor) -> Result<Tensor> {
        let patches = self.encoder.forward(imgs)?;
        let q = self.qformer.forward(&patches, tags)?;
        self.projector.forward(&q)
    }

    /// F_zero: the feature of a zero image with the empty tag, (1, M, d).
    pub fn f_zero(&self) -> Result<Tensor> {
        let s = 32;
        let zero_img = Tensor::zeros((1, 3, s, s), self.dtype, &self.device)?;
        let empty = TextTokens::empty();
        let tags = Tensor::from_vec(empty.ids().to_vec(), (1, MAX_TEXT_LEN), &self.device)?;
        self.extract(&zero_img, &tags)
    }

    /// Concatenate up to N extracted slot features, pad with F_zero, and
    /// (in training) shuffle the block order. Output (1, N*M, d).
    pub fn assemble(
        &self,
        extracted: &[Tensor],
        training: bool,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        if extracted.len() > self.cfg.n_slots {
            return Err(Error::Contract(format!(
                "{} slots exceed N = {}",
                extracted.len(),
                self.cfg.n_slots
            )));
        }
        let mut blocks: Vec<Tensor> = extracted.to_vec();
        let fz = self.f_zero()?;
        while blocks.len() < self.cfg.n_slots {
            blocks.push(fz.clone());
        }
        if training {
            blocks.shuffle(rng);
        }
        let refs: Vec<&Tensor> = blocks.iter().collect();
        Ok(Tensor::cat(&refs, 1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_seeded;
    use candle_nn::{VarBuilder, VarMap};

    fn mk(dtype: DType) -> (Adapter, VarMap) {
        let dev = Device::Cpu;
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, dtype, &dev);
        let cfg = AdapterConfig::default();
        let a = Adapter::new(&cfg, 40, vb.pp("base"), vb.pp("adapter")).unwrap();
        (a, vm)
    }

    #[test]
    fn extract_shape_and_determinism() {
        let (a, _vm) = mk(DType::F64);
        let dev = Device::Cpu;
        let img = Tensor::randn(0.0f64, 0.5, (2, 3, 32, 32), &dev).unwrap();
        let tags = Tensor::from_vec(vec![1u32, 2, 0, 0, 0, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0], (2, 8), &dev).unwrap();
        let f1 = a.extract(&img, &tags).unwrap();
        let f2 = a.extract(&img, &tags).unwrap();
        assert_eq!(f1.dims(), &[2, 8, 64]);
        let diff: f64 = (f1 - f2).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn assemble_pads_to_n_blocks() {
        let (a, _vm) = mk(DType::F64);
        let dev = Device::Cpu;
        let img = Tensor::randn(0.0f64, 0.5, (1, 3, 32, 32), &dev).unwrap();
        let tags = Tensor::zeros((1, 8), DType::U32, &dev).unwrap();
        let f = a.extract(&img, &tags).unwrap();
        let mut rng = rng_seeded(0);
        let out = a.assemble(&[f.clone()], false, &mut rng).unwrap();
        assert_eq!(out.dims(), &[1, 24, 64]);
        // padded tail blocks equal F_zero
        let fz = a.f_zero().unwrap();
        let tail = out.narrow(1, 8, 8).unwrap();
        let diff: f64 = (tail - fz).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(diff, 0.0);
        // zero slots -> N copies of F_zero
        let all_pad = a.assemble(&[], false, &mut rng).unwrap();
        assert_eq!(all_pad.dims(), &[1, 24, 64]);
        // more than N slots -> contract error
        assert!(a.assemble(&[f.clone(), f.clone(), f.clone(), f], false, &mut rng).is_err());
    }

    #[test]
    fn encoder_locality() {
        let (a, _vm) = mk(DType::F64);
        let dev = Device::Cpu;
        let x1 = Tensor::zeros((1, 3, 32, 32), DType::F64, &dev).unwrap();
        // flip one pixel at (28, 28) and compare patch features
        let mut v = vec![0f64; 3 * 32 * 32];
        v[28 * 32 + 28] = 1.0;
        let x2 = Tensor::from_vec(v, (1, 3, 32, 32), &dev).unwrap();
        let f1 = a.encoder.forward(&x1).unwrap();
        let f2 = a.encoder.forward(&x2).unwrap();
        let d = (f1 - f2).unwrap().abs().unwrap().max(2).unwrap(); // (1, 64) per-patch max
        let per_patch = d.squeeze(0).unwrap().to_vec1::<f64>().unwrap();
        // pixel (28,28) lands in patch (7,7); patches beyond distance 1 are
        // outside the 3-conv receptive field
        for (i, &val) in per_patch.iter().enumerate() {
            let (py, px) = (i / 8, i % 8);
            if py.abs_diff(7) > 1 || px.abs_diff(7) > 1 {
                assert_eq!(val, 0.0, "patch ({py},{px}) leaked");
            }
        }
        let touched = per_patch[7 * 8 + 7];
        assert!(touched > 0.0);
    }
}
