//! Tiny epsilon-prediction U-Net: 32x32 pixel space, two downsampling
//! stages, timestep embedding, and dual text/image cross-attention at the
//! 16x16 and 8x8 resolutions.
//!
//! Parameters are partitioned into the `base` group (everything the
//! backbone pretraining owns) and the `adapter` group (the image-branch
//! key/value projections W'_k, W'_v of each attention site). With the image
//! branch unused, the forward pass is a pure function of (x_t, t, text).

use crate::nn::{attention, conv2d, conv3x3, linear, linear_no_bias, silu, timestep_embedding, upsample2, GroupNorm};
use crate::{Error, Result};
use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Conv2d, Embedding, Linear, Module, VarBuilder};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Image side length.
    pub size: usize,
    /// Channels at full resolution.
    pub base_channels: usize,
    /// Per-resolution channel multipliers; length = number of resolutions.
    pub ch_mults: Vec<usize>,
    /// Residual blocks per stage.
    pub blocks_per_stage: usize,
    /// Width d of text and image condition features entering cross-attention.
    pub attn_dim: usize,
    /// Diffusion steps T.
    pub t_steps: usize,
    /// Closed vocabulary size (taxonomy-derived).
    pub vocab_size: usize,
    /// Expected image-condition token count (N slots x M tokens).
    pub cond_tokens: usize,
}

impl BackboneConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        BackboneConfig {
            size: 32,
            base_channels: 32,
            ch_mults: vec![1, 2, 4],
            blocks_per_stage: 2,
            attn_dim: 64,
            t_steps: 200,
            vocab_size,
            cond_tokens: 24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ch_mults.len() < 2 {
            return Err(Error::Config("need at least two resolutions".into()));
        }
        if self.size % (1 << (self.ch_mults.len() - 1)) != 0 {
            return Err(Error::Config(format!(
                "size {} not divisible by 2^{}",
                self.size,
                self.ch_mults.len() - 1
            )));
        }
        Ok(())
    }
}

struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(c_in: usize, c_out: usize, temb: usize, vb: VarBuilder) -> Result<Self> {
        let groups = |c: usize| if c % 8 == 0 { 8 } else { 1 };
        Ok(ResBlock {
            gn1: GroupNorm::new(c_in, groups(c_in), vb.pp("gn1"))?,
            conv1: conv3x3(c_in, c_out, vb.pp("conv1"))?,
            emb: linear(temb, c_out, vb.pp("emb"))?,
            gn2: GroupNorm::new(c_out, groups(c_out), vb.pp("gn2"))?,
            conv2: conv3x3(c_out, c_out, vb.pp("conv2"))?,
            skip: if c_in == c_out {
                None
            } else {
                Some(conv2d(c_in, c_out, 1, 1, 0, vb.pp("skip"))?)
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.gn1.forward(x)?)?)?;
        let e = self.emb.forward(&silu(temb)?)?;
        let (b, c) = e.dims2()?;
        let h = h.broadcast_add(&e.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&silu(&self.gn2.forward(&h)?)?)?;
        let x = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((x + h)?)
    }
}

/// One dual cross-attention site: a text branch (W_q, W_k, W_v) plus an
/// image branch (W'_k, W'_v) that is additive with scale lambda.
pub struct DualCrossAttn {
    norm: GroupNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wk_img: Linear,
    wv_img: Linear,
    proj: Linear,
}

impl DualCrossAttn {
    fn new(c: usize, d: usize, vb_base: VarBuilder, vb_adapter: VarBuilder) -> Result<Self> {
        Ok(DualCrossAttn {
            norm: GroupNorm::new(c, if c % 8 == 0 { 8 } else { 1 }, vb_base.pp("norm"))?,
            wq: linear_no_bias(c, c, vb_base.pp("wq"))?,
            wk: linear_no_bias(d, c, vb_base.pp("wk"))?,
            wv: linear_no_bias(d, c, vb_base.pp("wv"))?,
            wk_img: linear_no_bias(d, c, vb_adapter.pp("wk_img"))?,
            wv_img: linear_no_bias(d, c, vb_adapter.pp("wv_img"))?,
            proj: linear(c, c, vb_base.pp("proj"))?,
        })
    }

    /// Z_new = softmax(Q K^T / sqrt(c)) V + lambda softmax(Q K'^T / sqrt(c)) V'
    /// applied residually over the spatial tokens of `x`.
    fn forward(
        &self,
        x: &Tensor,
        txt: &Tensor,
        cond: Option<&Tensor>,
        lambda: f64,
    ) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let z = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?; // (B, HW, c)
        let q = self.wq.forward(&z)?;
        let kt = self.wk.forward(txt)?;
        let vt = self.wv.forward(txt)?;
        let mut out = attention(&q, &kt, &vt, None)?;
        if let Some(f) = cond {
            let ki = self.wk_img.forward(f)?;
            let vi = self.wv_img.forward(f)?;
            let img = attention(&q, &ki, &vi, None)?;
            out = (out + (img * lambda)?)?;
        }
        let out = self.proj.forward(&out)?;
        let out = out.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

enum EncItem {
    Res(ResBlock, Option<DualCrossAttn>),
    Down(Conv2d),
}

struct DecItem {
    res: ResBlock,
    attn: Option<DualCrossAttn>,
    up: Option<Conv2d>, // applied after the stage's blocks
}

/// The epsilon predictor.
pub struct EpsPredictor {
    cfg: BackboneConfig,
    device: Device,
    dtype: DType,
    token_embed: Embedding,
    pos_embed: Tensor,
    t_lin1: Linear,
    t_lin2: Linear,
    conv_in: Conv2d,
    enc: Vec<EncItem>,
    mid_res1: ResBlock,
    mid_attn: DualCrossAttn,
    mid_res2: ResBlock,
    dec: Vec<DecItem>,
    out_gn: GroupNorm,
    out_conv: Conv2d,
    /// Attention-site paths relative to the group roots, for W' init copy.
    site_paths: Vec<String>,
    pub lambda: f64,
}

impl EpsPredictor {
    /// Build under `vb_base` ("base") and `vb_adapter` ("adapter") roots.
    pub fn new(cfg: &BackboneConfig, vb_base: VarBuilder, vb_adapter: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let device = vb_base.device().clone();
        let dtype = vb_base.dtype();
        let d = cfg.attn_dim;
        let temb = cfg.base_channels * 4;
        let vb = vb_base.pp("unet");
        let vba = vb_adapter.pp("dual");
        let mut site_paths = Vec::new();

        let token_embed = candle_nn::embedding(cfg.vocab_size, d, vb.pp("token_embed"))?;
        let pos_embed = vb.get_with_hints(
            (super::text::MAX_TEXT_LEN, d),
            "pos_embed",
            candle_nn::Init::Randn {
                mean: 0.0,
                stdev: 0.02,
            },
        )?;
        let t_lin1 = linear(temb, temb, vb.pp("t_lin1"))?;
        let t_lin2 = linear(temb, temb, vb.pp("t_lin2"))?;

        let chans: Vec<usize> = cfg.ch_mults.iter().map(|m| m * cfg.base_channels).collect();
        let n_stages = chans.len();
        // attention everywhere except full resolution
        let has_attn = |stage: usize| stage >= 1;

        let conv_in = conv3x3(3, chans[0], vb.pp("conv_in"))?;
        let mut enc = Vec::new();
        let mut skip_chans = vec![chans[0]];
        let mut c_cur = chans[0];
        for (i, &c_out) in chans.iter().enumerate() {
            for b in 0..cfg.blocks_per_stage {
                let path = format!("enc{i}b{b}");
                let res = ResBlock::new(c_cur, c_out, temb, vb.pp(&path))?;
                let attn = if has_attn(i) {
                    site_paths.push(path.clone());
                    Some(DualCrossAttn::new(c_out, d, vb.pp(&path), vba.pp(&path))?)
                } else {
                    None
                };
                enc.push(EncItem::Res(res, attn));
                c_cur = c_out;
                skip_chans.push(c_cur);
            }
            if i + 1 < n_stages {
                enc.push(EncItem::Down(conv2d(
                    c_cur,
                    c_cur,
                    3,
                    2,
                    1,
                    vb.pp(format!("down{i}")),
                )?));
                skip_chans.push(c_cur);
            }
        }

        let mid_res1 = ResBlock::new(c_cur, c_cur, temb, vb.pp("mid_res1"))?;
        site_paths.push("mid".to_string());
        let mid_attn = DualCrossAttn::new(c_cur, d, vb.pp("mid"), vba.pp("mid"))?;
        let mid_res2 = ResBlock::new(c_cur, c_cur, temb, vb.pp("mid_res2"))?;

        let mut dec = Vec::new();
        for (i, &c_out) in chans.iter().enumerate().rev() {
            for b in 0..=cfg.blocks_per_stage {
                let skip_c = skip_chans.pop().expect("skip bookkeeping");
                let path = format!("dec{i}b{b}");
                let res = ResBlock::new(c_cur + skip_c, c_out, temb, vb.pp(&path))?;
                let attn = if has_attn(i) {
                    site_paths.push(path.clone());
                    Some(DualCrossAttn::new(c_out, d, vb.pp(&path), vba.pp(&path))?)
                } else {
                    None
                };
                let up = if b == cfg.blocks_per_stage && i > 0 {
                    Some(conv3x3(c_out, c_out, vb.pp(format!("up{i}")))?)
                } else {
                    None
                };
                dec.push(DecItem { res, attn, up });
                c_cur = c_out;
            }
        }
        assert!(skip_chans.is_empty(), "skip bookkeeping");

        let out_gn = GroupNorm::new(chans[0], 8.min(chans[0]), vb.pp("out_gn"))?;
        let out_conv = conv3x3(chans[0], 3, vb.pp("out_conv"))?;

        Ok(EpsPredictor {
            cfg: cfg.clone(),
            device,
            dtype,
            token_embed,
            pos_embed,
            t_lin1,
            t_lin2,
            conv_in,
            enc,
            mid_res1,
            mid_attn,
            mid_res2,
            dec,
            out_gn,
            out_conv,
            site_paths,
            lambda: 1.0,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Text features F_t: token embeddings plus learned positions, (B, L, d).
    pub fn embed_text(&self, tokens: &Tensor) -> Result<Tensor> {
        let e = self.token_embed.forward(tokens)?;
        Ok(e.broadcast_add(&self.pos_embed.unsqueeze(0)?)?)
    }

    /// Copy each site's W_k/W_v into the adapter branch's W'_k/W'_v, the
    /// paper-mandated initialization. Call on a fresh adapter.
    pub fn init_dual_from_base(&self, varmap: &candle_nn::VarMap) -> Result<()> {
        let data = varmap.data().lock().unwrap();
        for site in &self.site_paths {
            for (src, dst) in [("wk", "wk_img"), ("wv", "wv_img")] {
                let from = format!("base.unet.{site}.{src}.weight");
                let to = format!("adapter.dual.{site}.{dst}.weight");
                let src_var = data
                    .get(&from)
                    .ok_or_else(|| Error::Contract(format!("missing var {from}")))?;
                let dst_var = data
                    .get(&to)
                    .ok_or_else(|| Error::Contract(format!("missing var {to}")))?;
                dst_var.set(src_var.as_tensor())?;
            }
        }
        Ok(())
    }

    pub fn site_paths(&self) -> &[String] {
        &self.site_paths
    }

    /// Predict epsilon. `tokens` is (B, L) u32; `cond` when present must be
    /// (B, cond_tokens, attn_dim).
    pub fn forward(&self, x_t: &Tensor, t: &Tensor, tokens: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let (b, c, hh, ww) = x_t.dims4()?;
        if c != 3 || hh != self.cfg.size || ww != self.cfg.size {
            return Err(Error::Contract(format!(
                "x_t must be (B,3,{0},{0}), got {1:?}",
                self.cfg.size,
                x_t.dims()
            )));
        }
        if let Some(f) = cond {
            let dims = f.dims();
            if dims != [b, self.cfg.cond_tokens, self.cfg.attn_dim] {
                return Err(Error::Contract(format!(
                    "image_cond must be ({b}, {}, {}), got {dims:?}",
                    self.cfg.cond_tokens, self.cfg.attn_dim
                )));
            }
        }
        let temb_dim = self.cfg.base_channels * 4;
        let temb = timestep_embedding(t, temb_dim, self.dtype, &self.device)?;
        let temb = self.t_lin2.forward(&silu(&self.t_lin1.forward(&temb)?)?)?;
        let txt = self.embed_text(tokens)?;

        let mut h = self.conv_in.forward(x_t)?;
        let mut skips = vec![h.clone()];
        for item in &self.enc {
            match item {
                EncItem::Res(res, attn) => {
                    h = res.forward(&h, &temb)?;
                    if let Some(a) = attn {
                        h = a.forward(&h, &txt, cond, self.lambda)?;
                    }
                    skips.push(h.clone());
                }
                EncItem::Down(conv) => {
                    h = conv.forward(&h)?;
                    skips.push(h.clone());
                }
            }
        }
        h = self.mid_res1.forward(&h, &temb)?;
        h = self.mid_attn.forward(&h, &txt, cond, self.lambda)?;
        h = self.mid_res2.forward(&h, &temb)?;
        for item in &self.dec {
            let skip = skips.pop().expect("skip stack");
            h = Tensor::cat(&[&h, &skip], 1)?;
            h = item.res.forward(&h, &temb)?;
            if let Some(a) = &item.attn {
                h = a.forward(&h, &txt, cond, self.lambda)?;
            }
            if let Some(up) = &item.up {
                h = up.forward(&upsample2(&h)?)?;
            }
        }
        debug_assert!(skips.is_empty());
        let out = self.out_conv.forward(&silu(&self.out_gn.forward(&h)?)?)?;
        Ok(out)
    }
}

/// Standalone dual cross-attention evaluation used by the adapter contract
/// tests: plain (N, d)-shaped single-instance inputs, no batching.
#[allow(clippy::too_many_arguments)]
pub fn dual_cross_attention(
    z: &Tensor,
    f_t: &Tensor,
    f_img: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wk_img: &Tensor,
    wv_img: &Tensor,
    lambda: f64,
) -> Result<Tensor> {
    let q = z.matmul(wq)?;
    let k = f_t.matmul(wk)?;
    let v = f_t.matmul(wv)?;
    let ki = f_img.matmul(wk_img)?;
    let vi = f_img.matmul(wv_img)?;
    let d = q.dim(D::Minus1)? as f64;
    let scale = 1.0 / d.sqrt();
    let text = candle_nn::ops::softmax(&(q.matmul(&k.t()?)? * scale)?, D::Minus1)?.matmul(&v)?;
    let img = candle_nn::ops::softmax(&(q.matmul(&ki.t()?)? * scale)?, D::Minus1)?.matmul(&vi)?;
    Ok((text + (img * lambda)?)?)
}
