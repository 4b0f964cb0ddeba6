//! DDIM sampler with classifier-free guidance. Deterministic given the
//! seed: initial noise comes from the pipeline's own generator, never the
//! tensor library's.

use super::schedule::NoiseSchedule;
use super::text::TextTokens;
use super::unet::EpsPredictor;
use crate::img::Image;
use crate::rng::{rng_from, standard_normal};
use crate::Result;
use candle_core::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct SampleOpts {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SampleOpts {
    fn default() -> Self {
        SampleOpts {
            steps: 50,
            guidance: 2.0,
            seed: 0,
        }
    }
}

/// Generate one image. `cond`/`uncond` are the image-condition feature
/// blocks for the conditional and unconditional branches (None = backbone
/// text-only sampling). With guidance = 1 the unconditional branch is never
/// evaluated and the trajectory is purely conditional.
pub fn sample(
    model: &EpsPredictor,
    schedule: &NoiseSchedule,
    text: &TextTokens,
    cond: Option<&Tensor>,
    uncond: Option<&Tensor>,
    opts: &SampleOpts,
) -> Result<Image> {
    let dev = model.device().clone();
    let dtype = model.dtype();
    let s = model.config().size;
    let mut rng = rng_from(opts.seed, "ddim");
    let noise = standard_normal(&mut rng, 3 * s * s);
    let mut x = Tensor::from_vec(noise, (1, 3, s, s), &dev)?.to_dtype(dtype)?;

    let tokens = Tensor::from_vec(text.ids().to_vec(), (1, super::text::MAX_TEXT_LEN), &dev)?;
    let empty = TextTokens::empty();
    let utokens = Tensor::from_vec(empty.ids().to_vec(), (1, super::text::MAX_TEXT_LEN), &dev)?;

    let t_max = schedule.t_steps - 1;
    let steps = opts.steps.max(2).min(schedule.t_steps);
    let ts: Vec<usize> = (0..steps)
        .map(|i| t_max * i / (steps - 1))
        .collect();

    for i in (0..steps).rev() {
        let t = ts[i];
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = if i == 0 { 1.0 } else { schedule.alpha_bar(ts[i - 1]) };
        let t_tensor = Tensor::from_vec(vec![t as u32], 1, &dev)?;
        let eps_c = model.forward(&x, &t_tensor, &tokens, cond)?;
        let eps = if (opts.guidance - 1.0).abs() < 1e-12 {
            eps_c
        } else {
            let eps_u = model.forward(&x, &t_tensor, &utokens, uncond)?;
            // eps_u + g (eps_c - eps_u)
            (&eps_u + ((eps_c - &eps_u)? * opts.guidance)?)?
        };
        // x0 estimate, clamped to the image range
        let x0 = ((&x - (&eps * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?;
        let x0 = x0.clamp(-1.0, 1.0)?;
        x = ((x0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?;
    }
    super::tensor_to_image(&x.squeeze(0)?)
}
