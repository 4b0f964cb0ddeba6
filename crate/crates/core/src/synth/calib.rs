//! Oracle binning thresholds. The committed constants come from a one-time
//! calibration run over seeded renders (`calibrate` in this module, exposed
//! through the CLI); they are never hand-tuned.

use crate::rng::rng_from;
use crate::synth::render::render_subject;
use crate::synth::{apply_attribute, classify::TemplateBank};
use crate::taxonomy::Taxonomy;
use crate::{Image, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_CALIBRATION_TOML: &str = include_str!("../../assets/calibration.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibConstants {
    pub schema_version: u32,
    /// Minimum saturation-weighted foreground mass for a hue estimate.
    pub color_min_weight: f64,
    /// Minimum fitted luminance span across the canvas for a ramp estimate.
    pub lighting_min_gradient: f64,
    /// Laplacian/gradient energy ratio separating sharp from soft focus.
    pub focus_sharp_min: f64,
    /// Ratio separating soft focus from strong blur.
    pub focus_soft_min: f64,
    /// Minimum interior structure-tensor coherence for a stripe estimate.
    pub stroke_min_coherence: f64,
    /// Fraction of covered mask pixels at intermediate values above which an
    /// image counts as motion-smeared.
    pub dynamics_motion_min_softness: f64,
    /// Circular autocorrelation threshold for replication periods.
    pub rhythm_corr_threshold: f64,
    /// Reflection correlation above which a mirror axis is present.
    pub design_axis_threshold: f64,
    /// Max template score observed on pure-noise images; scores below this
    /// reject the subject classification.
    pub subject_noise_rejection: f64,
}

impl CalibConstants {
    pub fn load_default() -> Self {
        toml::from_str(DEFAULT_CALIBRATION_TOML).expect("bundled calibration parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Summary of the measured separations behind each threshold, kept for audit.
#[derive(Debug, Clone, Serialize)]
pub struct CalibReport {
    pub constants: CalibConstants,
    pub focus_ratio_ranges: Vec<(f64, f64)>,
    pub still_softness_max: f64,
    pub motion_softness_min: f64,
    pub offaxis_reflection_max: f64,
    pub rhythm_offpeak_max: f64,
    pub noise_score_max: f64,
}

/// One-time calibration: measure raw oracle values over seeded renders and
/// place each threshold at the midpoint of the observed separation.
pub fn calibrate(tax: &Taxonomy, size: usize, seeds: u64, seed0: u64) -> Result<CalibReport> {
    let mut rng = rng_from(seed0, "calibration");

    // focus: ratio distribution per sigma level over all leaves
    let mut focus_vals: Vec<Vec<f64>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for (i, kw) in ["sharp", "soft_focus", "strong_blur"].iter().enumerate() {
        for leaf in tax.tree.leaves() {
            for _ in 0..seeds {
                let base = render_subject(tax, leaf, size, &mut rng)?;
                let attr = tax.instantiate(kw, &mut rng)?;
                let out = apply_attribute(tax, &base, leaf, &attr)?;
                // measure the 8-bit round-tripped image: the corpus is stored
                // as PNG and quantization noise matters at strong blur
                let lum = deplane(&presmooth(&out.image.quantized().luminance()));
                let (gx, gy) = grad(&lum);
                let ratio = lap_mean(&lum) / grad_mean(&gx, &gy).max(1e-9);
                focus_vals[i].push(ratio);
            }
        }
    }
    let lo = |v: &Vec<f64>| v.iter().cloned().fold(f64::MAX, f64::min);
    let hi = |v: &Vec<f64>| v.iter().cloned().fold(f64::MIN, f64::max);
    let focus_sharp_min = (lo(&focus_vals[0]) + hi(&focus_vals[1])) / 2.0;
    let focus_soft_min = (lo(&focus_vals[1]) + hi(&focus_vals[2])) / 2.0;

    // dynamics: mask-softness of still vs motion-smeared renders over the
    // compatible leaves
    let mut still_max = f64::MIN;
    let mut motion_min = f64::MAX;
    let still_spec = tax.spec("still")?.clone();
    let dyn_leaves = tax.compatible_subjects(&still_spec);
    for leaf in &dyn_leaves {
        for kw in ["still", "motion_0", "motion_45", "motion_90", "motion_135"] {
            for _ in 0..seeds {
                let base = render_subject(tax, leaf, size, &mut rng)?;
                let attr = tax.instantiate(kw, &mut rng)?;
                let out = apply_attribute(tax, &base, leaf, &attr)?;
                let mut covered = 0usize;
                let mut soft = 0usize;
                for &m in out.mask.iter() {
                    if m > 0.02 {
                        covered += 1;
                        if m < 0.98 {
                            soft += 1;
                        }
                    }
                }
                let f = soft as f64 / covered.max(1) as f64;
                if kw == "still" {
                    still_max = still_max.max(f);
                } else {
                    motion_min = motion_min.min(f);
                }
            }
        }
    }
    let dynamics_motion_min_softness = (still_max + motion_min) / 2.0;

    // design: off-axis reflection correlation on asymmetric renders
    let mut offaxis_max = f64::MIN;
    for leaf in tax.tree.leaves() {
        for kw in ["free_form", "mirror_vertical", "mirror_horizontal"] {
            for _ in 0..seeds {
                let base = render_subject(tax, leaf, size, &mut rng)?;
                let attr = tax.instantiate(kw, &mut rng)?;
                let out = apply_attribute(tax, &base, leaf, &attr)?;
                let lum = out.image.quantized().luminance();
                let (h, w) = lum.dim();
                let cv = corr(&lum, &ndarray::Array2::from_shape_fn((h, w), |(y, x)| lum[[y, w - 1 - x]]));
                let ch = corr(&lum, &ndarray::Array2::from_shape_fn((h, w), |(y, x)| lum[[h - 1 - y, x]]));
                match kw {
                    "free_form" => offaxis_max = offaxis_max.max(cv.max(ch)),
                    "mirror_vertical" => offaxis_max = offaxis_max.max(ch),
                    _ => offaxis_max = offaxis_max.max(cv),
                }
            }
        }
    }
    // mirrored axes sit at exactly 1.0
    let design_axis_threshold = (offaxis_max + 1.0) / 2.0;

    // rhythm: off-peak autocorrelation on single renders
    let mut offpeak_max = f64::MIN;
    for leaf in tax.tree.leaves() {
        for _ in 0..seeds {
            let base = render_subject(tax, leaf, size, &mut rng)?;
            let rx = acorr(&base.mask, 0, size / 2);
            let ry = acorr(&base.mask, size / 2, 0);
            offpeak_max = offpeak_max.max(rx.max(ry));
        }
    }
    let rhythm_corr_threshold = (offpeak_max + 1.0) / 2.0;

    // subject classifier noise rejection: max template score on pure noise
    let bank = TemplateBank::build(tax, size)?;
    let mut noise_max = f64::MIN;
    for _ in 0..1000 {
        let mut img = Image::new(size, size);
        for v in img.pixels.iter_mut() {
            *v = rand::Rng::gen_range(&mut rng, 0.0..1.0);
        }
        let (_, score) = bank.classify_raw(&img);
        noise_max = noise_max.max(score);
    }

    let constants = CalibConstants {
        schema_version: 1,
        color_min_weight: 4.0,
        lighting_min_gradient: 0.08,
        focus_sharp_min,
        focus_soft_min,
        stroke_min_coherence: 0.2,
        dynamics_motion_min_softness,
        rhythm_corr_threshold,
        design_axis_threshold,
        subject_noise_rejection: noise_max + 0.02,
    };
    Ok(CalibReport {
        constants,
        focus_ratio_ranges: focus_vals
            .iter()
            .map(|v| (lo(v), hi(v)))
            .collect(),
        still_softness_max: still_max,
        motion_softness_min: motion_min,
        offaxis_reflection_max: offaxis_max,
        rhythm_offpeak_max: offpeak_max,
        noise_score_max: noise_max,
    })
}

// small local copies of the oracle building blocks so calibration stays an
// independent measurement path
fn presmooth(lum: &ndarray::Array2<f32>) -> ndarray::Array2<f32> {
    let (h, w) = lum.dim();
    let cl = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let pass = |src: &ndarray::Array2<f32>, dy: isize, dx: isize| {
        ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
            0.25 * src[[cl(y as isize - dy, h), cl(x as isize - dx, w)]]
                + 0.5 * src[[y, x]]
                + 0.25 * src[[cl(y as isize + dy, h), cl(x as isize + dx, w)]]
        })
    };
    pass(&pass(lum, 0, 1), 1, 0)
}

fn deplane(lum: &ndarray::Array2<f32>) -> ndarray::Array2<f32> {
    let (h, w) = lum.dim();
    let mx = (w as f64 - 1.0) / 2.0;
    let my = (h as f64 - 1.0) / 2.0;
    let mz = lum.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
    let (mut sxx, mut syy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - mx;
            let dy = y as f64 - my;
            let dz = lum[[y, x]] as f64 - mz;
            sxx += dx * dx;
            syy += dy * dy;
            sxz += dx * dz;
            syz += dy * dz;
        }
    }
    let a = if sxx > 1e-9 { sxz / sxx } else { 0.0 };
    let b = if syy > 1e-9 { syz / syy } else { 0.0 };
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        lum[[y, x]] - (mz + a * (x as f64 - mx) + b * (y as f64 - my)) as f32
    })
}

fn grad(lum: &ndarray::Array2<f32>) -> (ndarray::Array2<f32>, ndarray::Array2<f32>) {
    let (h, w) = lum.dim();
    let mut gx = ndarray::Array2::zeros((h, w));
    let mut gy = ndarray::Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            gx[[y, x]] = (lum[[y, xp]] - lum[[y, xm]]) * 0.5;
            gy[[y, x]] = (lum[[yp, x]] - lum[[ym, x]]) * 0.5;
        }
    }
    (gx, gy)
}

fn lap_mean(lum: &ndarray::Array2<f32>) -> f64 {
    let (h, w) = lum.dim();
    let mut acc = 0.0f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let l = lum[[y + 1, x]] + lum[[y - 1, x]] + lum[[y, x + 1]] + lum[[y, x - 1]]
                - 4.0 * lum[[y, x]];
            acc += l.abs() as f64;
        }
    }
    acc / ((h - 2) * (w - 2)) as f64
}

fn grad_mean(gx: &ndarray::Array2<f32>, gy: &ndarray::Array2<f32>) -> f64 {
    gx.iter()
        .zip(gy.iter())
        .map(|(&a, &b)| ((a * a + b * b) as f64).sqrt())
        .sum::<f64>()
        / gx.len() as f64
}

fn corr(a: &ndarray::Array2<f32>, b: &ndarray::Array2<f32>) -> f64 {
    let n = a.len() as f64;
    let ma = a.sum() as f64 / n;
    let mb = b.sum() as f64 / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        num += (x as f64 - ma) * (y as f64 - mb);
        va += (x as f64 - ma).powi(2);
        vb += (y as f64 - mb).powi(2);
    }
    if va < 1e-12 || vb < 1e-12 {
        0.0
    } else {
        num / (va * vb).sqrt()
    }
}

fn acorr(plane: &ndarray::Array2<f32>, dy: usize, dx: usize) -> f64 {
    let (h, w) = plane.dim();
    let mean = plane.sum() as f64 / plane.len() as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for y in 0..h {
        for x in 0..w {
            let a = plane[[y, x]] as f64 - mean;
            let b = plane[[(y + dy) % h, (x + dx) % w]] as f64 - mean;
            num += a * b;
            den += a * a;
        }
    }
    if den < 1e-12 {
        0.0
    } else {
        num / den
    }
}
