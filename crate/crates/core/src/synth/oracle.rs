//! Deterministic pixel-level attribute estimators. Each class has a
//! measurement recovering the rendered parameter, binned into the class's
//! discrete label set with thresholds from the stored calibration run.

use crate::img::rgb_to_hue;
use crate::synth::calib::CalibConstants;
use crate::taxonomy::AttributeClass;
use crate::Image;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub attr_class: AttributeClass,
    /// Raw measurement in class units (degrees, energy ratio, correlation).
    pub value: f64,
    /// Discrete class index; `None` when the image is unmeasurable.
    pub label: Option<usize>,
    pub confidence: f64,
}

impl Measurement {
    fn unmeasurable(class: AttributeClass) -> Self {
        Measurement {
            attr_class: class,
            value: 0.0,
            label: None,
            confidence: 0.0,
        }
    }
}

/// Least-squares plane fit to the border pixels; models the background under
/// a global lighting ramp (a constant background is the degenerate case).
fn border_plane(lum: &Array2<f32>) -> impl Fn(usize, usize) -> f32 {
    let (h, w) = lum.dim();
    let mut pts: Vec<(f64, f64, f64)> = Vec::new();
    for x in 0..w {
        pts.push((x as f64, 0.0, lum[[0, x]] as f64));
        pts.push((x as f64, (h - 1) as f64, lum[[h - 1, x]] as f64));
    }
    for y in 1..h - 1 {
        pts.push((0.0, y as f64, lum[[y, 0]] as f64));
        pts.push(((w - 1) as f64, y as f64, lum[[y, w - 1]] as f64));
    }
    let n = pts.len() as f64;
    let (mut sx, mut sy, mut sz) = (0.0, 0.0, 0.0);
    for &(x, y, z) in &pts {
        sx += x;
        sy += y;
        sz += z;
    }
    let (mx, my, mz) = (sx / n, sy / n, sz / n);
    let (mut sxx, mut syy, mut sxy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y, z) in &pts {
        let (dx, dy, dz) = (x - mx, y - my, z - mz);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
        sxz += dx * dz;
        syz += dy * dz;
    }
    let det = sxx * syy - sxy * sxy;
    let (a, b) = if det.abs() < 1e-9 {
        (0.0, 0.0)
    } else {
        ((sxz * syy - syz * sxy) / det, (syz * sxx - sxz * sxy) / det)
    };
    move |y: usize, x: usize| (mz + a * (x as f64 - mx) + b * (y as f64 - my)) as f32
}

/// Estimate a foreground mask by deviation from the fitted background plane
/// plus saturation. Used when the renderer's mask is unavailable.
pub fn estimate_mask(img: &Image) -> Array2<f32> {
    let lum = img.luminance();
    let (h, w) = lum.dim();
    let bg = border_plane(&lum);
    let raw = Array2::from_shape_fn((h, w), |(y, x)| {
        let sat = rgb_to_hue(
            img.pixels[[y, x, 0]],
            img.pixels[[y, x, 1]],
            img.pixels[[y, x, 2]],
        )
        .map(|(_, s)| s)
        .unwrap_or(0.0);
        if (lum[[y, x]] - bg(y, x)).abs() > 0.12 || sat > 0.25 {
            1.0f32
        } else {
            0.0
        }
    });
    // morphological closing so stripe troughs that dip to background
    // luminance do not punch holes in the estimate
    let r = 2i32;
    let dilated = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut m = 0.0f32;
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = y as i32 + dy;
                let xx = x as i32 + dx;
                if yy >= 0 && yy < h as i32 && xx >= 0 && xx < w as i32 {
                    m = m.max(raw[[yy as usize, xx as usize]]);
                }
            }
        }
        m
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut m = 1.0f32;
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = y as i32 + dy;
                let xx = x as i32 + dx;
                if yy >= 0 && yy < h as i32 && xx >= 0 && xx < w as i32 {
                    m = m.min(dilated[[yy as usize, xx as usize]]);
                } else {
                    m = 0.0;
                }
            }
        }
        m
    })
}

/// Continuous foreground coverage estimate in [0,1], preserving the
/// intermediate values that blur and smear introduce at shape boundaries.
pub fn estimate_soft_mask(img: &Image) -> Array2<f32> {
    let lum = img.luminance();
    let (h, w) = lum.dim();
    let bg = border_plane(&lum);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sat = rgb_to_hue(
            img.pixels[[y, x, 0]],
            img.pixels[[y, x, 1]],
            img.pixels[[y, x, 2]],
        )
        .map(|(_, s)| s)
        .unwrap_or(0.0);
        (((lum[[y, x]] - bg(y, x)).abs() / 0.30).max(sat / 0.7)).clamp(0.0, 1.0)
    })
}

/// Separable [1,2,1]/4 smoothing. Knocks down 8-bit quantization noise,
/// which otherwise dominates second derivatives on strongly blurred images.
fn smooth3(lum: &Array2<f32>) -> Array2<f32> {
    let (h, w) = lum.dim();
    let cl = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let xi = x as isize;
            tmp[[y, x]] = 0.25 * lum[[y, cl(xi - 1, w)]]
                + 0.5 * lum[[y, x]]
                + 0.25 * lum[[y, cl(xi + 1, w)]];
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        let yi = y as isize;
        for x in 0..w {
            out[[y, x]] = 0.25 * tmp[[cl(yi - 1, h), x]]
                + 0.5 * tmp[[y, x]]
                + 0.25 * tmp[[cl(yi + 1, h), x]];
        }
    }
    out
}

/// Subtract the least-squares luminance plane over the full canvas. Second
/// derivatives are unchanged; only constant gradients are removed.
fn flatten_plane(lum: &Array2<f32>) -> Array2<f32> {
    let (h, w) = lum.dim();
    let n = (h * w) as f64;
    let mx = (w as f64 - 1.0) / 2.0;
    let my = (h as f64 - 1.0) / 2.0;
    let mut mz = 0.0;
    let (mut sxx, mut syy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            mz += lum[[y, x]] as f64;
        }
    }
    mz /= n;
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
    Array2::from_shape_fn((h, w), |(y, x)| {
        lum[[y, x]] - (mz + a * (x as f64 - mx) + b * (y as f64 - my)) as f32
    })
}

fn gradients(lum: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = lum.dim();
    let mut gx = Array2::zeros((h, w));
    let mut gy = Array2::zeros((h, w));
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

fn laplacian_abs_mean(lum: &Array2<f32>) -> f64 {
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

fn gradient_abs_mean(gx: &Array2<f32>, gy: &Array2<f32>) -> f64 {
    let n = gx.len() as f64;
    gx.iter()
        .zip(gy.iter())
        .map(|(&a, &b)| ((a * a + b * b) as f64).sqrt())
        .sum::<f64>()
        / n
}

/// Structure tensor summary over weighted pixels: dominant gradient
/// orientation in [0,180) degrees plus coherence in [0,1].
fn structure_tensor(gx: &Array2<f32>, gy: &Array2<f32>, weight: &Array2<f32>) -> (f64, f64) {
    let mut jxx = 0.0f64;
    let mut jyy = 0.0f64;
    let mut jxy = 0.0f64;
    for ((&a, &b), &wt) in gx.iter().zip(gy.iter()).zip(weight.iter()) {
        let wt = wt as f64;
        jxx += wt * (a * a) as f64;
        jyy += wt * (b * b) as f64;
        jxy += wt * (a * b) as f64;
    }
    let trace = jxx + jyy;
    if trace < 1e-12 {
        return (0.0, 0.0);
    }
    let diff = jxx - jyy;
    let coherence = (diff * diff + 4.0 * jxy * jxy).sqrt() / trace;
    let orient = 0.5 * (2.0 * jxy).atan2(diff);
    ((orient.to_degrees()).rem_euclid(180.0), coherence)
}

fn nearest_angle_label(angle: f64, buckets: &[f64], modulus: f64) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::MAX;
    for (i, &b) in buckets.iter().enumerate() {
        let mut d = (angle - b).rem_euclid(modulus);
        if d > modulus / 2.0 {
            d = modulus - d;
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

/// Circular autocorrelation of a zero-mean plane at an integer shift,
/// normalized by variance.
fn circular_autocorr(plane: &Array2<f32>, dy: usize, dx: usize) -> f64 {
    let (h, w) = plane.dim();
    let mean = plane.sum() as f64 / plane.len() as f64;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
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

fn pearson(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    let n = a.len() as f64;
    let ma = a.sum() as f64 / n;
    let mb = b.sum() as f64 / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        num += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va < 1e-12 || vb < 1e-12 {
        0.0
    } else {
        num / (va * vb).sqrt()
    }
}

pub fn measure_attribute(
    img: &Image,
    attr_class: AttributeClass,
    fg_mask: Option<&Array2<f32>>,
    calib: &CalibConstants,
) -> Measurement {
    if img.is_constant() {
        return Measurement::unmeasurable(attr_class);
    }
    let owned_mask;
    let mask: &Array2<f32> = match fg_mask {
        Some(m) => m,
        None => {
            owned_mask = estimate_mask(img);
            &owned_mask
        }
    };
    let lum = img.luminance();
    match attr_class {
        AttributeClass::Color => measure_color(img, mask, calib),
        AttributeClass::Lighting => measure_lighting(&lum, calib),
        AttributeClass::FocusDof => measure_focus(&lum, calib),
        AttributeClass::Stroke => measure_stroke(&lum, mask, calib),
        AttributeClass::Dynamics => {
            // needs the soft coverage values; the renderer mask keeps them but
            // the thresholded estimate does not
            let soft;
            let m = match fg_mask {
                Some(m) => m,
                None => {
                    soft = estimate_soft_mask(img);
                    &soft
                }
            };
            measure_dynamics(m, calib)
        }
        AttributeClass::Rhythm => measure_rhythm(mask, calib),
        AttributeClass::Design => measure_design(&lum, calib),
    }
}

fn measure_color(img: &Image, mask: &Array2<f32>, calib: &CalibConstants) -> Measurement {
    let (h, w) = mask.dim();
    let mut sx = 0.0f64;
    let mut sy = 0.0f64;
    let mut total = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let c = mask[[y, x]];
            if c < 0.5 {
                continue;
            }
            if let Some((hue, sat)) = rgb_to_hue(
                img.pixels[[y, x, 0]],
                img.pixels[[y, x, 1]],
                img.pixels[[y, x, 2]],
            ) {
                let wt = (c * sat) as f64;
                sx += wt * (hue as f64).to_radians().cos();
                sy += wt * (hue as f64).to_radians().sin();
                total += wt;
            }
        }
    }
    if total < calib.color_min_weight {
        return Measurement::unmeasurable(AttributeClass::Color);
    }
    let mean = sy.atan2(sx).to_degrees().rem_euclid(360.0);
    let buckets = [0.0, 60.0, 120.0, 180.0, 240.0, 300.0];
    let (label, dist) = nearest_angle_label(mean, &buckets, 360.0);
    Measurement {
        attr_class: AttributeClass::Color,
        value: mean,
        label: Some(label),
        confidence: (1.0 - dist / 30.0).clamp(0.0, 1.0),
    }
}

fn measure_lighting(lum: &Array2<f32>, calib: &CalibConstants) -> Measurement {
    // least-squares plane a + b*x + c*y over the full canvas
    let (h, w) = lum.dim();
    let n = (h * w) as f64;
    let mx = (w as f64 - 1.0) / 2.0;
    let my = (h as f64 - 1.0) / 2.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxz = 0.0;
    let mut syz = 0.0;
    let mz = lum.sum() as f64 / n;
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
    let b = sxz / sxx;
    let c = syz / syy;
    let grad = (b * b + c * c).sqrt() * w as f64; // luminance span across canvas
    if grad < calib.lighting_min_gradient {
        return Measurement::unmeasurable(AttributeClass::Lighting);
    }
    let dir = c.atan2(b).to_degrees().rem_euclid(360.0);
    let buckets = [0.0, 90.0, 180.0, 270.0];
    let (label, dist) = nearest_angle_label(dir, &buckets, 360.0);
    Measurement {
        attr_class: AttributeClass::Lighting,
        value: dir,
        label: Some(label),
        confidence: (1.0 - dist / 45.0).clamp(0.0, 1.0),
    }
}

fn measure_focus(lum: &Array2<f32>, calib: &CalibConstants) -> Measurement {
    // remove the global luminance plane so a lighting ramp's constant
    // gradient does not inflate the denominator
    let lum = flatten_plane(&smooth3(lum));
    let lum = &lum;
    let (gx, gy) = gradients(lum);
    let grad = gradient_abs_mean(&gx, &gy);
    if grad < 1e-6 {
        return Measurement::unmeasurable(AttributeClass::FocusDof);
    }
    // second-to-first derivative energy ratio; shape-amount invariant
    let ratio = laplacian_abs_mean(lum) / grad;
    let label = if ratio >= calib.focus_sharp_min {
        0
    } else if ratio >= calib.focus_soft_min {
        1
    } else {
        2
    };
    Measurement {
        attr_class: AttributeClass::FocusDof,
        value: ratio,
        label: Some(label),
        confidence: 1.0,
    }
}

fn measure_stroke(lum: &Array2<f32>, mask: &Array2<f32>, calib: &CalibConstants) -> Measurement {
    let (gx, gy) = gradients(lum);
    // interior-only weighting: erode the mask so shape boundary gradients
    // do not pollute the stripe orientation
    let (h, w) = mask.dim();
    let mut wgt = Array2::zeros((h, w));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut m = f32::MAX;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    m = m.min(mask[[(y as i32 + dy) as usize, (x as i32 + dx) as usize]]);
                }
            }
            wgt[[y, x]] = if m >= 0.9 { 1.0 } else { 0.0 };
        }
    }
    let (orient, coherence) = structure_tensor(&gx, &gy, &wgt);
    if coherence < calib.stroke_min_coherence || wgt.sum() < 8.0 {
        return Measurement::unmeasurable(AttributeClass::Stroke);
    }
    let buckets = [0.0, 45.0, 90.0, 135.0];
    let (label, dist) = nearest_angle_label(orient, &buckets, 180.0);
    Measurement {
        attr_class: AttributeClass::Stroke,
        value: orient,
        label: Some(label),
        confidence: (coherence * (1.0 - dist / 22.5)).clamp(0.0, 1.0),
    }
}

/// Mean squared second difference of luminance along a direction, bilinear
/// sampling with a fixed step so the four orientations are comparable.
pub fn directional_sharpness(lum: &Array2<f32>, theta_deg: f32) -> f64 {
    let (h, w) = lum.dim();
    let step = 1.5f32;
    let (dx, dy) = (
        theta_deg.to_radians().cos() * step,
        theta_deg.to_radians().sin() * step,
    );
    let sample = |y: f32, x: f32| -> f32 {
        let x = x.clamp(0.0, (w - 1) as f32);
        let y = y.clamp(0.0, (h - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        lum[[y0, x0]] * (1.0 - fx) * (1.0 - fy)
            + lum[[y0, x1]] * fx * (1.0 - fy)
            + lum[[y1, x0]] * (1.0 - fx) * fy
            + lum[[y1, x1]] * fx * fy
    };
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let d = sample(y as f32 + dy, x as f32 + dx) - 2.0 * lum[[y, x]]
                + sample(y as f32 - dy, x as f32 - dx);
            acc += (d * d) as f64;
            n += 1;
        }
    }
    acc / n as f64
}

/// Still vs motion is decided by how much of the coverage mask sits at
/// intermediate values: a crisp render only has a thin antialiasing band,
/// while a motion smear spreads coverage over the smear length. Among the
/// motion directions the smear axis is the one along which the mask is
/// smoothest. Luminance features fail this gate because shapes with
/// axis-aligned edges are intrinsically anisotropic.
fn measure_dynamics(mask: &Array2<f32>, calib: &CalibConstants) -> Measurement {
    let mut covered = 0usize;
    let mut soft = 0usize;
    for &m in mask.iter() {
        if m > 0.02 {
            covered += 1;
            if m < 0.98 {
                soft += 1;
            }
        }
    }
    if covered < 8 {
        return Measurement::unmeasurable(AttributeClass::Dynamics);
    }
    let softness = soft as f64 / covered as f64;
    if softness < calib.dynamics_motion_min_softness {
        return Measurement {
            attr_class: AttributeClass::Dynamics,
            value: softness,
            label: Some(0), // still
            confidence: 1.0 - softness,
        };
    }
    let buckets = [0.0f32, 45.0, 90.0, 135.0];
    let energies: Vec<f64> = buckets
        .iter()
        .map(|&b| directional_sharpness(mask, b))
        .collect();
    let idx = energies
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    Measurement {
        attr_class: AttributeClass::Dynamics,
        value: softness,
        label: Some(1 + idx),
        confidence: softness,
    }
}

fn measure_rhythm(mask: &Array2<f32>, calib: &CalibConstants) -> Measurement {
    let (h, w) = mask.dim();
    if mask.sum() < 4.0 {
        return Measurement::unmeasurable(AttributeClass::Rhythm);
    }
    let rx = circular_autocorr(mask, 0, w / 2);
    let ry = circular_autocorr(mask, h / 2, 0);
    let t = calib.rhythm_corr_threshold;
    let label = if rx > t && ry > t {
        2 // quad
    } else if rx > t {
        1 // pair
    } else {
        0 // single
    };
    Measurement {
        attr_class: AttributeClass::Rhythm,
        value: rx.max(ry),
        label: Some(label),
        confidence: 1.0,
    }
}

fn measure_design(lum: &Array2<f32>, calib: &CalibConstants) -> Measurement {
    let (h, w) = lum.dim();
    let flip_lr = Array2::from_shape_fn((h, w), |(y, x)| lum[[y, w - 1 - x]]);
    let flip_ud = Array2::from_shape_fn((h, w), |(y, x)| lum[[h - 1 - y, x]]);
    let cv = pearson(lum, &flip_lr);
    let ch = pearson(lum, &flip_ud);
    let best = cv.max(ch);
    let label = if best < calib.design_axis_threshold {
        0 // free_form
    } else if cv >= ch {
        1 // mirror_vertical
    } else {
        2 // mirror_horizontal
    };
    Measurement {
        attr_class: AttributeClass::Design,
        value: best,
        label: Some(label),
        confidence: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::calib::CalibConstants;
    use crate::synth::render::render_canonical;
    use crate::taxonomy::Taxonomy;

    #[test]
    fn constant_image_is_unmeasurable_with_zero_confidence() {
        let img = Image::filled(32, 32, 0.0);
        let m = measure_attribute(&img, AttributeClass::Color, None, &CalibConstants::load_default());
        assert_eq!(m.label, None);
        assert_eq!(m.confidence, 0.0);
    }

    #[test]
    fn mirrored_render_has_unit_reflection_correlation() {
        let tax = Taxonomy::load_default().unwrap();
        let calib = CalibConstants::load_default();
        let base = render_canonical(&tax, "crescent", 32).unwrap();
        let attr = tax
            .instantiate("mirror_vertical", &mut crate::rng::rng_seeded(0))
            .unwrap();
        let out = crate::synth::apply_attribute(&tax, &base, "crescent", &attr).unwrap();
        let m = measure_attribute(&out.image, AttributeClass::Design, Some(&out.mask), &calib);
        assert!(m.value > 0.999999, "corr {}", m.value);
        assert_eq!(m.label, Some(1));
    }
}
