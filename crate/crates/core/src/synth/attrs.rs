//! Class-specific attribute transforms. All parameters come from the
//! attribute instance; transforms are pure and applied in a fixed canonical
//! class order (geometry first, then appearance, then global filters).

use crate::img::hsv_to_rgb;
use crate::synth::render::RenderOutput;
use crate::taxonomy::{AttributeClass, AttributeInstance, Taxonomy};
use crate::{Error, Image, Result};
use ndarray::Array2;

/// Canonical application order within one prompt.
pub fn apply_order(class: AttributeClass) -> u8 {
    match class {
        AttributeClass::Rhythm => 0,
        AttributeClass::Design => 1,
        AttributeClass::Color => 2,
        AttributeClass::Stroke => 3,
        AttributeClass::Lighting => 4,
        AttributeClass::Dynamics => 5,
        AttributeClass::FocusDof => 6,
    }
}

fn param(attr: &AttributeInstance, name: &str) -> Result<f64> {
    attr.params
        .get(name)
        .copied()
        .ok_or_else(|| Error::Contract(format!("attribute `{}` missing param `{name}`", attr.keyword)))
}

pub fn apply_attribute(
    taxonomy: &Taxonomy,
    input: &RenderOutput,
    subject: &str,
    attr: &AttributeInstance,
) -> Result<RenderOutput> {
    if !taxonomy.is_compatible(&attr.keyword, subject)? {
        return Err(Error::Incompatible {
            keyword: attr.keyword.clone(),
            subject: subject.to_string(),
        });
    }
    let mut out = match attr.class {
        AttributeClass::Color => apply_color(input, param(attr, "hue")? as f32),
        AttributeClass::Lighting => apply_lighting(input, param(attr, "theta")? as f32),
        AttributeClass::FocusDof => apply_focus(input, param(attr, "sigma")? as f32),
        AttributeClass::Stroke => apply_stroke(input, param(attr, "phi")? as f32),
        AttributeClass::Dynamics => {
            apply_dynamics(input, param(attr, "psi")? as f32, param(attr, "length")? as f32)
        }
        AttributeClass::Rhythm => apply_rhythm(input, param(attr, "count")? as usize),
        AttributeClass::Design => apply_design(input, param(attr, "axis")? as usize),
    };
    out.image.clamp();
    Ok(out)
}

/// Paint the foreground with a fixed hue, keeping per-pixel luminance.
fn apply_color(input: &RenderOutput, hue: f32) -> RenderOutput {
    let mut out = input.clone();
    let (h, w) = (out.image.height(), out.image.width());
    for y in 0..h {
        for x in 0..w {
            let c = out.mask[[y, x]];
            if c <= 0.0 {
                continue;
            }
            let v = 0.299 * out.image.pixels[[y, x, 0]]
                + 0.587 * out.image.pixels[[y, x, 1]]
                + 0.114 * out.image.pixels[[y, x, 2]];
            let rgb = hsv_to_rgb(hue, 0.8, v.clamp(0.0, 1.0));
            for ch in 0..3 {
                let old = out.image.pixels[[y, x, ch]];
                out.image.pixels[[y, x, ch]] = old * (1.0 - c) + rgb[ch] * c;
            }
        }
    }
    out
}

/// Multiply luminance by a linear ramp along `theta` (degrees, y-down),
/// fixed contrast 0.6..1.4.
fn apply_lighting(input: &RenderOutput, theta: f32) -> RenderOutput {
    let mut out = input.clone();
    let (h, w) = (out.image.height(), out.image.width());
    let (dx, dy) = (theta.to_radians().cos(), theta.to_radians().sin());
    let mut pmin = f32::MAX;
    let mut pmax = f32::MIN;
    for y in 0..h {
        for x in 0..w {
            let p = x as f32 * dx + y as f32 * dy;
            pmin = pmin.min(p);
            pmax = pmax.max(p);
        }
    }
    let span = (pmax - pmin).max(1e-6);
    for y in 0..h {
        for x in 0..w {
            let s = (x as f32 * dx + y as f32 * dy - pmin) / span;
            let f = 0.6 + 0.8 * s;
            for ch in 0..3 {
                out.image.pixels[[y, x, ch]] *= f;
            }
        }
    }
    out
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as i32;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-0.5 * (i as f32 / sigma).powi(2)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn convolve_separable(plane: &Array2<f32>, kernel: &[f32]) -> Array2<f32> {
    let (h, w) = plane.dim();
    let r = (kernel.len() / 2) as i32;
    let reflect = |i: i32, n: i32| -> usize {
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i - 1;
            }
            if i >= n {
                i = 2 * n - 1 - i;
            }
        }
        i as usize
    };
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let xi = reflect(x as i32 + j as i32 - r, w as i32);
                acc += plane[[y, xi]] * kv;
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut outp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let yi = reflect(y as i32 + j as i32 - r, h as i32);
                acc += tmp[[yi, x]] * kv;
            }
            outp[[y, x]] = acc;
        }
    }
    outp
}

fn per_channel(image: &Image, f: impl Fn(&Array2<f32>) -> Array2<f32>) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = Image::new(h, w);
    for ch in 0..3 {
        let plane = Array2::from_shape_fn((h, w), |(y, x)| image.pixels[[y, x, ch]]);
        let fp = f(&plane);
        for y in 0..h {
            for x in 0..w {
                out.pixels[[y, x, ch]] = fp[[y, x]];
            }
        }
    }
    out
}

/// Gaussian blur; sigma 0 is the exact identity.
fn apply_focus(input: &RenderOutput, sigma: f32) -> RenderOutput {
    if sigma <= 0.0 {
        return input.clone();
    }
    let kernel = gaussian_kernel(sigma);
    RenderOutput {
        image: per_channel(&input.image, |p| convolve_separable(p, &kernel)),
        mask: convolve_separable(&input.mask, &kernel),
    }
}

/// Sinusoidal stripe texture on the foreground, fixed period 4 px.
fn apply_stroke(input: &RenderOutput, phi: f32) -> RenderOutput {
    let mut out = input.clone();
    let (h, w) = (out.image.height(), out.image.width());
    let (dx, dy) = (phi.to_radians().cos(), phi.to_radians().sin());
    let period = 4.0;
    for y in 0..h {
        for x in 0..w {
            let c = out.mask[[y, x]];
            if c <= 0.0 {
                continue;
            }
            let phase = 2.0 * std::f32::consts::PI * (x as f32 * dx + y as f32 * dy) / period;
            let m = 1.0 + 0.35 * phase.sin();
            let blend = (1.0 - c) + c * m;
            for ch in 0..3 {
                out.image.pixels[[y, x, ch]] *= blend;
            }
        }
    }
    out
}

fn bilinear(plane: &Array2<f32>, y: f32, x: f32) -> f32 {
    let (h, w) = plane.dim();
    let cl = |v: f32, n: usize| v.clamp(0.0, (n - 1) as f32);
    let x = cl(x, w);
    let y = cl(y, h);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    plane[[y0, x0]] * (1.0 - fx) * (1.0 - fy)
        + plane[[y0, x1]] * fx * (1.0 - fy)
        + plane[[y1, x0]] * (1.0 - fx) * fy
        + plane[[y1, x1]] * fx * fy
}

/// Directional box blur along `psi` (degrees), `length` in pixels.
fn apply_dynamics(input: &RenderOutput, psi: f32, length: f32) -> RenderOutput {
    let n = length.round() as i32;
    if n < 1 {
        return input.clone();
    }
    let (dx, dy) = (psi.to_radians().cos(), psi.to_radians().sin());
    let blur = |plane: &Array2<f32>| -> Array2<f32> {
        let (h, w) = plane.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut acc = 0.0;
            for i in 0..n {
                let t = i as f32 - (n - 1) as f32 / 2.0;
                acc += bilinear(plane, y as f32 + t * dy, x as f32 + t * dx);
            }
            acc / n as f32
        })
    };
    RenderOutput {
        image: per_channel(&input.image, &blur),
        mask: blur(&input.mask),
    }
}

/// Replicate the subject in a regular grid: 1 (identity), 2 (side by side),
/// or 4 (2x2), tiles at half scale.
fn apply_rhythm(input: &RenderOutput, count: usize) -> RenderOutput {
    if count <= 1 {
        return input.clone();
    }
    let (h, w) = (input.image.height(), input.image.width());
    let (th, tw) = (h / 2, w / 2);
    let down = |plane: &Array2<f32>| -> Array2<f32> {
        Array2::from_shape_fn((th, tw), |(y, x)| {
            (plane[[2 * y, 2 * x]]
                + plane[[2 * y, 2 * x + 1]]
                + plane[[2 * y + 1, 2 * x]]
                + plane[[2 * y + 1, 2 * x + 1]])
                / 4.0
        })
    };
    let offsets: Vec<(usize, usize)> = match count {
        2 => vec![(h / 4, 0), (h / 4, tw)],
        _ => vec![(0, 0), (0, tw), (th, 0), (th, tw)],
    };
    let place = |tile: &Array2<f32>, bg: f32| -> Array2<f32> {
        let mut outp = Array2::from_elem((h, w), bg);
        for &(oy, ox) in &offsets {
            for y in 0..th {
                for x in 0..tw {
                    outp[[oy + y, ox + x]] = tile[[y, x]];
                }
            }
        }
        outp
    };
    let image = {
        let (hh, ww) = (h, w);
        let mut out = Image::new(hh, ww);
        for ch in 0..3 {
            let plane = Array2::from_shape_fn((hh, ww), |(y, x)| input.image.pixels[[y, x, ch]]);
            let tiled = place(&down(&plane), crate::synth::render::BG_VALUE);
            for y in 0..hh {
                for x in 0..ww {
                    out.pixels[[y, x, ch]] = tiled[[y, x]];
                }
            }
        }
        out
    };
    let mask = place(&down(&input.mask), 0.0);
    RenderOutput { image, mask }
}

/// Asymmetry marker plus optional enforced mirror symmetry.
/// axis: 0 none, 1 vertical (left half mirrored right), 2 horizontal.
fn apply_design(input: &RenderOutput, axis: usize) -> RenderOutput {
    let mut out = input.clone();
    let (h, w) = (out.image.height(), out.image.width());
    // localized dark marker breaks the base shapes' intrinsic symmetry
    let (my, mx, mr) = (h as f32 / 4.0, w as f32 / 4.0, h as f32 * 2.5 / 32.0);
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f32 - my).powi(2) + (x as f32 - mx).powi(2);
            if d2 <= mr * mr {
                for ch in 0..3 {
                    out.image.pixels[[y, x, ch]] *= 0.45;
                }
            }
        }
    }
    match axis {
        1 => {
            for y in 0..h {
                for x in 0..w / 2 {
                    for ch in 0..3 {
                        let v = out.image.pixels[[y, x, ch]];
                        out.image.pixels[[y, w - 1 - x, ch]] = v;
                    }
                    let m = out.mask[[y, x]];
                    out.mask[[y, w - 1 - x]] = m;
                }
            }
        }
        2 => {
            for y in 0..h / 2 {
                for x in 0..w {
                    for ch in 0..3 {
                        let v = out.image.pixels[[y, x, ch]];
                        out.image.pixels[[h - 1 - y, x, ch]] = v;
                    }
                    let m = out.mask[[y, x]];
                    out.mask[[h - 1 - y, x]] = m;
                }
            }
        }
        _ => {}
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::rgb_to_hue;
    use crate::rng::rng_seeded;
    use crate::synth::render::render_canonical;
    use crate::taxonomy::Taxonomy;

    fn make(tax: &Taxonomy, kw: &str) -> AttributeInstance {
        tax.instantiate(kw, &mut rng_seeded(0)).unwrap()
    }

    #[test]
    fn color_hue_zero_lands_on_red() {
        let tax = Taxonomy::load_default().unwrap();
        let base = render_canonical(&tax, "circle", 32).unwrap();
        let out = apply_attribute(&tax, &base, "circle", &make(&tax, "hue_red")).unwrap();
        // circular-mean hue over interior foreground within 2 degrees of 0
        let mut sx = 0.0f64;
        let mut sy = 0.0f64;
        for y in 0..32 {
            for x in 0..32 {
                if out.mask[[y, x]] > 0.99 {
                    let (hdeg, _) = rgb_to_hue(
                        out.image.pixels[[y, x, 0]],
                        out.image.pixels[[y, x, 1]],
                        out.image.pixels[[y, x, 2]],
                    )
                    .unwrap();
                    sx += (hdeg as f64).to_radians().cos();
                    sy += (hdeg as f64).to_radians().sin();
                }
            }
        }
        let mean = sy.atan2(sx).to_degrees().rem_euclid(360.0);
        let dist = mean.min(360.0 - mean);
        assert!(dist < 2.0, "mean hue {mean}");
    }

    #[test]
    fn focus_sigma_zero_is_identity() {
        let tax = Taxonomy::load_default().unwrap();
        let base = render_canonical(&tax, "star", 32).unwrap();
        let out = apply_attribute(&tax, &base, "star", &make(&tax, "sharp")).unwrap();
        assert_eq!(base.image, out.image);
    }

    #[test]
    fn incompatible_attribute_is_rejected() {
        let tax = Taxonomy::load_default().unwrap();
        let base = render_canonical(&tax, "circle", 32).unwrap();
        // dynamics is not compatible with the curves major
        let err = apply_attribute(&tax, &base, "circle", &make(&tax, "motion_0")).unwrap_err();
        assert!(matches!(err, Error::Incompatible { .. }));
    }

    #[test]
    fn mirror_vertical_is_exactly_symmetric() {
        let tax = Taxonomy::load_default().unwrap();
        let base = render_canonical(&tax, "crescent", 32).unwrap();
        let out = apply_attribute(&tax, &base, "crescent", &make(&tax, "mirror_vertical")).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                for ch in 0..3 {
                    assert_eq!(
                        out.image.pixels[[y, x, ch]],
                        out.image.pixels[[y, 31 - x, ch]]
                    );
                }
            }
        }
    }
}
