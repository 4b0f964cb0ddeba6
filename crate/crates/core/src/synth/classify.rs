//! Nearest-template subject classification: normalized cross-correlation of
//! the binarized foreground against jitter-marginalized leaf silhouettes,
//! including the replicated variants the rhythm attribute produces.

use crate::rng::rng_from;
use crate::synth::oracle::estimate_soft_mask;
use crate::synth::render::render_subject;
use crate::taxonomy::Taxonomy;
use crate::{Image, Result};
use ndarray::Array2;

const TEMPLATE_SEEDS: u64 = 64;
const MAX_SHIFT: i32 = 3;

struct Template {
    leaf: String,
    /// zero-mean, unit-norm silhouette
    plane: Array2<f32>,
}

pub struct TemplateBank {
    templates: Vec<Template>,
    size: usize,
}

fn normalize(mut plane: Array2<f32>) -> Array2<f32> {
    let mean = plane.sum() / plane.len() as f32;
    plane.mapv_inplace(|v| v - mean);
    let norm = plane.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm > 1e-9 {
        plane.mapv_inplace(|v| v / norm);
    }
    plane
}

fn replicate(mask: &Array2<f32>, count: usize) -> Array2<f32> {
    let (h, w) = mask.dim();
    let (th, tw) = (h / 2, w / 2);
    let tile = Array2::from_shape_fn((th, tw), |(y, x)| {
        (mask[[2 * y, 2 * x]]
            + mask[[2 * y, 2 * x + 1]]
            + mask[[2 * y + 1, 2 * x]]
            + mask[[2 * y + 1, 2 * x + 1]])
            / 4.0
    });
    let offsets: Vec<(usize, usize)> = match count {
        2 => vec![(h / 4, 0), (h / 4, tw)],
        _ => vec![(0, 0), (0, tw), (th, 0), (th, tw)],
    };
    let mut out = Array2::zeros((h, w));
    for (oy, ox) in offsets {
        for y in 0..th {
            for x in 0..tw {
                out[[oy + y, ox + x]] = tile[[y, x]];
            }
        }
    }
    out
}

/// Repeated separable [1,2,1]/4 passes; `passes` controls the blur strength.
fn blur_mask(mask: &Array2<f32>, passes: usize) -> Array2<f32> {
    let (h, w) = mask.dim();
    let cl = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = mask.clone();
    for _ in 0..passes {
        let hx = Array2::from_shape_fn((h, w), |(y, x)| {
            0.25 * out[[y, cl(x as isize - 1, w)]]
                + 0.5 * out[[y, x]]
                + 0.25 * out[[y, cl(x as isize + 1, w)]]
        });
        out = Array2::from_shape_fn((h, w), |(y, x)| {
            0.25 * hx[[cl(y as isize - 1, h), x]]
                + 0.5 * hx[[y, x]]
                + 0.25 * hx[[cl(y as isize + 1, h), x]]
        });
    }
    out
}

/// Directional box smear with bilinear taps, matching the motion attribute.
fn smear(mask: &Array2<f32>, psi_deg: f32, n: i32) -> Array2<f32> {
    let (h, w) = mask.dim();
    let (dx, dy) = (psi_deg.to_radians().cos(), psi_deg.to_radians().sin());
    let tap = |fy: f32, fx: f32| -> f32 {
        let (y0, x0) = (fy.floor(), fx.floor());
        let (ty, tx) = (fy - y0, fx - x0);
        let at = |y: f32, x: f32| -> f32 {
            if y < 0.0 || x < 0.0 || y as usize >= h || x as usize >= w {
                0.0
            } else {
                mask[[y as usize, x as usize]]
            }
        };
        at(y0, x0) * (1.0 - ty) * (1.0 - tx)
            + at(y0, x0 + 1.0) * (1.0 - ty) * tx
            + at(y0 + 1.0, x0) * ty * (1.0 - tx)
            + at(y0 + 1.0, x0 + 1.0) * ty * tx
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for i in 0..n {
            let t = i as f32 - (n - 1) as f32 / 2.0;
            acc += tap(y as f32 + t * dy, x as f32 + t * dx);
        }
        acc / n as f32
    })
}

/// Union with the composition attribute's quarter-point marker disk.
fn add_marker(mask: &Array2<f32>) -> Array2<f32> {
    let (h, w) = mask.dim();
    let (my, mx, mr) = (h as f32 / 4.0, w as f32 / 4.0, h as f32 * 2.5 / 32.0);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let d2 = (y as f32 - my).powi(2) + (x as f32 - mx).powi(2);
        if d2 <= mr * mr {
            1.0
        } else {
            mask[[y, x]]
        }
    })
}

/// Mirror one half over the other, matching the enforced-symmetry attribute.
fn symmetrize(mask: &Array2<f32>, axis: usize) -> Array2<f32> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| match axis {
        1 if x >= w / 2 => mask[[y, w - 1 - x]],
        2 if y >= h / 2 => mask[[h - 1 - y, x]],
        _ => mask[[y, x]],
    })
}

impl TemplateBank {
    pub fn build(tax: &Taxonomy, size: usize) -> Result<TemplateBank> {
        let mut templates = Vec::new();
        for leaf in tax.tree.leaves() {
            let mut mean = Array2::<f32>::zeros((size, size));
            // the composition attribute's dark corner marker reads as
            // foreground, so its variants carry the marker; symmetrization
            // does not commute with jitter, so those are marginalized over
            // the jittered masks, not the mean
            let mut marked = Array2::<f32>::zeros((size, size));
            let mut sym1 = Array2::<f32>::zeros((size, size));
            let mut sym2 = Array2::<f32>::zeros((size, size));
            let mut rng = rng_from(0xC1A551F1, &format!("template:{leaf}"));
            for _ in 0..TEMPLATE_SEEDS {
                let out = render_subject(tax, leaf, size, &mut rng)?;
                let mask = out.binary_mask();
                let with_marker = add_marker(&mask);
                marked = marked + &with_marker;
                sym1 = sym1 + symmetrize(&with_marker, 1);
                sym2 = sym2 + symmetrize(&with_marker, 2);
                mean = mean + mask;
            }
            let k = TEMPLATE_SEEDS as f32;
            mean.mapv_inplace(|v| v / k);
            marked.mapv_inplace(|v| v / k);
            sym1.mapv_inplace(|v| v / k);
            sym2.mapv_inplace(|v| v / k);
            let variants = [
                mean.clone(),
                // heavy-blur variant: what the silhouette looks like after a
                // strong defocus washes out its corners
                blur_mask(&mean, 16),
                marked,
                sym1,
                sym2,
                // motion-smear variants along the four smear directions
                smear(&mean, 0.0, 8),
                smear(&mean, 45.0, 8),
                smear(&mean, 90.0, 8),
                smear(&mean, 135.0, 8),
                replicate(&mean, 2),
                replicate(&mean, 4),
            ];
            for plane in variants {
                templates.push(Template {
                    leaf: leaf.clone(),
                    plane: normalize(plane),
                });
            }
        }
        Ok(TemplateBank { templates, size })
    }

    /// NCC of a zero-mean unit-norm query against a template, maximized over
    /// small integer shifts of the query.
    fn score(&self, query: &Array2<f32>, tpl: &Array2<f32>) -> f64 {
        let n = self.size as i32;
        let mut best = f64::MIN;
        for dy in -MAX_SHIFT..=MAX_SHIFT {
            for dx in -MAX_SHIFT..=MAX_SHIFT {
                let mut acc = 0.0f64;
                for y in 0..n {
                    for x in 0..n {
                        let qy = y + dy;
                        let qx = x + dx;
                        if qy < 0 || qy >= n || qx < 0 || qx >= n {
                            continue;
                        }
                        acc += (query[[qy as usize, qx as usize]] * tpl[[y as usize, x as usize]])
                            as f64;
                    }
                }
                best = best.max(acc);
            }
        }
        best
    }

    pub fn classify_mask(&self, mask: &Array2<f32>) -> (String, f64) {
        let query = normalize(mask.clone());
        let mut best = ("".to_string(), f64::MIN);
        for tpl in &self.templates {
            let s = self.score(&query, &tpl.plane);
            if s > best.1 {
                best = (tpl.leaf.clone(), s);
            }
        }
        best
    }

    /// Classify from pixels alone, estimating the foreground mask. The soft
    /// mask keeps graded edges, so defocused shapes still match their
    /// blurred template variant.
    pub fn classify_raw(&self, img: &Image) -> (String, f64) {
        self.classify_mask(&estimate_soft_mask(img))
    }
}

/// Nearest-template classification; returns the argmax leaf and its score.
pub fn classify_subject(img: &Image, bank: &TemplateBank) -> (String, f64) {
    bank.classify_raw(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::render::render_canonical;
    use crate::taxonomy::Taxonomy;

    #[test]
    fn clean_render_matches_its_own_leaf() {
        let tax = Taxonomy::load_default().unwrap();
        let bank = TemplateBank::build(&tax, 32).unwrap();
        for leaf in ["star", "circle", "cross"] {
            let out = render_canonical(&tax, leaf, 32).unwrap();
            let (got, score) = bank.classify_mask(&out.binary_mask());
            assert_eq!(got, leaf, "score {score}");
        }
    }
}
