//! Diagnostic: Laplacian/gradient ratio by (leaf, keyword, length).

use vat_core::rng::rng_seeded;
use vat_core::synth::{apply_attribute, render::render_subject};
use vat_core::taxonomy::Taxonomy;

fn softness(mask: &ndarray::Array2<f32>) -> f64 {
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
    soft as f64 / covered.max(1) as f64
}

fn main() -> anyhow::Result<()> {
    let tax = Taxonomy::load_default()?;
    let still = tax.spec("still")?.clone();
    for leaf in tax.compatible_subjects(&still) {
        for kw in ["still", "motion_0", "motion_45", "motion_90", "motion_135"] {
            for len in [7.0, 9.0] {
                let mut wmin = f64::MAX;
                let mut wmax = f64::MIN;
                for seed in 0..40u64 {
                    let mut rng = rng_seeded(seed);
                    let base = render_subject(&tax, &leaf, 32, &mut rng)?;
                    let mut attr = tax.instantiate(kw, &mut rng)?;
                    if kw != "still" {
                        attr.params.insert("length".into(), len);
                    }
                    let out = apply_attribute(&tax, &base, &leaf, &attr)?;
                    let f = softness(&out.mask);
                    wmin = wmin.min(f);
                    wmax = wmax.max(f);
                }
                println!("{leaf:10} {kw:11} len{len}: softness {wmin:.3}..{wmax:.3}");
                if kw == "still" {
                    break;
                }
            }
        }
    }
    Ok(())
}
