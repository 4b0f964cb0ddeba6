//! Diagnostic: focus ratio before/after 8-bit quantization.

use rand::Rng as _;
use vat_core::rng::rng_from;
use vat_core::synth::{apply_attribute, measure_attribute, render::render_subject, CalibConstants};
use vat_core::taxonomy::{AttributeClass, Taxonomy};

fn main() -> anyhow::Result<()> {
    let tax = Taxonomy::load_default()?;
    let calib = CalibConstants::load_default();
    let dir = tempfile::tempdir()?;
    for kw in ["sharp", "soft_focus", "strong_blur"] {
        let spec = tax.spec(kw)?;
        let mut rng = rng_from(0xAB, kw);
        let (mut pre, mut post) = (vec![], vec![]);
        for i in 0..40 {
            let leaves = tax.compatible_subjects(spec);
            let leaf = leaves[rng.gen_range(0..leaves.len())].clone();
            let base = render_subject(&tax, &leaf, 32, &mut rng)?;
            let attr = tax.instantiate(kw, &mut rng)?;
            let out = apply_attribute(&tax, &base, &leaf, &attr)?;
            let m0 = measure_attribute(&out.image, AttributeClass::FocusDof, None, &calib);
            let p = dir.path().join(format!("{kw}_{i}.png"));
            out.image.save_png(&p)?;
            let q = vat_core::img::Image::load_png(&p)?;
            let m1 = measure_attribute(&q, AttributeClass::FocusDof, None, &calib);
            pre.push(m0.value);
            post.push(m1.value);
        }
        let stat = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            format!("[{lo:.3}, {hi:.3}]")
        };
        println!("{kw:12} pre {} post {}", stat(&pre), stat(&post));
    }
    Ok(())
}
