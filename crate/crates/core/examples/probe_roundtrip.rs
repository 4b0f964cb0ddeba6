//! Diagnostic: per-class oracle round-trip accuracy over seeded renders.

use rand::Rng as _;
use vat_core::rng::rng_from;
use vat_core::synth::{apply_attribute, measure_attribute, render::render_subject, CalibConstants};
use vat_core::taxonomy::{AttributeClass, Taxonomy};

fn main() -> anyhow::Result<()> {
    let tax = Taxonomy::load_default()?;
    let calib = CalibConstants::load_default();
    let n = 1000;
    for class in AttributeClass::ALL {
        let specs = tax.specs_of_class(class);
        let mut rng = rng_from(0xF00D, &format!("roundtrip:{class}"));
        let mut ok = 0;
        let mut fails: Vec<String> = Vec::new();
        for _ in 0..n {
            let spec = specs[rng.gen_range(0..specs.len())];
            let leaves = tax.compatible_subjects(spec);
            let leaf = leaves[rng.gen_range(0..leaves.len())].clone();
            let base = render_subject(&tax, &leaf, 32, &mut rng)?;
            let attr = tax.instantiate(&spec.keyword, &mut rng)?;
            let out = apply_attribute(&tax, &base, &leaf, &attr)?;
            let m = measure_attribute(&out.image.quantized(), class, None, &calib);
            if m.label == Some(spec.label) {
                ok += 1;
            } else if fails.len() < 5 {
                fails.push(format!(
                    "{leaf}/{} -> label {:?} value {:.3}",
                    spec.keyword, m.label, m.value
                ));
            }
        }
        println!("{class:10}: {:.3}  {}", ok as f64 / n as f64, fails.join(" | "));
    }
    Ok(())
}
