//! Diagnostic: classification accuracy over all leaves x seeds x single
//! attribute overlays (rhythm excluded).

use rand::Rng as _;
use std::collections::BTreeMap;
use vat_core::rng::rng_from;
use vat_core::synth::{apply_attribute, render::render_subject, TemplateBank};
use vat_core::taxonomy::{AttributeClass, Taxonomy};

fn main() -> anyhow::Result<()> {
    let tax = Taxonomy::load_default()?;
    let bank = TemplateBank::build(&tax, 32)?;
    let (mut right, mut total) = (0, 0);
    let mut by_kw: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for leaf in tax.tree.leaves() {
        let mut rng = rng_from(0x57AB, &format!("cls:{leaf}"));
        for _ in 0..200 {
            let specs: Vec<_> = tax
                .specs
                .iter()
                .filter(|s| {
                    s.class != AttributeClass::Rhythm && tax.is_compatible(&s.keyword, leaf).unwrap_or(false)
                })
                .collect();
            let spec = specs[rng.gen_range(0..specs.len())];
            let base = render_subject(&tax, leaf, 32, &mut rng)?;
            let attr = tax.instantiate(&spec.keyword, &mut rng)?;
            let out = apply_attribute(&tax, &base, leaf, &attr)?;
            let (got, _) = bank.classify_raw(&out.image.quantized());
            total += 1;
            let e = by_kw.entry(spec.keyword.clone()).or_default();
            e.1 += 1;
            if got == *leaf {
                right += 1;
            } else {
                e.0 += 1;
            }
        }
    }
    println!("accuracy {:.4} ({right}/{total})", right as f64 / total as f64);
    for (kw, (bad, t)) in &by_kw {
        if *bad > 0 {
            println!("  {kw:18} {bad}/{t}");
        }
    }
    Ok(())
}
