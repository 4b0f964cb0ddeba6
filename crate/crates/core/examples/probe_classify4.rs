//! Diagnostic: confusion pairs for single-attribute renders.

use rand::Rng as _;
use std::collections::BTreeMap;
use vat_core::rng::rng_from;
use vat_core::synth::{apply_attribute, render::render_subject, TemplateBank};
use vat_core::taxonomy::{AttributeClass, Taxonomy};

fn main() -> anyhow::Result<()> {
    let tax = Taxonomy::load_default()?;
    let bank = TemplateBank::build(&tax, 32)?;
    let mut conf: BTreeMap<(String, String, String), usize> = BTreeMap::new();
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
            if got != *leaf {
                *conf.entry((spec.class.to_string(), leaf.clone(), got)).or_default() += 1;
            }
        }
    }
    let mut v: Vec<_> = conf.into_iter().collect();
    v.sort_by_key(|(_, n)| std::cmp::Reverse(*n));
    for ((cls, s, g), n) in v.into_iter().take(25) {
        println!("{cls:10} {s} -> {g}: {n}");
    }
    Ok(())
}
