//! Diagnostic: which attribute keywords break subject classification.

use std::collections::BTreeMap;
use vat_core::synth::{generate_corpus, CorpusConfig, TemplateBank};
use vat_core::taxonomy::Taxonomy;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let tax = Taxonomy::load_default()?;
    let config = CorpusConfig {
        num_prompts: 400,
        seeds_per_prompt: 1,
        seed: 0xC1A55,
        ..serde_json::from_str("{}").unwrap()
    };
    let manifest = generate_corpus(&config, &tax, dir.path())?;
    let bank = TemplateBank::build(&tax, 32)?;
    let mut by_kw: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut confusions: BTreeMap<(String, String), usize> = BTreeMap::new();
    for rec in &manifest.records {
        let img = manifest.load_image(rec)?;
        let (leaf, _) = bank.classify_raw(&img);
        let ok = leaf == rec.subject;
        for a in &rec.attributes {
            let e = by_kw.entry(a.keyword.clone()).or_default();
            e.1 += 1;
            if !ok {
                e.0 += 1;
            }
        }
        if !ok {
            *confusions
                .entry((rec.subject.clone(), leaf.clone()))
                .or_default() += 1;
        }
    }
    for (kw, (bad, total)) in &by_kw {
        if *bad * 5 > *total {
            println!("{kw:18} {bad}/{total}");
        }
    }
    let mut top: Vec<_> = confusions.into_iter().collect();
    top.sort_by_key(|(_, n)| std::cmp::Reverse(*n));
    for ((s, g), n) in top.into_iter().take(12) {
        println!("  {s} -> {g}: {n}");
    }
    Ok(())
}
