//! Diagnostic: per-keyword oracle misread rates on a generated corpus, with
//! the co-attribute classes of the misread records.

use std::collections::BTreeMap;
use vat_core::synth::{
    expected_label, generate_corpus, measure_attribute, CalibConstants, CorpusConfig,
};
use vat_core::taxonomy::Taxonomy;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let tax = Taxonomy::load_default()?;
    let config = CorpusConfig {
        num_prompts: 1500,
        seeds_per_prompt: 1,
        seed: 0xBEEF,
        ..serde_json::from_str("{}").unwrap()
    };
    let manifest = generate_corpus(&config, &tax, dir.path())?;
    let calib = CalibConstants::load_default();
    let mut miss: BTreeMap<String, (usize, usize, BTreeMap<String, usize>)> = BTreeMap::new();
    for rec in &manifest.records {
        let img = manifest.load_image(rec)?;
        for attr in &rec.attributes {
            let expect = expected_label(&config, &tax, rec, attr.class)?.unwrap();
            let got = measure_attribute(&img, attr.class, None, &calib).label;
            let e = miss.entry(attr.keyword.clone()).or_default();
            e.1 += 1;
            if got != Some(expect) {
                e.0 += 1;
                for other in &rec.attributes {
                    if other.keyword != attr.keyword {
                        *e.2.entry(other.keyword.clone()).or_insert(0) += 1;
                    }
                }
                if rec.attributes.len() == 1 {
                    *e.2.entry("<alone>".into()).or_insert(0) += 1;
                }
            }
        }
    }
    for (kw, (bad, total, co)) in &miss {
        if *bad > 0 {
            println!("{kw:18} {bad}/{total}  co: {co:?}");
        }
    }
    Ok(())
}
