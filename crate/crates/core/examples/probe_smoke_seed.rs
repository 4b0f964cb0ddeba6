//! Find a global seed whose 10-prompt smoke corpus covers all seven
//! attribute classes in both splits (needed for stratified evaluation).

use std::collections::BTreeSet;
use vat_core::rng::derive_seed;
use vat_core::synth::{generate_corpus, CorpusConfig, Split};
use vat_core::taxonomy::{AttributeClass, Taxonomy};

fn main() -> vat_core::Result<()> {
    let tax = Taxonomy::load_default()?;
    let mut found = 0;
    for global in 0u64..500 {
        let mut cfg = CorpusConfig::default();
        cfg.num_prompts = 10;
        cfg.seeds_per_prompt = 2;
        cfg.val_fraction = 0.5;
        cfg.attr_count_weights = [0.1, 0.3, 0.6];
        cfg.seed = derive_seed(global, "corpus");
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(&cfg, &tax, dir.path())?;
        let mut val = BTreeSet::new();
        let mut train = BTreeSet::new();
        let mut multi_attr = 0;
        for rec in &manifest.records {
            let set = if rec.split == Split::Val { &mut val } else { &mut train };
            for a in &rec.attributes {
                set.insert(a.class);
            }
            multi_attr += (rec.attributes.len() >= 2) as usize;
        }
        if val.len() == AttributeClass::ALL.len()
            && train.len() == AttributeClass::ALL.len()
            && multi_attr >= 8
        {
            println!("global seed {global}: covered, {multi_attr} multi-attribute records");
            found += 1;
            if found >= 5 {
                break;
            }
        }
    }
    Ok(())
}
