//! Diagnostic: template-match score distribution on corpus images vs the
//! noise-rejection threshold.

use vat_core::synth::{generate_corpus, CalibConstants, CorpusConfig, TemplateBank};
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
    let calib = CalibConstants::load_default();
    let (mut right, mut total) = (0, 0);
    let mut min_score = f64::MAX;
    let mut below = 0;
    for rec in &manifest.records {
        let img = manifest.load_image(rec)?;
        let (leaf, score) = bank.classify_raw(&img);
        total += 1;
        if leaf == rec.subject {
            right += 1;
        }
        min_score = min_score.min(score);
        if score < calib.subject_noise_rejection {
            below += 1;
        }
    }
    println!(
        "acc {:.3}  min score {:.3}  below-threshold {}/{} (thr {:.3})",
        right as f64 / total as f64,
        min_score,
        below,
        total,
        calib.subject_noise_rejection
    );
    Ok(())
}
