//! Learning probe: does the reduced pilot backbone learn text-conditioned
//! subjects? Trains N steps, then samples "circle" vs "square" and checks
//! subject-oracle separation.

use candle_core::DType;
use std::time::Instant;
use vat_core::backbone::{sample, SampleOpts, Vocab};
use vat_core::ckpt::{Model, ModelConfig};
use vat_core::synth::{classify_subject, generate_corpus, CorpusConfig, TemplateBank};
use vat_core::taxonomy::Taxonomy;
use vat_core::trainer::{self, ImageCache, TrainConfig};

fn main() -> vat_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let tax = Taxonomy::load_default()?;
    let vocab = Vocab::build(&tax);
    let dir = tempfile::tempdir().unwrap();
    let mut ccfg = CorpusConfig::default();
    ccfg.num_prompts = 300;
    ccfg.seeds_per_prompt = 2;
    let manifest = generate_corpus(&ccfg, &tax, dir.path())?;
    println!("corpus: {} images", manifest.records.len());

    let mut cfg = ModelConfig::with_vocab(vocab.len());
    cfg.backbone.base_channels = 16;
    cfg.backbone.ch_mults = vec![1, 2];
    cfg.backbone.blocks_per_stage = 1;
    cfg.backbone.attn_dim = 32;
    cfg.adapter.attn_dim = 32;
    cfg.adapter.width = 32;
    cfg.adapter.enc_channels = vec![8, 16, 32];
    let model = Model::new(&cfg, DType::F32, &candle_core::Device::Cpu)?;
    model.backbone.init_dual_from_base(&model.varmap)?;
    let cache = ImageCache::preload(&manifest, DType::F32, &candle_core::Device::Cpu)?;

    let mut tcfg = TrainConfig::backbone_default();
    tcfg.steps = steps;
    tcfg.batch_size = 8;
    tcfg.lr = 1e-3;
    let t0 = Instant::now();
    let log = trainer::train_backbone(&model, &tax, &vocab, &manifest, &cache, &tcfg, None)?;
    let chunk = (steps / 10).max(1);
    for (i, c) in log.losses.chunks(chunk).enumerate() {
        println!(
            "steps {}..{}: mean loss {:.4}",
            i * chunk,
            i * chunk + c.len(),
            c.iter().sum::<f64>() / c.len() as f64
        );
    }
    println!("train {steps} steps: {:?}", t0.elapsed());

    let bank = TemplateBank::build(&tax, 32)?;
    let mut opts = SampleOpts::default();
    opts.steps = 20;
    let t0 = Instant::now();
    for subject in ["circle", "square", "triangle"] {
        let text = vocab.tokenize(subject)?;
        let mut hits = 0;
        let mut preds = Vec::new();
        for seed in 0..20 {
            opts.seed = seed;
            let img = sample(&model.backbone, &model.schedule, &text, None, None, &opts)?;
            let (pred, score) = classify_subject(&img, &bank);
            if pred == subject {
                hits += 1;
            }
            preds.push(format!("{pred}:{score:.2}"));
        }
        println!("{subject}: {hits}/20  [{}]", preds.join(" "));
    }
    println!("sampling: {:?}", t0.elapsed());
    Ok(())
}
