//! Timing probe: backbone train step, adapter train step, DDIM sample, at
//! the default model size and a reduced pilot size.

use candle_core::DType;
use std::time::Instant;
use vat_core::backbone::Vocab;
use vat_core::ckpt::{Model, ModelConfig};
use vat_core::filter::{filter_hierarchy, FilterParams, OracleJudge};
use vat_core::synth::{generate_corpus, CalibConstants, CorpusConfig};
use vat_core::taxonomy::Taxonomy;
use vat_core::trainer::{self, ImageCache, TrainConfig};

fn main() -> vat_core::Result<()> {
    let tax = Taxonomy::load_default()?;
    let vocab = Vocab::build(&tax);
    let dir = tempfile::tempdir().unwrap();
    let mut ccfg = CorpusConfig::default();
    ccfg.num_prompts = 40;
    ccfg.seeds_per_prompt = 2;
    let t0 = Instant::now();
    let manifest = generate_corpus(&ccfg, &tax, dir.path())?;
    println!("corpus 80 images: {:?}", t0.elapsed());
    let judge = OracleJudge::new(CalibConstants::load_default());
    let t0 = Instant::now();
    let report = filter_hierarchy(&tax, &manifest, &judge, &FilterParams::default())?;
    println!("filter: {:?}", t0.elapsed());

    for (name, cfg) in [
        ("default", ModelConfig::with_vocab(vocab.len())),
        ("pilot", {
            let mut c = ModelConfig::with_vocab(vocab.len());
            c.backbone.base_channels = 16;
            c.backbone.ch_mults = vec![1, 2];
            c.backbone.blocks_per_stage = 1;
            c.backbone.attn_dim = 32;
            c.adapter.attn_dim = 32;
            c.adapter.width = 32;
            c.adapter.enc_channels = vec![8, 16, 32];
            c
        }),
    ] {
        let model = Model::new(&cfg, DType::F32, &candle_core::Device::Cpu)?;
        model.backbone.init_dual_from_base(&model.varmap)?;
        let nparams: usize = model
            .varmap
            .all_vars()
            .iter()
            .map(|v| v.elem_count())
            .sum();
        println!("[{name}] params: {nparams}");
        let cache = ImageCache::preload(&manifest, DType::F32, &candle_core::Device::Cpu)?;

        let mut tcfg = TrainConfig::backbone_default();
        tcfg.steps = 5;
        tcfg.batch_size = 8;
        let t0 = Instant::now();
        trainer::train_backbone(&model, &tax, &vocab, &manifest, &cache, &tcfg, None)?;
        println!("[{name}] backbone step (b8): {:?}", t0.elapsed() / 5);

        let mut acfg = TrainConfig::adapter_default();
        acfg.epochs = 1;
        acfg.batch_size = 8;
        // limit steps by timing a single epoch over the small corpus
        let t0 = Instant::now();
        let log = trainer::train_adapter(
            &model, &tax, &vocab, &manifest, &report, &cache, &acfg, None, None,
        )?;
        println!(
            "[{name}] adapter epoch ({} steps, skipped {}): {:?} ({:?}/step)",
            log.losses.len(),
            log.skipped_examples,
            t0.elapsed(),
            t0.elapsed() / log.losses.len().max(1) as u32
        );

        let mut opts = vat_core::backbone::SampleOpts::default();
        opts.steps = 50;
        let text = vocab.tokenize("circle")?;
        let t0 = Instant::now();
        let _img = vat_core::backbone::sample(
            &model.backbone,
            &model.schedule,
            &text,
            None,
            None,
            &opts,
        )?;
        println!("[{name}] ddim-50 sample (cfg): {:?}", t0.elapsed());

        let t0 = Instant::now();
        let h = model.base_hash()?;
        println!("[{name}] base hash: {:?} ({})", t0.elapsed(), &h[..8]);
    }
    Ok(())
}
