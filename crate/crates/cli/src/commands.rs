//! Command implementations. Every command validates its inputs up front,
//! writes a frozen copy of the resolved config next to its outputs, and
//! names the producing command when an upstream artifact is missing.

use anyhow::{bail, Context};
use candle_core::{DType, Device};
use std::path::Path;
use vat_core::backbone::{SampleOpts, Vocab};
use vat_core::ckpt::Model;
use vat_core::config::RunConfig;
use vat_core::evaluator::{
    build_validation_set, combination_test, decomposition_test, eval_generation,
    DiffusionGenerator, EvalOracles,
};
use vat_core::filter::{filter_hierarchy, FilterReport, OracleJudge};
use vat_core::rng::rng_from;
use vat_core::synth::{generate_corpus, load_manifest, CalibConstants, Manifest};
use vat_core::taxonomy::Taxonomy;
use vat_core::trainer::{self, ImageCache};
use vat_core::Error;

const DTYPE: DType = DType::F32;

fn manifest_or_hint(cfg: &RunConfig) -> anyhow::Result<Manifest> {
    let dir = cfg.corpus_dir();
    if !dir.join("manifest.jsonl").exists() {
        return Err(Error::MissingArtifact {
            path: dir.join("manifest.jsonl").display().to_string(),
            producer: "gen-data".into(),
        }
        .into());
    }
    Ok(load_manifest(&dir)?)
}

fn checkpoint_or_hint(
    explicit: Option<&Path>,
    default: std::path::PathBuf,
    producer: &str,
) -> anyhow::Result<std::path::PathBuf> {
    let dir = explicit.map(Path::to_path_buf).unwrap_or(default);
    if !dir.join("meta.json").exists() {
        return Err(Error::MissingArtifact {
            path: dir.display().to_string(),
            producer: producer.into(),
        }
        .into());
    }
    Ok(dir)
}

pub fn gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    let tax = Taxonomy::load_default()?;
    let dir = cfg.corpus_dir();
    let manifest = generate_corpus(&cfg.corpus, &tax, &dir)?;
    cfg.save_frozen(&dir)?;
    println!(
        "wrote {} records to {}",
        manifest.records.len(),
        dir.join("manifest.jsonl").display()
    );
    Ok(())
}

pub fn filter(cfg: &RunConfig) -> anyhow::Result<()> {
    let tax = Taxonomy::load_default()?;
    let manifest = manifest_or_hint(cfg)?;
    let judge = OracleJudge::new(CalibConstants::load_default());
    let report = filter_hierarchy(&tax, &manifest, &judge, &cfg.filter)?;
    let path = cfg.filter_report_path();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
        cfg.save_frozen(parent)?;
    }
    report.save(&path)?;
    let kept: usize = report.ranges.values().map(|v| v.len()).sum();
    println!(
        "wrote {} ({} consistent ranges, {} removed nodes)",
        path.display(),
        kept,
        report.removed.len()
    );
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> anyhow::Result<()> {
    let tax = Taxonomy::load_default()?;
    let vocab = Vocab::build(&tax);
    let manifest = manifest_or_hint(cfg)?;
    let dir = cfg.pretrain_dir();
    std::fs::create_dir_all(&dir)?;
    cfg.save_frozen(&dir)?;

    let model = Model::new(&cfg.model_config(vocab.len())?, DTYPE, &Device::Cpu)?;
    model.backbone.init_dual_from_base(&model.varmap)?;
    let cache = ImageCache::preload(&manifest, DTYPE, &Device::Cpu)?;

    let tcfg = cfg.trainer.backbone;
    let mae = trainer::pretrain_autoencoder(
        &model,
        &manifest,
        &cache,
        &tcfg,
        Some(&dir.join("autoencoder_metrics.jsonl")),
    )?;
    println!("autoencoder MAE: {mae:.4}");
    if mae > 0.05 {
        eprintln!("warning: autoencoder MAE {mae:.4} above the 0.05 target; increase autoencoder_steps");
    }
    let log = trainer::train_backbone(
        &model,
        &tax,
        &vocab,
        &manifest,
        &cache,
        &tcfg,
        Some(&dir.join("metrics.jsonl")),
    )?;
    let ckpt = cfg.backbone_ckpt_dir();
    model.save(&ckpt)?;
    println!(
        "trained {} steps (final loss {:.4}); checkpoint at {}",
        log.losses.len(),
        log.losses.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

pub fn train_adapter(cfg: &RunConfig) -> anyhow::Result<()> {
    let tax = Taxonomy::load_default()?;
    let vocab = Vocab::build(&tax);
    let manifest = manifest_or_hint(cfg)?;
    let report = FilterReport::load(&cfg.filter_report_path())?;
    let ckpt_dir = checkpoint_or_hint(None, cfg.backbone_ckpt_dir(), "pretrain")?;
    let expected = cfg.model_config(vocab.len())?;
    let (model, loaded) = Model::load(&ckpt_dir, Some(&expected), DTYPE, &Device::Cpu)?;
    if !loaded.adapter_loaded {
        // fresh adapter: W'_k/W'_v already copied from the text branch
        println!("initialized adapter from the base attention weights");
    }
    let dir = cfg.adapter_dir();
    std::fs::create_dir_all(&dir)?;
    cfg.save_frozen(&dir)?;
    let cache = ImageCache::preload(&manifest, DTYPE, &Device::Cpu)?;
    let log = trainer::train_adapter(
        &model,
        &tax,
        &vocab,
        &manifest,
        &report,
        &cache,
        &cfg.trainer.adapter,
        Some(&dir.join("metrics.jsonl")),
        Some(&dir.join("examples_audit.jsonl")),
    )?;
    let out = cfg.adapter_ckpt_dir();
    model.save(&out)?;
    println!(
        "trained {} steps ({} skipped examples); checkpoint at {}",
        log.losses.len(),
        log.skipped_examples,
        out.display()
    );
    Ok(())
}

pub fn sample(
    cfg: &RunConfig,
    subject: &str,
    refs: &[String],
    seed: u64,
    out: &Path,
    checkpoint: Option<&Path>,
) -> anyhow::Result<()> {
    let tax = Taxonomy::load_default()?;
    let vocab = Vocab::build(&tax);
    let manifest = manifest_or_hint(cfg)?;
    let ckpt_dir = checkpoint_or_hint(checkpoint, cfg.adapter_ckpt_dir(), "train-adapter")?;
    let expected = cfg.model_config(vocab.len())?;
    let (model, _) = Model::load(&ckpt_dir, Some(&expected), DTYPE, &Device::Cpu)?;

    if refs.len() > cfg.adapter.n_slots {
        bail!(
            "{} references exceed the adapter's N = {} slots",
            refs.len(),
            cfg.adapter.n_slots
        );
    }
    let mut slots = Vec::new();
    for spec in refs {
        let (id, tag) = spec
            .split_once('=')
            .with_context(|| format!("reference `{spec}` is not RECORD_ID=TAG"))?;
        let rec = manifest
            .record(id)
            .with_context(|| format!("record `{id}` not in the manifest"))?;
        slots.push((manifest.load_image(rec)?, tag.to_string()));
    }
    let borrowed: Vec<(&vat_core::Image, &str)> =
        slots.iter().map(|(i, t)| (i, t.as_str())).collect();
    let generator = DiffusionGenerator {
        model: &model,
        vocab: &vocab,
        opts: SampleOpts {
            steps: cfg.eval.sample_steps,
            guidance: cfg.eval.guidance,
            seed,
        },
    };
    use vat_core::evaluator::GenModel;
    let img = generator.generate(&tax.tree.node(subject)?.name, &borrowed, seed)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    img.save_png(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, quick: bool) -> anyhow::Result<()> {
    let tax = Taxonomy::load_default()?;
    let vocab = Vocab::build(&tax);
    let manifest = manifest_or_hint(cfg)?;
    let ckpt_dir = checkpoint_or_hint(checkpoint, cfg.adapter_ckpt_dir(), "train-adapter")?;
    let expected = cfg.model_config(vocab.len())?;
    let (model, _) = Model::load(&ckpt_dir, Some(&expected), DTYPE, &Device::Cpu)?;
    let dir = cfg.eval_dir();
    std::fs::create_dir_all(&dir)?;
    cfg.save_frozen(&dir)?;

    let oracles = EvalOracles::build(&tax, cfg.corpus.image_size)?;
    let generator = DiffusionGenerator {
        model: &model,
        vocab: &vocab,
        opts: SampleOpts {
            steps: cfg.eval.sample_steps,
            guidance: cfg.eval.guidance,
            seed: 0,
        },
    };
    let mut rng = rng_from(cfg.eval_seed(), "cases");
    let cases = build_validation_set(&manifest, &tax, cfg.eval.refs, &mut rng)?;
    let mut report = eval_generation(
        &generator,
        &cases,
        &manifest,
        &tax,
        &oracles,
        Some(&dir.join("sheets")),
    )?;
    if !quick {
        report.decomposition = Some(decomposition_test(
            &generator,
            &manifest,
            &tax,
            &oracles,
            cfg.eval.decomposition_refs,
            &mut rng,
        )?);
        report.combination = Some(combination_test(
            &generator,
            &manifest,
            &tax,
            &oracles,
            cfg.eval.combination_cases,
            &mut rng,
        )?);
    }
    let path = dir.join("report.json");
    report.save(&path)?;
    println!(
        "cases {}: subject {:.3} attr {:.3} joint {:.3} -> {}",
        report.cases,
        report.overall.subject_acc(),
        report.overall.attr_acc(),
        report.overall.joint_acc(),
        path.display()
    );
    Ok(())
}
