//! Two-stage training. Stage one pretrains the text-conditioned denoising
//! backbone (and the adapter's image encoder, as an autoencoder) on the
//! synthetic corpus. Stage two trains the adapter — Q-Former, projector,
//! and the U-Net image-branch projections — with every base parameter
//! frozen, using attribute-shared reference sampling, tag augmentation,
//! condition dropout, and slot shuffling.

use crate::adapter::ConvDecoder;
use crate::backbone::{image_to_tensor, TextTokens, Vocab};
use crate::ckpt::Model;
use crate::filter::FilterReport;
use crate::rng::{rng_from, standard_normal, Rng};
use crate::synth::{Manifest, SampleRecord};
use crate::taxonomy::Taxonomy;
use crate::{Error, Result};
use candle_core::{DType, Tensor};
use candle_nn::{Optimizer, VarBuilder, VarMap};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Backbone,
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub lr: f64,
    pub weight_decay: f64,
    /// Adapter stage: passes over the training split.
    pub epochs: usize,
    /// Backbone stage: optimization step budget.
    pub steps: usize,
    /// Encoder-autoencoder step budget (backbone stage only).
    pub autoencoder_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub condition_dropout_p: f64,
}

impl TrainConfig {
    pub fn backbone_default() -> Self {
        TrainConfig {
            stage: TrainStage::Backbone,
            lr: 1e-3,
            weight_decay: 1e-3,
            epochs: 0,
            steps: 30_000,
            autoencoder_steps: 2_000,
            batch_size: 8,
            seed: 0,
            condition_dropout_p: 0.1,
        }
    }

    pub fn adapter_default() -> Self {
        TrainConfig {
            stage: TrainStage::Adapter,
            lr: 2e-5,
            weight_decay: 1e-3,
            epochs: 3,
            steps: 0,
            autoencoder_steps: 0,
            batch_size: 8,
            seed: 0,
            condition_dropout_p: 0.1,
        }
    }
}

/// One reference slot of a training example, before image loading.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleSlot {
    pub reference_id: String,
    pub tag: String,
}

/// A target record, its subject-only text, and one reference per target
/// attribute. `dropped` empties the condition set for guidance support.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub target: SampleRecord,
    pub text: String,
    pub slots: Vec<ExampleSlot>,
    pub dropped: bool,
}

/// Line-delimited audit record of a sampled example.
#[derive(Debug, Serialize, Deserialize)]
pub struct AuditRecord {
    pub target_id: String,
    pub slots: Vec<ExampleSlot>,
    pub dropped: bool,
}

/// Pick a reference for `target`'s attribute `keyword`: both subjects lie
/// under one consistent range node, reference != target, and the subjects
/// differ whenever the range offers another.
fn sample_reference<'a>(
    tax: &Taxonomy,
    report: &FilterReport,
    manifest: &'a Manifest,
    target: &SampleRecord,
    keyword: &str,
    rng: &mut Rng,
) -> Result<&'a SampleRecord> {
    let nodes = report.ranges.get(keyword).cloned().unwrap_or_default();
    let ancestors = tax.tree.ancestors(&target.subject)?;
    let node = nodes
        .iter()
        .find(|n| ancestors.contains(n))
        .ok_or_else(|| {
            Error::StarvedRange(format!(
                "subject '{}' lies in no consistent range for '{keyword}'",
                target.subject
            ))
        })?;
    let leaves = tax.tree.leaves_under(node)?;
    let pool: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| {
            r.id != target.id
                && leaves.contains(&r.subject)
                && r.attributes.iter().any(|a| a.keyword == keyword)
        })
        .collect();
    if pool.is_empty() {
        return Err(Error::StarvedRange(format!(
            "no reference for '{keyword}' under '{node}' besides the target"
        )));
    }
    let cross: Vec<&&SampleRecord> = pool.iter().filter(|r| r.subject != target.subject).collect();
    Ok(if cross.is_empty() {
        pool[rng.gen_range(0..pool.len())]
    } else {
        cross[rng.gen_range(0..cross.len())]
    })
}

/// Build one adapter-training example: one slot per target attribute, tags
/// via synonym augmentation, subject-only text, whole-set dropout with
/// probability `dropout_p`.
pub fn make_training_example(
    target: &SampleRecord,
    manifest: &Manifest,
    report: &FilterReport,
    tax: &Taxonomy,
    dropout_p: f64,
    rng: &mut Rng,
) -> Result<TrainingExample> {
    let text = tax.tree.node(&target.subject)?.name.clone();
    let dropped = rng.gen_bool(dropout_p);
    let mut slots = Vec::new();
    if !dropped {
        for attr in &target.attributes {
            let rf = sample_reference(tax, report, manifest, target, &attr.keyword, rng)?;
            slots.push(ExampleSlot {
                reference_id: rf.id.clone(),
                tag: tax.augment_tag(attr, rng)?,
            });
        }
    }
    Ok(TrainingExample {
        target: target.clone(),
        text,
        slots,
        dropped,
    })
}

/// In-memory image cache: record id -> (3, S, S) tensor in [-1, 1].
pub struct ImageCache {
    tensors: HashMap<String, Tensor>,
}

impl ImageCache {
    pub fn preload(manifest: &Manifest, dtype: DType, dev: &candle_core::Device) -> Result<Self> {
        let mut tensors = HashMap::new();
        for rec in &manifest.records {
            let img = manifest.load_image(rec)?;
            tensors.insert(rec.id.clone(), image_to_tensor(&img, dtype, dev)?);
        }
        Ok(ImageCache { tensors })
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.tensors
            .get(id)
            .ok_or_else(|| Error::Contract(format!("record {id} missing from image cache")))
    }
}

#[derive(Debug, Clone, Serialize)]
struct MetricsLine {
    step: usize,
    loss: f64,
    lr: f64,
}

struct MetricsLog {
    file: Option<std::fs::File>,
}

impl MetricsLog {
    fn create(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                Some(std::fs::File::create(p)?)
            }
            None => None,
        };
        Ok(MetricsLog { file })
    }

    fn log(&mut self, step: usize, loss: f64, lr: f64) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&MetricsLine { step, loss, lr })?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Watches for sustained blow-up: loss above 10x the initial loss for 500
/// consecutive steps aborts the run.
struct DivergenceDetector {
    initial: Option<f64>,
    streak: usize,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 500;

impl DivergenceDetector {
    fn new() -> Self {
        DivergenceDetector {
            initial: None,
            streak: 0,
        }
    }

    fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite loss {loss} at step {step}"
            )));
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= DIVERGENCE_PATIENCE {
            return Err(Error::Contract(format!(
                "training diverged: loss {loss} > {DIVERGENCE_FACTOR}x initial {initial} \
                 for {DIVERGENCE_PATIENCE} steps (at step {step})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub skipped_examples: usize,
}

fn adamw(vars: Vec<candle_core::Var>, lr: f64, weight_decay: f64) -> Result<candle_nn::AdamW> {
    Ok(candle_nn::AdamW::new(
        vars,
        candle_nn::ParamsAdamW {
            lr,
            weight_decay,
            ..Default::default()
        },
    )?)
}

/// Stage-one half A: train the adapter's image encoder as an autoencoder.
/// The throwaway decoder lives in its own varmap and never reaches a
/// checkpoint. Returns the mean absolute reconstruction error in [0, 1]
/// pixel units over the last 50 steps.
pub fn pretrain_autoencoder(
    model: &Model,
    manifest: &Manifest,
    cache: &ImageCache,
    cfg: &TrainConfig,
    metrics_path: Option<&Path>,
) -> Result<f64> {
    let dev = model.backbone.device().clone();
    let dtype = model.backbone.dtype();
    let dec_map = VarMap::new();
    let dec_vb = VarBuilder::from_varmap(&dec_map, dtype, &dev);
    let decoder = ConvDecoder::new(&model.cfg.adapter.enc_channels, dec_vb.pp("decoder"))?;
    let enc_width = *model.cfg.adapter.enc_channels.last().unwrap();

    let mut vars: Vec<candle_core::Var> = {
        let data = model.varmap.data().lock().unwrap();
        let mut names: Vec<&String> = data
            .keys()
            .filter(|n| n.starts_with("base.encoder."))
            .collect();
        names.sort();
        names.iter().map(|n| data[*n].clone()).collect()
    };
    vars.extend(dec_map.all_vars());
    let mut opt = adamw(vars, 1e-3, 0.0)?;

    let train: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| r.split == crate::synth::Split::Train)
        .collect();
    if train.is_empty() {
        return Err(Error::Contract("no training-split records".into()));
    }
    let mut rng = rng_from(cfg.seed, "autoencoder");
    let mut log = MetricsLog::create(metrics_path)?;
    let mut tail = Vec::new();
    for step in 0..cfg.autoencoder_steps {
        let batch: Vec<Tensor> = (0..cfg.batch_size)
            .map(|_| {
                cache
                    .get(&train[rng.gen_range(0..train.len())].id)
                    .cloned()
            })
            .collect::<Result<_>>()?;
        let x = Tensor::stack(&batch, 0)?;
        let patches = model.adapter.encoder.forward(&x)?; // (B, 64, e)
        let grid = patches.transpose(1, 2)?.reshape((
            cfg.batch_size,
            enc_width,
            8,
            8,
        ))?;
        let recon = decoder.forward(&grid)?;
        let loss = (recon - &x)?.abs()?.mean_all()?;
        opt.backward_step(&loss)?;
        let l: f64 = loss.to_dtype(DType::F64)?.to_scalar()?;
        log.log(step, l, 1e-3)?;
        if step + 50 >= cfg.autoencoder_steps {
            // report in [0,1] pixel units: half the [-1,1] error
            tail.push(l / 2.0);
        }
    }
    Ok(tail.iter().sum::<f64>() / tail.len().max(1) as f64)
}

/// Stage-one half B: epsilon-MSE pretraining of the text-conditioned
/// backbone. Prompts carry attributes and subject; with probability
/// `condition_dropout_p` the text is blanked for guidance support.
pub fn train_backbone(
    model: &Model,
    tax: &Taxonomy,
    vocab: &Vocab,
    manifest: &Manifest,
    cache: &ImageCache,
    cfg: &TrainConfig,
    metrics_path: Option<&Path>,
) -> Result<TrainLog> {
    let dev = model.backbone.device().clone();
    let dtype = model.backbone.dtype();
    let t_steps = model.schedule.t_steps;
    let train: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| r.split == crate::synth::Split::Train)
        .collect();
    if train.is_empty() {
        return Err(Error::Contract("no training-split records".into()));
    }
    // pre-tokenize prompts once
    let mut tokens: HashMap<&str, TextTokens> = HashMap::new();
    for rec in &train {
        tokens.insert(rec.id.as_str(), vocab.tokenize(&rec.prompt(tax)?.text)?);
    }
    let empty = TextTokens::empty();

    let mut opt = adamw(model.base_vars(), cfg.lr, cfg.weight_decay)?;
    let mut rng = rng_from(cfg.seed, "backbone");
    let mut log = MetricsLog::create(metrics_path)?;
    let mut detector = DivergenceDetector::new();
    let mut out = TrainLog::default();
    let size = model.cfg.backbone.size;

    for step in 0..cfg.steps {
        let mut x0s = Vec::with_capacity(cfg.batch_size);
        let mut tok_rows = Vec::with_capacity(cfg.batch_size);
        let mut ts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let rec = train[rng.gen_range(0..train.len())];
            x0s.push(cache.get(&rec.id)?.clone());
            let tk = if rng.gen_bool(cfg.condition_dropout_p) {
                &empty
            } else {
                &tokens[rec.id.as_str()]
            };
            tok_rows.extend_from_slice(tk.ids());
            ts.push(rng.gen_range(0..t_steps) as u32);
        }
        let x0 = Tensor::stack(&x0s, 0)?;
        let tok = Tensor::from_vec(
            tok_rows,
            (cfg.batch_size, crate::backbone::MAX_TEXT_LEN),
            &dev,
        )?;
        let t = Tensor::from_vec(ts, cfg.batch_size, &dev)?;
        let eps_v = standard_normal(&mut rng, cfg.batch_size * 3 * size * size);
        let eps = Tensor::from_vec(eps_v, (cfg.batch_size, 3, size, size), &dev)?
            .to_dtype(dtype)?;
        let x_t = model.schedule.q_sample(&x0, &t, &eps)?;
        let pred = model.backbone.forward(&x_t, &t, &tok, None)?;
        let loss = (pred - eps)?.sqr()?.mean_all()?;
        opt.backward_step(&loss)?;
        let l: f64 = loss.to_dtype(DType::F64)?.to_scalar()?;
        detector.observe(step, l)?;
        log.log(step, l, cfg.lr)?;
        out.losses.push(l);
    }
    Ok(out)
}

/// Stage two: adapter training with the base group frozen. Only the
/// Q-Former, projector, and image-branch attention projections receive
/// gradient updates; the base-group hash is asserted constant.
#[allow(clippy::too_many_arguments)]
pub fn train_adapter(
    model: &Model,
    tax: &Taxonomy,
    vocab: &Vocab,
    manifest: &Manifest,
    report: &FilterReport,
    cache: &ImageCache,
    cfg: &TrainConfig,
    metrics_path: Option<&Path>,
    audit_path: Option<&Path>,
) -> Result<TrainLog> {
    let dev = model.backbone.device().clone();
    let dtype = model.backbone.dtype();
    let t_steps = model.schedule.t_steps;
    let size = model.cfg.backbone.size;
    let base_hash = model.base_hash()?;

    let train: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| r.split == crate::synth::Split::Train)
        .collect();
    if train.is_empty() {
        return Err(Error::Contract("no training-split records".into()));
    }

    let mut opt = adamw(model.adapter_vars(), cfg.lr, cfg.weight_decay)?;
    let mut rng = rng_from(cfg.seed, "adapter");
    let mut log = MetricsLog::create(metrics_path)?;
    let mut audit = MetricsLog::create(audit_path)?;
    let mut detector = DivergenceDetector::new();
    let mut out = TrainLog::default();
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut pending: Vec<TrainingExample> = Vec::new();
        for &i in &order {
            let ex = match make_training_example(
                train[i],
                manifest,
                report,
                tax,
                cfg.condition_dropout_p,
                &mut rng,
            ) {
                Ok(ex) => ex,
                Err(Error::StarvedRange(_)) => {
                    out.skipped_examples += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if let Some(f) = &mut audit.file {
                let line = serde_json::to_string(&AuditRecord {
                    target_id: ex.target.id.clone(),
                    slots: ex.slots.clone(),
                    dropped: ex.dropped,
                })?;
                writeln!(f, "{line}")?;
            }
            pending.push(ex);
            if pending.len() < cfg.batch_size {
                continue;
            }
            let batch = std::mem::take(&mut pending);

            let mut x0s = Vec::with_capacity(batch.len());
            let mut tok_rows = Vec::with_capacity(batch.len());
            let mut ts = Vec::with_capacity(batch.len());
            let mut conds = Vec::with_capacity(batch.len());
            for ex in &batch {
                x0s.push(cache.get(&ex.target.id)?.clone());
                tok_rows.extend_from_slice(vocab.tokenize(&ex.text)?.ids());
                ts.push(rng.gen_range(0..t_steps) as u32);
                let mut feats = Vec::new();
                for slot in &ex.slots {
                    let img = cache.get(&slot.reference_id)?.unsqueeze(0)?;
                    let tag = vocab.tokenize(&slot.tag)?;
                    let tagt = Tensor::from_vec(
                        tag.ids().to_vec(),
                        (1, crate::backbone::MAX_TEXT_LEN),
                        &dev,
                    )?;
                    feats.push(model.adapter.extract(&img, &tagt)?);
                }
                conds.push(model.adapter.assemble(&feats, true, &mut rng)?);
            }
            let b = batch.len();
            let x0 = Tensor::stack(&x0s, 0)?;
            let tok = Tensor::from_vec(tok_rows, (b, crate::backbone::MAX_TEXT_LEN), &dev)?;
            let t = Tensor::from_vec(ts, b, &dev)?;
            let cond_refs: Vec<&Tensor> = conds.iter().collect();
            let cond = Tensor::cat(&cond_refs, 0)?;
            let eps_v = standard_normal(&mut rng, b * 3 * size * size);
            let eps = Tensor::from_vec(eps_v, (b, 3, size, size), &dev)?.to_dtype(dtype)?;
            let x_t = model.schedule.q_sample(&x0, &t, &eps)?;
            let pred = model.backbone.forward(&x_t, &t, &tok, Some(&cond))?;
            let loss = (pred - eps)?.sqr()?.mean_all()?;
            opt.backward_step(&loss)?;
            let l: f64 = loss.to_dtype(DType::F64)?.to_scalar()?;
            detector.observe(step, l)?;
            log.log(step, l, cfg.lr)?;
            out.losses.push(l);
            step += 1;
        }
        if model.base_hash()? != base_hash {
            return Err(Error::Contract(
                "frozen base group changed during adapter training".into(),
            ));
        }
    }
    if model.base_hash()? != base_hash {
        return Err(Error::Contract(
            "frozen base group changed during adapter training".into(),
        ));
    }
    Ok(out)
}

/// Mean epsilon-MSE on a fixed, deterministic batch; used to check that a
/// reloaded checkpoint reproduces losses bitwise.
pub fn eval_loss(
    model: &Model,
    vocab: &Vocab,
    manifest: &Manifest,
    cache: &ImageCache,
    tax: &Taxonomy,
    seed: u64,
) -> Result<f64> {
    let dev = model.backbone.device().clone();
    let dtype = model.backbone.dtype();
    let size = model.cfg.backbone.size;
    let recs: Vec<&SampleRecord> = manifest.records.iter().take(8).collect();
    if recs.is_empty() {
        return Err(Error::Contract("empty manifest".into()));
    }
    let mut rng = rng_from(seed, "eval-loss");
    let b = recs.len();
    let mut x0s = Vec::new();
    let mut tok_rows = Vec::new();
    let mut ts = Vec::new();
    for rec in &recs {
        x0s.push(cache.get(&rec.id)?.clone());
        tok_rows.extend_from_slice(vocab.tokenize(&rec.prompt(tax)?.text)?.ids());
        ts.push(rng.gen_range(0..model.schedule.t_steps) as u32);
    }
    let x0 = Tensor::stack(&x0s, 0)?;
    let tok = Tensor::from_vec(tok_rows, (b, crate::backbone::MAX_TEXT_LEN), &dev)?;
    let t = Tensor::from_vec(ts, b, &dev)?;
    let eps_v = standard_normal(&mut rng, b * 3 * size * size);
    let eps = Tensor::from_vec(eps_v, (b, 3, size, size), &dev)?.to_dtype(dtype)?;
    let x_t = model.schedule.q_sample(&x0, &t, &eps)?;
    let pred = model.backbone.forward(&x_t, &t, &tok, None)?;
    let loss: f64 = (pred - eps)?
        .sqr()?
        .mean_all()?
        .to_dtype(DType::F64)?
        .to_scalar()?;
    Ok(loss)
}
