//! One TOML file drives every pipeline stage. Unknown keys are rejected;
//! each command writes a frozen copy of the resolved config next to its
//! outputs. The global seed derives every stage's seed, so one number
//! replays the whole pipeline.

use crate::adapter::AdapterConfig;
use crate::backbone::BackboneConfig;
use crate::ckpt::ModelConfig;
use crate::filter::FilterParams;
use crate::rng::derive_seed;
use crate::synth::CorpusConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Backbone section: the model shape minus derived quantities (image size
/// follows the corpus, vocabulary the taxonomy, condition width the
/// adapter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub base_channels: usize,
    pub ch_mults: Vec<usize>,
    pub blocks_per_stage: usize,
    pub attn_dim: usize,
    pub t_steps: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            base_channels: 32,
            ch_mults: vec![1, 2, 4],
            blocks_per_stage: 2,
            attn_dim: 64,
            t_steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Reference images in the validation set (4 targets each).
    pub refs: usize,
    /// References for the decomposition test.
    pub decomposition_refs: usize,
    /// Cases for the combination / tag-swap test.
    pub combination_cases: usize,
    /// DDIM steps at evaluation time.
    pub sample_steps: usize,
    pub guidance: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            refs: 100,
            decomposition_refs: 100,
            combination_cases: 100,
            sample_steps: 50,
            guidance: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub backbone: TrainConfig,
    pub adapter: TrainConfig,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            backbone: TrainConfig::backbone_default(),
            adapter: TrainConfig::adapter_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed: every stage seed is derived from it. Seed fields inside
    /// the sections are overwritten at run time.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub filter: FilterParams,
    pub backbone: BackboneSection,
    pub adapter: AdapterConfig,
    pub trainer: TrainerSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            filter: FilterParams::default(),
            backbone: BackboneSection::default(),
            adapter: AdapterConfig::default(),
            trainer: TrainerSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_seeds();
        Ok(cfg)
    }

    /// Derive every stage seed from the global seed. Masked to 63 bits so
    /// the frozen config stays representable as a TOML integer.
    pub fn resolve_seeds(&mut self) {
        let derive = |label| derive_seed(self.seed, label) & (i64::MAX as u64);
        self.corpus.seed = derive("corpus");
        self.filter.seed = derive("filter");
        self.trainer.backbone.seed = derive("pretrain");
        self.trainer.adapter.seed = derive("train-adapter");
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, "eval")
    }

    /// Assemble the full model configuration: image size from the corpus,
    /// vocabulary size from the taxonomy, condition width from the adapter.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                size: self.corpus.image_size,
                base_channels: self.backbone.base_channels,
                ch_mults: self.backbone.ch_mults.clone(),
                blocks_per_stage: self.backbone.blocks_per_stage,
                attn_dim: self.backbone.attn_dim,
                t_steps: self.backbone.t_steps,
                vocab_size,
                cond_tokens: self.adapter.n_slots * self.adapter.m_tokens,
            },
            adapter: self.adapter.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Write the resolved config next to a stage's outputs.
    pub fn save_frozen(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("run_config.toml"), toml::to_string_pretty(self)?)?;
        Ok(())
    }

    // Canonical artifact locations under the output root.
    pub fn corpus_dir(&self) -> PathBuf {
        self.out_dir.join("corpus")
    }
    pub fn filter_report_path(&self) -> PathBuf {
        self.out_dir.join("filter").join("report.json")
    }
    pub fn pretrain_dir(&self) -> PathBuf {
        self.out_dir.join("pretrain")
    }
    pub fn backbone_ckpt_dir(&self) -> PathBuf {
        self.pretrain_dir().join("checkpoint")
    }
    pub fn adapter_dir(&self) -> PathBuf {
        self.out_dir.join("adapter")
    }
    pub fn adapter_ckpt_dir(&self) -> PathBuf {
        self.adapter_dir().join("checkpoint")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_gives_defaults_and_round_trips() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.eval.refs, 100);
        assert_eq!(cfg.trainer.adapter.lr, 2e-5);
        assert_eq!(cfg.trainer.adapter.epochs, 3);
        assert_eq!(cfg.trainer.adapter.weight_decay, 1e-3);
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[corpus]\nbogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[eval]\nbogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[trainer.adapter]\nbogus = 1").is_err());
    }

    #[test]
    fn stage_seeds_derive_from_global() {
        let mut a: RunConfig = toml::from_str("seed = 1").unwrap();
        let mut b: RunConfig = toml::from_str("seed = 2").unwrap();
        a.resolve_seeds();
        b.resolve_seeds();
        assert_ne!(a.corpus.seed, b.corpus.seed);
        assert_ne!(a.corpus.seed, a.filter.seed);
        let mut a2: RunConfig = toml::from_str("seed = 1").unwrap();
        a2.resolve_seeds();
        assert_eq!(a.corpus.seed, a2.corpus.seed);
    }

    #[test]
    fn model_config_assembles_derived_fields() {
        let cfg = RunConfig::default();
        let mc = cfg.model_config(30).unwrap();
        assert_eq!(mc.backbone.vocab_size, 30);
        assert_eq!(mc.backbone.cond_tokens, 24);
        assert_eq!(mc.backbone.size, 32);
        // mismatched adapter width must be rejected
        let mut bad = cfg.clone();
        bad.adapter.attn_dim = 32;
        assert!(bad.model_config(30).is_err());
    }
}
