//! Versioned checkpoint container and the full model bundle.
//!
//! A checkpoint is a directory holding `weights.safetensors` plus
//! `meta.json` with the format version, an echo of the model configuration,
//! a content hash over all tensors, and per-group hashes for the `base` and
//! `adapter` parameter partitions. Loading rejects configuration mismatches
//! and corrupted weights; a base-only checkpoint loads with a freshly
//! initialized adapter whose image-branch projections are copied from the
//! text branch.

use crate::adapter::{Adapter, AdapterConfig};
use crate::backbone::{BackboneConfig, EpsPredictor, NoiseSchedule};
use crate::{Error, Result};
use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        let backbone = BackboneConfig::with_vocab(vocab_size);
        let adapter = AdapterConfig::default();
        ModelConfig { backbone, adapter }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.adapter.attn_dim != self.backbone.attn_dim {
            return Err(Error::Config(
                "adapter attn_dim must match backbone attn_dim".into(),
            ));
        }
        if self.adapter.n_slots * self.adapter.m_tokens != self.backbone.cond_tokens {
            return Err(Error::Config(format!(
                "backbone cond_tokens {} != n_slots {} x m_tokens {}",
                self.backbone.cond_tokens, self.adapter.n_slots, self.adapter.m_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ModelConfig,
    pub content_hash: String,
    pub group_hashes: BTreeMap<String, String>,
}

fn hash_tensors(named: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update(name.as_bytes());
        h.update([0u8]);
        for &d in t.dims() {
            h.update((d as u64).to_le_bytes());
        }
        let vals: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        for v in vals {
            h.update(v.to_le_bytes());
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

fn varmap_tensors(varmap: &VarMap, prefix: Option<&str>) -> BTreeMap<String, Tensor> {
    let data = varmap.data().lock().unwrap();
    data.iter()
        .filter(|(name, _)| prefix.is_none_or(|p| name.starts_with(p)))
        .map(|(name, var)| (name.clone(), var.as_tensor().clone()))
        .collect()
}

/// Hash of all parameters under a name prefix (e.g. "base." or "adapter.").
/// Used to verify the freezing contract across training stages.
pub fn group_hash(varmap: &VarMap, prefix: &str) -> Result<String> {
    hash_tensors(&varmap_tensors(varmap, Some(prefix)))
}

pub fn save_checkpoint(dir: &Path, varmap: &VarMap, cfg: &ModelConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    varmap.save(dir.join(WEIGHTS_FILE))?;
    let all = varmap_tensors(varmap, None);
    let mut group_hashes = BTreeMap::new();
    group_hashes.insert("base".to_string(), group_hash(varmap, "base.")?);
    group_hashes.insert("adapter".to_string(), group_hash(varmap, "adapter.")?);
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        content_hash: hash_tensors(&all)?,
        group_hashes,
    };
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("bad metadata in {}: {e}", path.display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    Ok(meta)
}

#[derive(Debug, Clone, Copy)]
pub struct LoadReport {
    /// False when the file held only the base group and the adapter stayed
    /// freshly initialized.
    pub adapter_loaded: bool,
}

/// Load weights from `dir` into an already-built varmap. The base group must
/// be complete; the adapter group is all-or-nothing. The stored content hash
/// is verified against the file.
pub fn load_weights(dir: &Path, varmap: &VarMap) -> Result<LoadReport> {
    let meta = read_meta(dir)?;
    let path = dir.join(WEIGHTS_FILE);
    let stored = candle_core::safetensors::load(&path, &Device::Cpu)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let stored: BTreeMap<String, Tensor> = stored.into_iter().collect();
    let actual_hash = hash_tensors(&stored)?;
    if actual_hash != meta.content_hash {
        return Err(Error::Checkpoint(format!(
            "content hash mismatch in {} (corrupted or tampered weights)",
            dir.display()
        )));
    }

    let data = varmap.data().lock().unwrap();
    let mut base_missing = Vec::new();
    let mut adapter_hits = 0usize;
    let mut adapter_total = 0usize;
    for (name, var) in data.iter() {
        let in_adapter = name.starts_with("adapter.");
        if in_adapter {
            adapter_total += 1;
        }
        match stored.get(name) {
            Some(t) => {
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
                var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
                if in_adapter {
                    adapter_hits += 1;
                }
            }
            None if in_adapter => {}
            None => base_missing.push(name.clone()),
        }
    }
    if !base_missing.is_empty() {
        base_missing.sort();
        return Err(Error::Checkpoint(format!(
            "checkpoint missing base parameters: {}",
            base_missing.join(", ")
        )));
    }
    if adapter_hits != 0 && adapter_hits != adapter_total {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {adapter_hits}/{adapter_total} adapter parameters; \
             the adapter group must be complete or absent"
        )));
    }
    Ok(LoadReport {
        adapter_loaded: adapter_hits == adapter_total && adapter_total > 0,
    })
}

/// The full model bundle: one varmap holding both parameter groups, the
/// epsilon-predictor U-Net, the reference adapter, and the noise schedule.
pub struct Model {
    pub varmap: VarMap,
    pub cfg: ModelConfig,
    pub backbone: EpsPredictor,
    pub adapter: Adapter,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn new(cfg: &ModelConfig, dtype: DType, dev: &Device) -> Result<Self> {
        cfg.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, dev);
        let backbone = EpsPredictor::new(&cfg.backbone, vb.pp("base"), vb.pp("adapter"))?;
        let adapter = Adapter::new(
            &cfg.adapter,
            cfg.backbone.vocab_size,
            vb.pp("base"),
            vb.pp("adapter"),
        )?;
        let schedule = NoiseSchedule::new(cfg.backbone.t_steps);
        Ok(Model {
            varmap,
            cfg: cfg.clone(),
            backbone,
            adapter,
            schedule,
        })
    }

    pub fn base_hash(&self) -> Result<String> {
        group_hash(&self.varmap, "base.")
    }

    pub fn adapter_hash(&self) -> Result<String> {
        group_hash(&self.varmap, "adapter.")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.varmap, &self.cfg)
    }

    /// Build from a checkpoint. When `expected` is given, the stored config
    /// must match it exactly. A base-only checkpoint gets a fresh adapter
    /// with W'_k/W'_v copied from the text branch.
    pub fn load(
        dir: &Path,
        expected: Option<&ModelConfig>,
        dtype: DType,
        dev: &Device,
    ) -> Result<(Self, LoadReport)> {
        let meta = read_meta(dir)?;
        if let Some(exp) = expected {
            if &meta.config != exp {
                return Err(Error::Checkpoint(format!(
                    "configuration mismatch: checkpoint in {} was written with a \
                     different model configuration",
                    dir.display()
                )));
            }
        }
        let model = Model::new(&meta.config, dtype, dev)?;
        let report = load_weights(dir, &model.varmap)?;
        if !report.adapter_loaded {
            model.backbone.init_dual_from_base(&model.varmap)?;
        }
        Ok((model, report))
    }

    /// Variables in the trainable adapter partition: Q-Former, projector,
    /// and the U-Net image-branch projections. Everything else is frozen
    /// during adapter training.
    pub fn adapter_vars(&self) -> Vec<candle_core::Var> {
        let data = self.varmap.data().lock().unwrap();
        let mut names: Vec<&String> = data.keys().filter(|n| n.starts_with("adapter.")).collect();
        names.sort();
        names.iter().map(|n| data[*n].clone()).collect()
    }

    /// Variables in the base partition, for backbone pretraining.
    pub fn base_vars(&self) -> Vec<candle_core::Var> {
        let data = self.varmap.data().lock().unwrap();
        let mut names: Vec<&String> = data.keys().filter(|n| n.starts_with("base.")).collect();
        names.sort();
        names.iter().map(|n| data[*n].clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::with_vocab(12);
        cfg.backbone.base_channels = 8;
        cfg.backbone.ch_mults = vec![1, 2];
        cfg.backbone.blocks_per_stage = 1;
        cfg.backbone.attn_dim = 16;
        cfg.adapter.attn_dim = 16;
        cfg.adapter.width = 16;
        cfg.adapter.enc_channels = vec![4, 8, 16];
        cfg
    }

    #[test]
    fn save_load_round_trip_preserves_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let m = Model::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        m.save(dir.path()).unwrap();
        let (m2, rep) = Model::load(dir.path(), Some(&cfg), DType::F32, &Device::Cpu).unwrap();
        assert!(rep.adapter_loaded);
        assert_eq!(m.base_hash().unwrap(), m2.base_hash().unwrap());
        assert_eq!(m.adapter_hash().unwrap(), m2.adapter_hash().unwrap());
    }

    #[test]
    fn load_rejects_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        Model::new(&cfg, DType::F32, &Device::Cpu)
            .unwrap()
            .save(dir.path())
            .unwrap();
        let mut other = cfg.clone();
        other.backbone.base_channels = 16;
        let err = Model::load(dir.path(), Some(&other), DType::F32, &Device::Cpu);
        assert!(matches!(err, Err(Error::Checkpoint(_))));
    }

    #[test]
    fn load_rejects_corrupted_weights() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let m = Model::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        m.save(dir.path()).unwrap();
        // flip bytes in the weights file past the safetensors header
        let wpath = dir.path().join(WEIGHTS_FILE);
        let mut bytes = std::fs::read(&wpath).unwrap();
        let n = bytes.len();
        for b in &mut bytes[n - 16..] {
            *b ^= 0xff;
        }
        std::fs::write(&wpath, bytes).unwrap();
        let err = Model::load(dir.path(), Some(&cfg), DType::F32, &Device::Cpu);
        assert!(matches!(err, Err(Error::Checkpoint(_))));
    }

    #[test]
    fn base_only_checkpoint_gets_dual_init() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let m = Model::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        // save only the base group by building a varmap view
        let base_map = VarMap::new();
        {
            let src = m.varmap.data().lock().unwrap();
            let mut dst = base_map.data().lock().unwrap();
            for (name, var) in src.iter().filter(|(n, _)| n.starts_with("base.")) {
                dst.insert(name.clone(), var.clone());
            }
        }
        save_checkpoint(dir.path(), &base_map, &cfg).unwrap();
        let (m2, rep) = Model::load(dir.path(), Some(&cfg), DType::F32, &Device::Cpu).unwrap();
        assert!(!rep.adapter_loaded);
        assert_eq!(m.base_hash().unwrap(), m2.base_hash().unwrap());
        // W'_k must equal W_k after the copy-init
        let data = m2.varmap.data().lock().unwrap();
        let site = m2.backbone.site_paths()[0].clone();
        let wk = data[&format!("base.unet.{site}.wk.weight")].as_tensor();
        let wki = data[&format!("adapter.dual.{site}.wk_img.weight")].as_tensor();
        let diff: f32 = (wk - wki)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn adapter_vars_cover_expected_names() {
        let cfg = small_cfg();
        let m = Model::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        let n_adapter = m.adapter_vars().len();
        let n_base = m.base_vars().len();
        let total = m.varmap.all_vars().len();
        assert_eq!(n_adapter + n_base, total);
        // every attention site contributes exactly W'_k and W'_v
        let data = m.varmap.data().lock().unwrap();
        let dual: Vec<&String> = data.keys().filter(|n| n.starts_with("adapter.dual.")).collect();
        assert_eq!(dual.len(), 2 * m.backbone.site_paths().len());
    }
}
