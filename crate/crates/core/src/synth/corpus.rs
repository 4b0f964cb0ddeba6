//! Corpus generation: prompt sampling, deterministic rendering, planted
//! range-sensitivity, and the line-delimited manifest.

use crate::rng::{derive_seed, rng_from, rng_seeded, Rng};
use crate::synth::render::{render_record_image, RenderOutput};
use crate::taxonomy::{AttributeClass, AttributeInstance, PromptSpec, Taxonomy};
use crate::{Error, Result};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// How a planted inconsistency manifests below its node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantMode {
    /// Each leaf under the node renders a different (but per-leaf stable)
    /// parameter shift: the node is inconsistent, its leaves are consistent.
    PerLeaf,
    /// The shift depends on the render seed: inconsistent even at leaves,
    /// so the filter must remove the pair.
    PerSeed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    pub keyword: String,
    pub node: String,
    pub mode: PlantMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_num_prompts")]
    pub num_prompts: usize,
    #[serde(default = "default_seeds_per_prompt")]
    pub seeds_per_prompt: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Probability weights for drawing 1, 2, or 3 attributes per prompt.
    #[serde(default = "default_attr_count_weights")]
    pub attr_count_weights: [f64; 3],
    /// Per-class sampling weights; uniform when empty.
    #[serde(default)]
    pub class_weights: BTreeMap<String, f64>,
    /// Planted range-sensitive inconsistencies.
    #[serde(default)]
    pub consistency_map: Vec<Planted>,
}

fn default_image_size() -> usize {
    32
}
fn default_num_prompts() -> usize {
    2000
}
fn default_seeds_per_prompt() -> usize {
    4
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_attr_count_weights() -> [f64; 3] {
    [0.4, 0.35, 0.25]
}

impl Default for CorpusConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

/// One generated image with full provenance. The on-disk manifest line
/// carries exactly: id, subject, attributes, seed, split, image_path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub subject: String,
    pub attributes: Vec<AttributeInstance>,
    pub seed: u64,
    pub split: Split,
    pub image_path: String,
}

impl SampleRecord {
    pub fn prompt(&self, tax: &Taxonomy) -> Result<PromptSpec> {
        let name = &tax.tree.node(&self.subject)?.name;
        let mut parts: Vec<String> = self.attributes.iter().map(|a| a.keyword.clone()).collect();
        parts.push(name.clone());
        Ok(PromptSpec {
            attributes: self.attributes.clone(),
            subject: self.subject.clone(),
            text: parts.join(", "),
            seed: self.seed,
        })
    }

    pub fn mask_path(&self) -> String {
        self.image_path.replace("images/", "masks/")
    }

    pub fn attribute_of_class(&self, class: AttributeClass) -> Option<&AttributeInstance> {
        self.attributes.iter().find(|a| a.class == class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub config: CorpusConfig,
    pub root: PathBuf,
}

impl Manifest {
    pub fn record(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn image_file(&self, rec: &SampleRecord) -> PathBuf {
        self.root.join(&rec.image_path)
    }

    pub fn mask_file(&self, rec: &SampleRecord) -> PathBuf {
        self.root.join(rec.mask_path())
    }

    pub fn load_image(&self, rec: &SampleRecord) -> Result<crate::Image> {
        crate::Image::load_png(&self.image_file(rec))
    }

    pub fn load_mask(&self, rec: &SampleRecord) -> Result<ndarray::Array2<f32>> {
        let im = image::open(self.mask_file(rec))?.to_luma8();
        let (w, h) = (im.width() as usize, im.height() as usize);
        let data: Vec<f32> = im.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
        ndarray::Array2::from_shape_vec((h, w), data)
            .map_err(|e| Error::other(format!("mask shape: {e}")))
    }
}

/// Parameter shift used for planting: the parameters of the keyword whose
/// label is `shift` steps after `attr`'s within the same class.
pub fn shifted_params(
    tax: &Taxonomy,
    attr: &AttributeInstance,
    shift: usize,
) -> Result<BTreeMap<String, f64>> {
    let specs = tax.specs_of_class(attr.class);
    let base = tax.spec(&attr.keyword)?;
    let k = specs.len();
    let target = &specs[(base.label + shift) % k];
    Ok(target
        .param_schema
        .iter()
        .map(|(name, range)| (name.clone(), range.default_value()))
        .collect())
}

/// The label shift planted for (keyword, subject, seed), if any.
pub fn planted_shift(
    config: &CorpusConfig,
    tax: &Taxonomy,
    keyword: &str,
    subject: &str,
    seed: u64,
) -> Result<usize> {
    for plant in &config.consistency_map {
        if plant.keyword != keyword {
            continue;
        }
        let chain = tax.tree.ancestors(subject)?;
        if !chain.contains(&plant.node) {
            continue;
        }
        let k = tax.class_cardinality(tax.spec(keyword)?.class);
        return Ok(match plant.mode {
            PlantMode::PerLeaf => {
                let leaves = tax.tree.leaves_under(&plant.node)?;
                let rank = leaves.iter().position(|l| l == subject).unwrap_or(0);
                1 + rank % (k - 1).max(1)
            }
            PlantMode::PerSeed => (seed % 2) as usize,
        });
    }
    Ok(0)
}

/// Ground-truth oracle label for a record's attribute of `class`, planting
/// included.
pub fn expected_label(
    config: &CorpusConfig,
    tax: &Taxonomy,
    rec: &SampleRecord,
    class: AttributeClass,
) -> Result<Option<usize>> {
    let Some(attr) = rec.attribute_of_class(class) else {
        return Ok(None);
    };
    let base = tax.spec(&attr.keyword)?.label;
    let shift = planted_shift(config, tax, &attr.keyword, &rec.subject, rec.seed)?;
    let k = tax.class_cardinality(class);
    Ok(Some((base + shift) % k))
}

/// Re-render a record's pixels exactly as the generator produced them.
pub fn render_record(
    config: &CorpusConfig,
    tax: &Taxonomy,
    rec: &SampleRecord,
) -> Result<RenderOutput> {
    let prompt = rec.prompt(tax)?;
    let seed = rec.seed;
    let subject = rec.subject.clone();
    render_record_image(tax, &prompt, config.image_size, seed, &|attr| {
        match planted_shift(config, tax, &attr.keyword, &subject, seed) {
            Ok(0) | Err(_) => None,
            Ok(s) => shifted_params(tax, attr, s).ok(),
        }
    })
}

fn weighted_pick<T: Clone>(items: &[(T, f64)], rng: &mut Rng) -> T {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut r = rng.gen_range(0.0..total);
    for (item, w) in items {
        if r < *w {
            return item.clone();
        }
        r -= w;
    }
    items.last().unwrap().0.clone()
}

fn build_weighted_prompt(tax: &Taxonomy, config: &CorpusConfig, rng: &mut Rng) -> Result<PromptSpec> {
    let n = weighted_pick(
        &[
            (1usize, config.attr_count_weights[0]),
            (2, config.attr_count_weights[1]),
            (3, config.attr_count_weights[2]),
        ],
        rng,
    );
    for _ in 0..100 {
        let mut pool: Vec<(AttributeClass, f64)> = AttributeClass::ALL
            .iter()
            .filter(|c| tax.class_cardinality(**c) > 0)
            .map(|c| {
                let w = config.class_weights.get(c.name()).copied().unwrap_or(1.0);
                (*c, w)
            })
            .collect();
        let mut attrs = Vec::with_capacity(n);
        for _ in 0..n {
            if pool.is_empty() {
                break;
            }
            let class = weighted_pick(&pool, rng);
            pool.retain(|(c, _)| *c != class && !tax.classes_conflict(*c, class));
            let specs = tax.specs_of_class(class);
            let spec = specs[rng.gen_range(0..specs.len())];
            attrs.push(tax.instantiate(&spec.keyword, rng)?);
        }
        if attrs.len() < n {
            continue;
        }
        // intersection of compatible leaves
        let mut candidates: Option<Vec<String>> = None;
        for a in &attrs {
            let leaves = tax.compatible_subjects(tax.spec(&a.keyword)?);
            candidates = Some(match candidates {
                None => leaves,
                Some(prev) => prev.into_iter().filter(|l| leaves.contains(l)).collect(),
            });
        }
        let candidates = candidates.unwrap_or_default();
        if candidates.is_empty() {
            continue;
        }
        let subject = candidates[rng.gen_range(0..candidates.len())].clone();
        let name = &tax.tree.node(&subject)?.name;
        let mut parts: Vec<String> = attrs.iter().map(|a| a.keyword.clone()).collect();
        parts.push(name.clone());
        return Ok(PromptSpec {
            text: parts.join(", "),
            attributes: attrs,
            subject,
            seed: rng.gen(),
        });
    }
    tax.build_prompt(n, rng)
}

/// Enumerate prompts, render every (prompt, seed) pair, write images, masks,
/// and the manifest. Resumable: existing image files are kept.
pub fn generate_corpus(config: &CorpusConfig, tax: &Taxonomy, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let mut records = Vec::new();
    for p_idx in 0..config.num_prompts {
        let mut prng = rng_from(config.seed, &format!("prompt:{p_idx}"));
        let prompt = build_weighted_prompt(tax, config, &mut prng)?;
        let split = if rng_from(config.seed, &format!("split:{p_idx}")).gen::<f64>()
            < config.val_fraction
        {
            Split::Val
        } else {
            Split::Train
        };
        for s_idx in 0..config.seeds_per_prompt {
            let id = format!("p{p_idx:05}_s{s_idx}");
            let seed = derive_seed(config.seed, &format!("render:{p_idx}:{s_idx}"));
            records.push(SampleRecord {
                id: id.clone(),
                subject: prompt.subject.clone(),
                attributes: prompt.attributes.clone(),
                seed,
                split,
                image_path: format!("images/{id}.png"),
            });
        }
    }

    let results: Vec<Result<()>> = records
        .par_iter()
        .map(|rec| {
            let img_file = out_dir.join(&rec.image_path);
            let mask_file = out_dir.join(rec.mask_path());
            if img_file.exists() && mask_file.exists() {
                return Ok(());
            }
            let out = render_record(config, tax, rec)?;
            out.image.save_png(&img_file)?;
            save_mask(&out.mask, &mask_file)?;
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }

    let manifest = Manifest {
        records,
        config: config.clone(),
        root: out_dir.to_path_buf(),
    };
    save_manifest(&manifest)?;
    Ok(manifest)
}

fn save_mask(mask: &ndarray::Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: Vec<u8> = mask
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::L8)?;
    Ok(())
}

pub fn save_manifest(manifest: &Manifest) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(
        manifest.root.join("manifest.jsonl"),
    )?);
    for rec in &manifest.records {
        serde_json::to_writer(&mut f, rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    std::fs::write(
        manifest.root.join("corpus_config.json"),
        serde_json::to_string_pretty(&manifest.config)?,
    )?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let manifest_path = dir.join("manifest.jsonl");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact {
            path: manifest_path.display().to_string(),
            producer: "gen-data".into(),
        });
    }
    let config: CorpusConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.join("corpus_config.json"))?)?;
    let mut records = Vec::new();
    let f = std::io::BufReader::new(std::fs::File::open(&manifest_path)?);
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| {
            Error::other(format!("manifest line {}: {e}", lineno + 1))
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::other(format!("duplicate record id `{}`", rec.id)));
        }
        records.push(rec);
    }
    Ok(Manifest {
        records,
        config,
        root: dir.to_path_buf(),
    })
}

/// Deterministic per-record generator, derived from the corpus seed and id.
pub fn record_rng(config: &CorpusConfig, id: &str) -> Rng {
    rng_seeded(derive_seed(config.seed, id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::Taxonomy;

    fn tiny_config() -> CorpusConfig {
        CorpusConfig {
            num_prompts: 10,
            seeds_per_prompt: 4,
            seed: 77,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn corpus_is_deterministic_and_re_renders_bit_identically() {
        let tax = Taxonomy::load_default().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let manifest = generate_corpus(&config, &tax, dir.path()).unwrap();
        assert_eq!(manifest.records.len(), 40);
        for rec in &manifest.records {
            let disk = manifest.load_image(rec).unwrap();
            let fresh = render_record(&config, &tax, rec).unwrap();
            assert_eq!(disk.quantize(), fresh.image.quantize(), "record {}", rec.id);
        }
        // reload round trip
        let back = load_manifest(dir.path()).unwrap();
        assert_eq!(back.records, manifest.records);
        assert_eq!(back.config, manifest.config);
    }

    #[test]
    fn manifest_rewrite_is_byte_identical() {
        let tax = Taxonomy::load_default().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        generate_corpus(&config, &tax, dir.path()).unwrap();
        let first = std::fs::read(dir.path().join("manifest.jsonl")).unwrap();
        generate_corpus(&config, &tax, dir.path()).unwrap();
        let second = std::fs::read(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn class_counts_follow_sampling_weights() {
        let tax = Taxonomy::load_default().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config();
        config.num_prompts = 600;
        config.seeds_per_prompt = 1;
        let fractions = |manifest: &Manifest| {
            let mut counts: std::collections::BTreeMap<AttributeClass, f64> = Default::default();
            let mut total = 0.0;
            for rec in &manifest.records {
                for a in &rec.attributes {
                    *counts.entry(a.class).or_default() += 1.0;
                    total += 1.0;
                }
            }
            AttributeClass::ALL.map(|c| counts.get(&c).copied().unwrap_or(0.0) / total)
        };
        let uniform = fractions(&generate_corpus(&config, &tax, dir.path()).unwrap());
        // the class-conflict matrix skews marginals, but nothing vanishes
        for (c, f) in AttributeClass::ALL.iter().zip(uniform) {
            assert!(f > 0.05, "class {c} fraction {f}");
        }
        // upweighting one class raises its share
        let dir2 = tempfile::tempdir().unwrap();
        config
            .class_weights
            .insert(AttributeClass::Rhythm.to_string(), 5.0);
        let weighted = fractions(&generate_corpus(&config, &tax, dir2.path()).unwrap());
        let i = AttributeClass::ALL
            .iter()
            .position(|c| *c == AttributeClass::Rhythm)
            .unwrap();
        assert!(
            weighted[i] > 1.5 * uniform[i],
            "rhythm {} vs {}",
            weighted[i],
            uniform[i]
        );
    }
}
