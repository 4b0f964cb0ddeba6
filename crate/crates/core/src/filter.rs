//! Range-sensitive data filtering: walk the subject tree top-down and decide,
//! per attribute keyword, the largest nodes within which the attribute's
//! visual manifestation is consistent. Grids of nine images are sampled under
//! a node, a judge flags the ones that disagree with the grid's modal
//! reading, and the node passes when the mean flagged fraction stays under
//! the threshold. Consistent ranges feed positive-pair sampling for the
//! adapter trainer.

use crate::rng::{rng_from, Rng};
use crate::synth::{measure_attribute, CalibConstants, Manifest, SampleRecord};
use crate::taxonomy::{AttributeInstance, Taxonomy};
use crate::{Error, Image, Result};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

pub const GRID: usize = 9;

/// Flags the grid images that are inconsistent with the grid's dominant
/// attribute reading. Implementations must be pure.
pub trait ConsistencyJudge: Sync {
    fn judge(&self, grid: &[Image], attr: &AttributeInstance) -> BTreeSet<usize>;
}

/// Judge backed by the measurement oracles: each image is labeled
/// independently, the modal label wins (ties toward the lowest label), and
/// everything off-mode or unmeasurable is flagged.
pub struct OracleJudge {
    pub calib: CalibConstants,
}

impl OracleJudge {
    pub fn new(calib: CalibConstants) -> Self {
        Self { calib }
    }
}

impl ConsistencyJudge for OracleJudge {
    fn judge(&self, grid: &[Image], attr: &AttributeInstance) -> BTreeSet<usize> {
        let labels: Vec<Option<usize>> = grid
            .iter()
            .map(|img| measure_attribute(img, attr.class, None, &self.calib).label)
            .collect();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for l in labels.iter().flatten() {
            *counts.entry(*l).or_insert(0) += 1;
        }
        // BTreeMap iterates in ascending label order, so `>` keeps the lowest
        // label on ties
        let mode = counts
            .iter()
            .fold(None, |best: Option<(usize, usize)>, (&l, &c)| match best {
                Some((_, bc)) if c <= bc => best,
                _ => Some((l, c)),
            })
            .map(|(l, _)| l);
        labels
            .iter()
            .enumerate()
            .filter(|(_, l)| !(l.is_some() && **l == mode))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    Consistent,
    Descend,
    Removed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterDecision {
    pub attr_keyword: String,
    pub node: String,
    pub status: FilterStatus,
    pub mean_inconsistent_fraction: f64,
    pub repeats: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub repeats: u32,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            repeats: 5,
            threshold: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReport {
    pub schema_version: u32,
    pub params: FilterParams,
    pub decisions: Vec<FilterDecision>,
    /// Attribute keyword → consistent node ids, maximal (no node listed when
    /// its parent already is).
    pub ranges: BTreeMap<String, Vec<String>>,
    pub removed: Vec<(String, String)>,
}

impl FilterReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.display().to_string(),
                producer: "filter".into(),
            });
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Records that carry `keyword` and whose subject lies under `node`.
fn records_with<'a>(
    tax: &Taxonomy,
    manifest: &'a Manifest,
    keyword: &str,
    node: &str,
) -> Result<Vec<&'a SampleRecord>> {
    let mut out = Vec::new();
    for rec in &manifest.records {
        if !rec.attributes.iter().any(|a| a.keyword == keyword) {
            continue;
        }
        if tax.tree.ancestors(&rec.subject)?.contains(&node.to_string()) {
            out.push(rec);
        }
    }
    Ok(out)
}

/// Draw one 9-image grid, stratifying subjects across the node's leaves:
/// leaves are visited round-robin in shuffled order and records are taken
/// without replacement while any remain.
fn sample_grid<'a>(
    records: &[&'a SampleRecord],
    rng: &mut Rng,
) -> Vec<&'a SampleRecord> {
    let mut by_leaf: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
    for rec in records {
        by_leaf.entry(rec.subject.as_str()).or_default().push(rec);
    }
    let mut leaves: Vec<&str> = by_leaf.keys().copied().collect();
    leaves.shuffle(rng);
    for pool in by_leaf.values_mut() {
        pool.shuffle(rng);
    }
    let mut grid = Vec::with_capacity(GRID);
    while grid.len() < GRID {
        let mut took = false;
        for leaf in &leaves {
            if grid.len() == GRID {
                break;
            }
            if let Some(rec) = by_leaf.get_mut(leaf).unwrap().pop() {
                grid.push(rec);
                took = true;
            }
        }
        if !took {
            // pools exhausted: refill with replacement
            let rec = records[rng.gen_range(0..records.len())];
            grid.push(rec);
        }
    }
    grid
}

/// Validate one (attribute, node) pair: repeated 9-grids, judged, averaged.
pub fn validate_node(
    tax: &Taxonomy,
    manifest: &Manifest,
    judge: &dyn ConsistencyJudge,
    keyword: &str,
    node: &str,
    params: &FilterParams,
) -> Result<FilterDecision> {
    let records = records_with(tax, manifest, keyword, node)?;
    if records.len() < GRID {
        return Ok(FilterDecision {
            attr_keyword: keyword.into(),
            node: node.into(),
            status: FilterStatus::Removed,
            mean_inconsistent_fraction: 1.0,
            repeats: 0,
        });
    }
    let mut rng = rng_from(params.seed, &format!("filter:{keyword}:{node}"));
    let attr = records[0]
        .attributes
        .iter()
        .find(|a| a.keyword == keyword)
        .expect("record was selected for this keyword")
        .clone();
    let mut acc = 0.0f64;
    for _ in 0..params.repeats {
        let grid = sample_grid(&records, &mut rng);
        let images: Vec<Image> = grid
            .iter()
            .map(|rec| manifest.load_image(rec))
            .collect::<Result<_>>()?;
        let flagged = judge.judge(&images, &attr);
        acc += flagged.len() as f64 / GRID as f64;
    }
    let mean = acc / params.repeats as f64;
    let status = if mean < params.threshold {
        FilterStatus::Consistent
    } else {
        FilterStatus::Descend
    };
    Ok(FilterDecision {
        attr_keyword: keyword.into(),
        node: node.into(),
        status,
        mean_inconsistent_fraction: mean,
        repeats: params.repeats,
    })
}

/// Top-down traversal for one attribute keyword: consistent nodes stop the
/// descent (maximality), inner failures descend to children, leaf failures
/// and starved nodes are removed.
pub fn filter_attribute(
    tax: &Taxonomy,
    manifest: &Manifest,
    judge: &dyn ConsistencyJudge,
    keyword: &str,
    params: &FilterParams,
) -> Result<(Vec<FilterDecision>, Vec<String>, Vec<(String, String)>)> {
    let mut decisions = Vec::new();
    let mut range = Vec::new();
    let mut removed = Vec::new();
    let mut stack = vec![tax.tree.root()];
    while let Some(node) = stack.pop() {
        let compatible = tax
            .tree
            .leaves_under(&node)?
            .iter()
            .any(|l| tax.is_compatible(keyword, l).unwrap_or(false));
        if !compatible {
            continue;
        }
        let is_leaf = tax.tree.children(&node)?.is_empty();
        let mut decision = validate_node(tax, manifest, judge, keyword, &node, params)?;
        match decision.status {
            FilterStatus::Consistent => range.push(node.clone()),
            FilterStatus::Removed => removed.push((keyword.to_string(), node.clone())),
            FilterStatus::Descend => {
                if is_leaf {
                    decision.status = FilterStatus::Removed;
                    removed.push((keyword.to_string(), node.clone()));
                } else {
                    for child in tax.tree.children(&node)? {
                        stack.push(child.clone());
                    }
                }
            }
        }
        decisions.push(decision);
    }
    Ok((decisions, range, removed))
}

/// Run the traversal for every attribute keyword in the taxonomy.
pub fn filter_hierarchy(
    tax: &Taxonomy,
    manifest: &Manifest,
    judge: &dyn ConsistencyJudge,
    params: &FilterParams,
) -> Result<FilterReport> {
    let mut decisions = Vec::new();
    let mut ranges = BTreeMap::new();
    let mut removed = Vec::new();
    for class in crate::taxonomy::AttributeClass::ALL {
        for spec in tax.specs_of_class(class) {
            let (d, range, rm) = filter_attribute(tax, manifest, judge, &spec.keyword, params)?;
            decisions.extend(d);
            ranges.insert(spec.keyword.clone(), range);
            removed.extend(rm);
        }
    }
    Ok(FilterReport {
        schema_version: 1,
        params: *params,
        decisions,
        ranges,
        removed,
    })
}

/// Two distinct records carrying `keyword` whose subjects lie under one
/// consistent range node; subjects differ whenever the range offers two.
pub fn sample_positive_pair<'a>(
    tax: &Taxonomy,
    report: &FilterReport,
    manifest: &'a Manifest,
    keyword: &str,
    rng: &mut Rng,
) -> Result<(&'a SampleRecord, &'a SampleRecord)> {
    let nodes = report.ranges.get(keyword).cloned().unwrap_or_default();
    let mut candidates: Vec<Vec<&SampleRecord>> = Vec::new();
    for node in &nodes {
        let recs = records_with(tax, manifest, keyword, node)?;
        if recs.len() >= 2 {
            candidates.push(recs);
        }
    }
    if candidates.is_empty() {
        return Err(Error::StarvedRange(format!(
            "no consistent range with two samples for '{keyword}' (ranges: {nodes:?})"
        )));
    }
    // weight ranges by the number of pairs they offer
    let weights: Vec<usize> = candidates.iter().map(|r| r.len() * (r.len() - 1)).collect();
    let total: usize = weights.iter().sum();
    let mut pick = rng.gen_range(0..total);
    let mut idx = 0;
    for (i, w) in weights.iter().enumerate() {
        if pick < *w {
            idx = i;
            break;
        }
        pick -= w;
    }
    let pool = &candidates[idx];
    let a = pool[rng.gen_range(0..pool.len())];
    let cross_subject: Vec<&&SampleRecord> = pool
        .iter()
        .filter(|r| r.subject != a.subject)
        .collect();
    let b = if cross_subject.is_empty() {
        loop {
            let b = pool[rng.gen_range(0..pool.len())];
            if b.id != a.id {
                break b;
            }
        }
    } else {
        cross_subject[rng.gen_range(0..cross_subject.len())]
    };
    Ok((a, b))
}

/// Ablation baseline: any two distinct records sharing `keyword`, range
/// structure ignored.
pub fn sample_pair_unfiltered<'a>(
    manifest: &'a Manifest,
    keyword: &str,
    rng: &mut Rng,
) -> Result<(&'a SampleRecord, &'a SampleRecord)> {
    let recs: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| r.attributes.iter().any(|a| a.keyword == keyword))
        .collect();
    if recs.len() < 2 {
        return Err(Error::StarvedRange(format!(
            "fewer than two samples carry '{keyword}'"
        )));
    }
    let a = recs[rng.gen_range(0..recs.len())];
    let b = loop {
        let b = recs[rng.gen_range(0..recs.len())];
        if b.id != a.id {
            break b;
        }
    };
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{expected_label, generate_corpus, CorpusConfig, PlantMode, Planted};
    use crate::taxonomy::AttributeClass;
    use std::sync::OnceLock;

    struct Fixture {
        _dir: tempfile::TempDir,
        config: CorpusConfig,
        tax: Taxonomy,
        manifest: Manifest,
        report: FilterReport,
    }

    fn fixture() -> &'static Fixture {
        static FIX: OnceLock<Fixture> = OnceLock::new();
        FIX.get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let tax = Taxonomy::load_default().unwrap();
            let mut config = CorpusConfig {
                num_prompts: 2200,
                seeds_per_prompt: 1,
                seed: 0xF117E5,
                ..serde_json::from_str("{}").unwrap()
            };
            config.class_weights.insert("lighting".into(), 3.0);
            config.class_weights.insert("color".into(), 3.0);
            config.consistency_map = vec![
                Planted {
                    keyword: "ramp_0".into(),
                    node: "curves".into(),
                    mode: PlantMode::PerLeaf,
                },
                Planted {
                    keyword: "hue_red".into(),
                    node: "polygons".into(),
                    mode: PlantMode::PerSeed,
                },
            ];
            let manifest = generate_corpus(&config, &tax, dir.path()).unwrap();
            let judge = OracleJudge::new(CalibConstants::load_default());
            let params = FilterParams::default();
            let report = filter_hierarchy(&tax, &manifest, &judge, &params).unwrap();
            Fixture {
                _dir: dir,
                config,
                tax,
                manifest,
                report,
            }
        })
    }

    /// Independent expectation: a node is inconsistent for a keyword iff its
    /// records split into more than one ground-truth label group.
    fn expected_inconsistent(fx: &Fixture, keyword: &str, node: &str) -> bool {
        let class = fx.tax.spec(keyword).unwrap().class;
        let mut labels = BTreeSet::new();
        for rec in &fx.manifest.records {
            if !rec.attributes.iter().any(|a| a.keyword == keyword) {
                continue;
            }
            if !fx
                .tax
                .tree
                .ancestors(&rec.subject)
                .unwrap()
                .contains(&node.to_string())
            {
                continue;
            }
            labels.insert(expected_label(&fx.config, &fx.tax, rec, class).unwrap());
        }
        labels.len() > 1
    }

    #[test]
    fn planted_recovery_exact() {
        let fx = fixture();
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for d in &fx.report.decisions {
            if d.repeats == 0 {
                continue; // starved, not a consistency judgement
            }
            let flagged = d.status != FilterStatus::Consistent;
            let expect = expected_inconsistent(fx, &d.attr_keyword, &d.node);
            match (flagged, expect) {
                (true, true) => tp += 1,
                (true, false) => {
                    fp += 1;
                    eprintln!("false positive: {} at {}", d.attr_keyword, d.node);
                }
                (false, true) => {
                    fn_ += 1;
                    eprintln!("false negative: {} at {}", d.attr_keyword, d.node);
                }
                _ => {}
            }
        }
        assert!(tp > 0, "planted inconsistencies were never visited");
        assert_eq!((fp, fn_), (0, 0), "precision/recall below 1.0");
    }

    #[test]
    fn planted_nodes_heavily_flagged() {
        let fx = fixture();
        for (kw, node) in [("ramp_0", "curves"), ("hue_red", "polygons")] {
            let d = fx
                .report
                .decisions
                .iter()
                .find(|d| d.attr_keyword == kw && d.node == node)
                .expect("planted node visited");
            assert!(
                d.mean_inconsistent_fraction >= 0.2,
                "{kw}@{node}: {}",
                d.mean_inconsistent_fraction
            );
        }
    }

    #[test]
    fn ranges_are_maximal() {
        let fx = fixture();
        for (kw, nodes) in &fx.report.ranges {
            for node in nodes {
                for anc in fx.tax.tree.ancestors(node).unwrap() {
                    if &anc != node {
                        assert!(
                            !nodes.contains(&anc),
                            "{kw}: {node} listed under consistent ancestor {anc}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn consistent_children_stay_consistent() {
        let fx = fixture();
        let judge = OracleJudge::new(CalibConstants::load_default());
        // an unplanted keyword consistent at the root: every child must also
        // validate as consistent on the same corpus
        let kw = "stripes_0";
        assert!(fx.report.ranges[kw].contains(&fx.tax.tree.root()));
        for major in fx.tax.tree.majors() {
            let d = validate_node(
                &fx.tax,
                &fx.manifest,
                &judge,
                kw,
                major,
                &FilterParams::default(),
            )
            .unwrap();
            assert_eq!(d.status, FilterStatus::Consistent, "{kw}@{major}");
        }
    }

    #[test]
    fn report_is_deterministic_and_round_trips() {
        let fx = fixture();
        let judge = OracleJudge::new(CalibConstants::load_default());
        let again =
            filter_hierarchy(&fx.tax, &fx.manifest, &judge, &FilterParams::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&again).unwrap(),
            serde_json::to_string(&fx.report).unwrap()
        );
        let path = fx._dir.path().join("filter_report.json");
        fx.report.save(&path).unwrap();
        let loaded = FilterReport::load(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&loaded).unwrap(),
            serde_json::to_string(&fx.report).unwrap()
        );
    }

    #[test]
    fn positive_pairs_stay_within_ranges() {
        let fx = fixture();
        let mut rng = rng_from(7, "pair-test");
        for _ in 0..10_000 {
            let (a, b) = sample_positive_pair(&fx.tax, &fx.report, &fx.manifest, "hue_red", &mut rng)
                .unwrap();
            assert_ne!(a.id, b.id);
            assert!(a.attributes.iter().any(|x| x.keyword == "hue_red"));
            assert!(b.attributes.iter().any(|x| x.keyword == "hue_red"));
            let within = fx.report.ranges["hue_red"].iter().any(|node| {
                fx.tax.tree.ancestors(&a.subject).unwrap().contains(node)
                    && fx.tax.tree.ancestors(&b.subject).unwrap().contains(node)
            });
            assert!(within, "pair ({}, {}) crosses ranges", a.id, b.id);
        }
    }

    #[test]
    fn filtering_raises_pair_label_agreement() {
        let fx = fixture();
        let agreement = |pairs: &[(&SampleRecord, &SampleRecord)]| {
            let same = pairs
                .iter()
                .filter(|(a, b)| {
                    expected_label(&fx.config, &fx.tax, a, AttributeClass::Color).unwrap()
                        == expected_label(&fx.config, &fx.tax, b, AttributeClass::Color).unwrap()
                })
                .count();
            same as f64 / pairs.len() as f64
        };
        let mut rng = rng_from(11, "agreement-test");
        let filtered: Vec<_> = (0..2000)
            .map(|_| {
                sample_positive_pair(&fx.tax, &fx.report, &fx.manifest, "hue_red", &mut rng)
                    .unwrap()
            })
            .collect();
        let unfiltered: Vec<_> = (0..2000)
            .map(|_| sample_pair_unfiltered(&fx.manifest, "hue_red", &mut rng).unwrap())
            .collect();
        let af = agreement(&filtered);
        let au = agreement(&unfiltered);
        assert!(af >= 0.97, "filtered agreement {af}");
        assert!(au < 0.9, "unfiltered agreement {au}");
    }

    #[test]
    fn starved_keyword_is_an_explicit_error() {
        let fx = fixture();
        let empty = FilterReport {
            schema_version: 1,
            params: FilterParams::default(),
            decisions: vec![],
            ranges: BTreeMap::new(),
            removed: vec![],
        };
        let mut rng = rng_from(3, "starved-test");
        let err = sample_positive_pair(&fx.tax, &empty, &fx.manifest, "hue_red", &mut rng);
        assert!(matches!(err, Err(Error::StarvedRange(_))));
    }

    #[test]
    fn unanimous_grid_flags_nothing_odd_one_flagged() {
        let fx = fixture();
        let judge = OracleJudge::new(CalibConstants::load_default());
        // nine renders of the same hue → empty set
        let tax = &fx.tax;
        let mut rng = rng_from(1, "judge-test");
        let attr = tax.instantiate("hue_red", &mut rng).unwrap();
        let mut grid = Vec::new();
        for _ in 0..9 {
            let base =
                crate::synth::render::render_subject(tax, "circle", 32, &mut rng).unwrap();
            let out = crate::synth::apply_attribute(tax, &base, "circle", &attr).unwrap();
            grid.push(out.image);
        }
        assert!(judge.judge(&grid, &attr).is_empty());
        // swap one for a different hue → exactly that index flagged
        let odd = tax.instantiate("hue_blue", &mut rng).unwrap();
        let base = crate::synth::render::render_subject(tax, "circle", 32, &mut rng).unwrap();
        grid[4] = crate::synth::apply_attribute(tax, &base, "circle", &odd)
            .unwrap()
            .image;
        let flagged = judge.judge(&grid, &attr);
        assert_eq!(flagged, BTreeSet::from([4]));
    }
}
