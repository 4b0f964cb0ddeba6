//! Attribute taxonomy, subject tree, compatibility, tag synonyms, and
//! prompt construction.
//!
//! The taxonomy ships as a versioned TOML file (see
//! `assets/default_taxonomy.toml`). Everything here is immutable after
//! load and safe for concurrent reads; randomized operations take an
//! explicit generator.

use crate::rng::Rng;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;
pub const ROOT_ID: &str = "set";

/// The seven attribute classes. Serialized names are stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeClass {
    Color,
    Stroke,
    Lighting,
    Dynamics,
    FocusDof,
    Rhythm,
    Design,
}

impl AttributeClass {
    pub const ALL: [AttributeClass; 7] = [
        AttributeClass::Color,
        AttributeClass::Stroke,
        AttributeClass::Lighting,
        AttributeClass::Dynamics,
        AttributeClass::FocusDof,
        AttributeClass::Rhythm,
        AttributeClass::Design,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttributeClass::Color => "color",
            AttributeClass::Stroke => "stroke",
            AttributeClass::Lighting => "lighting",
            AttributeClass::Dynamics => "dynamics",
            AttributeClass::FocusDof => "focus_dof",
            AttributeClass::Rhythm => "rhythm",
            AttributeClass::Design => "design",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == s)
    }
}

impl fmt::Display for AttributeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameter range in a keyword's schema: either pinned or a discrete choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamRange {
    Fixed { fixed: f64 },
    Choice { choice: Vec<f64> },
}

impl ParamRange {
    pub fn contains(&self, v: f64) -> bool {
        match self {
            ParamRange::Fixed { fixed } => (v - fixed).abs() < 1e-9,
            ParamRange::Choice { choice } => choice.iter().any(|c| (v - c).abs() < 1e-9),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            ParamRange::Fixed { fixed } => *fixed,
            ParamRange::Choice { choice } => *choice.choose(rng).expect("non-empty choice"),
        }
    }

    pub fn default_value(&self) -> f64 {
        match self {
            ParamRange::Fixed { fixed } => *fixed,
            ParamRange::Choice { choice } => choice[0],
        }
    }
}

/// One canonical sub-attribute (keyword) of a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub class: AttributeClass,
    pub keyword: String,
    /// Discrete label index of this keyword within its class.
    #[serde(default)]
    pub label: usize,
    /// Augmented instruction tags; always includes the keyword itself.
    pub synonyms: Vec<String>,
    pub param_schema: BTreeMap<String, ParamRange>,
    /// Subject-tree node ids this keyword may be applied under.
    pub compatible_nodes: Vec<String>,
}

/// Procedural shape families the renderer knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Triangle,
    Square,
    Pentagon,
    Hexagon,
    Circle,
    Ellipse,
    Crescent,
    Ring,
    Star,
    Cross,
    Diamond,
    Arrow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectNode {
    pub id: String,
    pub name: String,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub renderable: bool,
    pub shape: Option<ShapeKind>,
}

/// Three-level hierarchy: root `set` → major-subjects → leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTree {
    nodes: HashMap<String, SubjectNode>,
    /// Leaf ids in file order (deterministic iteration).
    leaf_order: Vec<String>,
    major_order: Vec<String>,
}

impl SubjectTree {
    pub fn node(&self, id: &str) -> Result<&SubjectNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::UnknownSubject(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn leaves(&self) -> &[String] {
        &self.leaf_order
    }

    pub fn root(&self) -> String {
        self.nodes
            .values()
            .find(|n| n.parent.is_none())
            .map(|n| n.id.clone())
            .expect("validated tree has a root")
    }

    pub fn majors(&self) -> &[String] {
        &self.major_order
    }

    /// Leaf ids under `node` in deterministic (file) order. For a leaf,
    /// returns the leaf itself.
    pub fn leaves_under(&self, node: &str) -> Result<Vec<String>> {
        let n = self.node(node)?;
        if n.renderable {
            return Ok(vec![n.id.clone()]);
        }
        let mut out = Vec::new();
        for leaf in &self.leaf_order {
            if self.ancestors(leaf)?.contains(&node.to_string()) {
                out.push(leaf.clone());
            }
        }
        Ok(out)
    }

    /// Ancestor chain of a node, self included, leaf→root order.
    pub fn ancestors(&self, id: &str) -> Result<Vec<String>> {
        let mut chain = Vec::new();
        let mut cur = id.to_string();
        loop {
            let n = self.node(&cur)?;
            chain.push(cur.clone());
            match &n.parent {
                Some(p) => cur = p.clone(),
                None => break,
            }
        }
        Ok(chain)
    }

    /// Major-subject ancestor of a leaf.
    pub fn major_of(&self, leaf: &str) -> Result<String> {
        let chain = self.ancestors(leaf)?;
        chain
            .iter()
            .find(|id| self.major_order.contains(id))
            .cloned()
            .ok_or_else(|| Error::Taxonomy(format!("node `{leaf}` has no major ancestor")))
    }

    /// Direct children in deterministic order.
    pub fn children(&self, id: &str) -> Result<&[String]> {
        Ok(&self.node(id)?.children)
    }
}

/// One concrete attribute: keyword plus a parameter assignment drawn from
/// its schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeInstance {
    pub class: AttributeClass,
    pub keyword: String,
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub attributes: Vec<AttributeInstance>,
    pub subject: String,
    pub text: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    pub specs: Vec<AttributeSpec>,
    pub tree: SubjectTree,
    /// Unordered class pairs whose visual manifestations are mutually
    /// destructive (e.g. blur erases stripes); prompts never combine them.
    pub class_conflicts: Vec<(AttributeClass, AttributeClass)>,
    by_keyword: HashMap<String, usize>,
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFile {
    schema_version: u32,
    #[serde(default)]
    class_conflicts: Vec<[String; 2]>,
    classes: Vec<ClassFile>,
    tree: TreeFile,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassFile {
    name: String,
    keywords: Vec<KeywordFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeywordFile {
    keyword: String,
    synonyms: Vec<String>,
    #[serde(default)]
    params: BTreeMap<String, ParamRange>,
    compatible_nodes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeFile {
    root: String,
    majors: Vec<MajorFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MajorFile {
    id: String,
    #[serde(default)]
    name: Option<String>,
    leaves: Vec<LeafFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LeafFile {
    id: String,
    #[serde(default)]
    name: Option<String>,
    shape: ShapeKind,
}

pub const DEFAULT_TAXONOMY_TOML: &str = include_str!("../assets/default_taxonomy.toml");

impl Taxonomy {
    pub fn load_default() -> Result<Taxonomy> {
        Taxonomy::from_toml(DEFAULT_TAXONOMY_TOML)
    }

    pub fn load(path: &Path) -> Result<Taxonomy> {
        let text = std::fs::read_to_string(path)?;
        Taxonomy::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Taxonomy> {
        let file: TaxonomyFile = toml::from_str(text)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::Taxonomy(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        let tree = build_tree(&file.tree)?;
        let mut specs = Vec::new();
        let mut seen_kw: HashSet<String> = HashSet::new();
        for class in &file.classes {
            let class_id = AttributeClass::from_name(&class.name).ok_or_else(|| {
                Error::Taxonomy(format!("unknown attribute class `{}`", class.name))
            })?;
            for (label, kw) in class.keywords.iter().enumerate() {
                if !seen_kw.insert(kw.keyword.clone()) {
                    return Err(Error::Taxonomy(format!(
                        "duplicate keyword `{}`",
                        kw.keyword
                    )));
                }
                if kw.synonyms.is_empty() || !kw.synonyms.contains(&kw.keyword) {
                    return Err(Error::Taxonomy(format!(
                        "keyword `{}`: synonyms must be non-empty and include the keyword",
                        kw.keyword
                    )));
                }
                for node in &kw.compatible_nodes {
                    if !tree.contains(node) {
                        return Err(Error::Taxonomy(format!(
                            "keyword `{}` references unknown node id `{node}`",
                            kw.keyword
                        )));
                    }
                }
                specs.push(AttributeSpec {
                    class: class_id,
                    keyword: kw.keyword.clone(),
                    label,
                    synonyms: kw.synonyms.clone(),
                    param_schema: kw.params.clone(),
                    compatible_nodes: kw.compatible_nodes.clone(),
                });
            }
        }
        let mut class_conflicts = Vec::new();
        for pair in &file.class_conflicts {
            let a = AttributeClass::from_name(&pair[0])
                .ok_or_else(|| Error::Taxonomy(format!("unknown class `{}` in conflicts", pair[0])))?;
            let b = AttributeClass::from_name(&pair[1])
                .ok_or_else(|| Error::Taxonomy(format!("unknown class `{}` in conflicts", pair[1])))?;
            if a == b {
                return Err(Error::Taxonomy(format!(
                    "class `{}` conflicts with itself",
                    pair[0]
                )));
            }
            class_conflicts.push((a, b));
        }
        let by_keyword = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.keyword.clone(), i))
            .collect();
        Ok(Taxonomy {
            specs,
            tree,
            class_conflicts,
            by_keyword,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut classes: Vec<ClassFile> = Vec::new();
        for c in AttributeClass::ALL {
            let keywords: Vec<KeywordFile> = self
                .specs
                .iter()
                .filter(|s| s.class == c)
                .map(|s| KeywordFile {
                    keyword: s.keyword.clone(),
                    synonyms: s.synonyms.clone(),
                    params: s.param_schema.clone(),
                    compatible_nodes: s.compatible_nodes.clone(),
                })
                .collect();
            if !keywords.is_empty() {
                classes.push(ClassFile {
                    name: c.name().to_string(),
                    keywords,
                });
            }
        }
        let majors = self
            .tree
            .majors()
            .iter()
            .map(|m| {
                let node = self.tree.node(m).unwrap();
                MajorFile {
                    id: m.clone(),
                    name: Some(node.name.clone()),
                    leaves: node
                        .children
                        .iter()
                        .map(|l| {
                            let leaf = self.tree.node(l).unwrap();
                            LeafFile {
                                id: l.clone(),
                                name: Some(leaf.name.clone()),
                                shape: leaf.shape.unwrap(),
                            }
                        })
                        .collect(),
                }
            })
            .collect();
        let file = TaxonomyFile {
            schema_version: SCHEMA_VERSION,
            class_conflicts: self
                .class_conflicts
                .iter()
                .map(|(a, b)| [a.name().to_string(), b.name().to_string()])
                .collect(),
            classes,
            tree: TreeFile {
                root: ROOT_ID.to_string(),
                majors,
            },
        };
        Ok(toml::to_string_pretty(&file)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn spec(&self, keyword: &str) -> Result<&AttributeSpec> {
        self.by_keyword
            .get(keyword)
            .map(|&i| &self.specs[i])
            .ok_or_else(|| Error::Taxonomy(format!("unknown keyword `{keyword}`")))
    }

    pub fn specs_of_class(&self, class: AttributeClass) -> Vec<&AttributeSpec> {
        self.specs.iter().filter(|s| s.class == class).collect()
    }

    pub fn class_cardinality(&self, class: AttributeClass) -> usize {
        self.specs_of_class(class).len()
    }

    /// All leaves whose ancestor chain intersects `attr.compatible_nodes`,
    /// in deterministic tree order.
    pub fn compatible_subjects(&self, attr: &AttributeSpec) -> Vec<String> {
        let mut out = Vec::new();
        for leaf in self.tree.leaves() {
            let chain = self.tree.ancestors(leaf).expect("valid tree");
            if chain.iter().any(|a| attr.compatible_nodes.contains(a)) {
                out.push(leaf.clone());
            }
        }
        out
    }

    pub fn classes_conflict(&self, a: AttributeClass, b: AttributeClass) -> bool {
        self.class_conflicts
            .iter()
            .any(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b))
    }

    pub fn is_compatible(&self, keyword: &str, subject: &str) -> Result<bool> {
        let spec = self.spec(keyword)?;
        let chain = self.tree.ancestors(subject)?;
        Ok(chain.iter().any(|a| spec.compatible_nodes.contains(a)))
    }

    pub fn instantiate(&self, keyword: &str, rng: &mut Rng) -> Result<AttributeInstance> {
        let spec = self.spec(keyword)?;
        let params = spec
            .param_schema
            .iter()
            .map(|(k, r)| (k.clone(), r.sample(rng)))
            .collect();
        Ok(AttributeInstance {
            class: spec.class,
            keyword: spec.keyword.clone(),
            params,
        })
    }

    /// Validate a full prompt against the taxonomy invariants.
    pub fn validate_prompt(&self, p: &PromptSpec) -> Result<()> {
        if p.attributes.is_empty() || p.attributes.len() > 3 {
            return Err(Error::Contract(format!(
                "prompt must carry 1..3 attributes, got {}",
                p.attributes.len()
            )));
        }
        let mut classes = HashSet::new();
        for a in &p.attributes {
            for &prev in &classes {
                if self.classes_conflict(a.class, prev) {
                    return Err(Error::Contract(format!(
                        "conflicting attribute classes `{}` and `{prev}` in prompt",
                        a.class
                    )));
                }
            }
            if !classes.insert(a.class) {
                return Err(Error::Contract(format!(
                    "duplicate attribute class `{}` in prompt",
                    a.class
                )));
            }
            let spec = self.spec(&a.keyword)?;
            for (name, range) in &spec.param_schema {
                let v = a
                    .params
                    .get(name)
                    .ok_or_else(|| Error::Contract(format!("missing param `{name}`")))?;
                if !range.contains(*v) {
                    return Err(Error::Contract(format!(
                        "param `{name}`={v} outside schema for `{}`",
                        a.keyword
                    )));
                }
            }
            if !self.is_compatible(&a.keyword, &p.subject)? {
                return Err(Error::Incompatible {
                    keyword: a.keyword.clone(),
                    subject: p.subject.clone(),
                });
            }
        }
        let leaf = self.tree.node(&p.subject)?;
        if !leaf.renderable {
            return Err(Error::Contract(format!(
                "prompt subject `{}` is not a leaf",
                p.subject
            )));
        }
        Ok(())
    }

    /// Draw a prompt with `n` attributes of pairwise distinct classes and a
    /// subject compatible with all of them. Bounded rejection sampling with
    /// an exhaustive fallback.
    pub fn build_prompt(&self, n: usize, rng: &mut Rng) -> Result<PromptSpec> {
        if !(1..=3).contains(&n) {
            return Err(Error::Contract(format!("n must be in 1..3, got {n}")));
        }
        for _ in 0..100 {
            let mut classes: Vec<AttributeClass> = AttributeClass::ALL.to_vec();
            classes.shuffle(rng);
            let mut picked: Vec<AttributeClass> = Vec::with_capacity(n);
            for c in classes {
                if picked.len() == n {
                    break;
                }
                if self.class_cardinality(c) > 0
                    && !picked.iter().any(|&p| self.classes_conflict(c, p))
                {
                    picked.push(c);
                }
            }
            if picked.len() < n {
                break;
            }
            let mut attrs = Vec::with_capacity(n);
            for c in &picked {
                let specs = self.specs_of_class(*c);
                let spec = specs[rng.gen_range(0..specs.len())];
                attrs.push(self.instantiate(&spec.keyword, rng)?);
            }
            if let Some(subject) = self.pick_subject(&attrs, rng)? {
                return Ok(self.finish_prompt(attrs, subject, rng));
            }
        }
        // Exhaustive fallback over class combinations and keywords.
        let classes: Vec<AttributeClass> = AttributeClass::ALL
            .into_iter()
            .filter(|c| self.class_cardinality(*c) > 0)
            .collect();
        for combo in combinations(&classes, n) {
            if combo
                .iter()
                .enumerate()
                .any(|(i, &a)| combo[..i].iter().any(|&b| self.classes_conflict(a, b)))
            {
                continue;
            }
            let keyword_sets: Vec<Vec<&AttributeSpec>> =
                combo.iter().map(|c| self.specs_of_class(*c)).collect();
            for pick in cartesian(&keyword_sets) {
                let mut attrs = Vec::with_capacity(n);
                for spec in &pick {
                    attrs.push(self.instantiate(&spec.keyword, rng)?);
                }
                if let Some(subject) = self.pick_subject(&attrs, rng)? {
                    return Ok(self.finish_prompt(attrs, subject, rng));
                }
            }
        }
        Err(Error::Unsatisfiable(format!(
            "no subject is compatible with any {n}-attribute combination"
        )))
    }

    fn pick_subject(&self, attrs: &[AttributeInstance], rng: &mut Rng) -> Result<Option<String>> {
        let mut candidates: Option<Vec<String>> = None;
        for a in attrs {
            let spec = self.spec(&a.keyword)?;
            let leaves = self.compatible_subjects(spec);
            candidates = Some(match candidates {
                None => leaves,
                Some(prev) => prev.into_iter().filter(|l| leaves.contains(l)).collect(),
            });
        }
        let candidates = candidates.unwrap_or_default();
        if candidates.is_empty() {
            return Ok(None);
        }
        Ok(Some(candidates[rng.gen_range(0..candidates.len())].clone()))
    }

    fn finish_prompt(
        &self,
        attributes: Vec<AttributeInstance>,
        subject: String,
        rng: &mut Rng,
    ) -> PromptSpec {
        let name = &self.tree.node(&subject).unwrap().name;
        let mut parts: Vec<String> = attributes.iter().map(|a| a.keyword.clone()).collect();
        parts.push(name.clone());
        PromptSpec {
            attributes,
            subject,
            text: parts.join(", "),
            seed: rng.gen(),
        }
    }

    /// One instruction tag for the attribute, uniform over its synonym list.
    pub fn augment_tag(&self, attr: &AttributeInstance, rng: &mut Rng) -> Result<String> {
        let spec = self.spec(&attr.keyword)?;
        Ok(spec.synonyms[rng.gen_range(0..spec.synonyms.len())].clone())
    }

    /// Canonical class-level tag, present in every keyword's synonym list.
    pub fn canonical_tag(&self, class: AttributeClass) -> String {
        class.name().to_string()
    }

    /// Every string the text encoder must know: subject names, keywords,
    /// and the full synonym closure. Deterministic order.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        let push = |w: &str, words: &mut Vec<String>| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for leaf in self.tree.leaves() {
            push(&self.tree.node(leaf).unwrap().name, &mut words);
        }
        for spec in &self.specs {
            push(&spec.keyword, &mut words);
            for s in &spec.synonyms {
                push(s, &mut words);
            }
        }
        words
    }
}

fn build_tree(file: &TreeFile) -> Result<SubjectTree> {
    if file.root != ROOT_ID {
        return Err(Error::Taxonomy(format!(
            "tree root must be `{ROOT_ID}`, got `{}`",
            file.root
        )));
    }
    let mut nodes = HashMap::new();
    let mut leaf_order = Vec::new();
    let mut major_order = Vec::new();
    let mut root = SubjectNode {
        id: ROOT_ID.to_string(),
        name: ROOT_ID.to_string(),
        parent: None,
        children: Vec::new(),
        renderable: false,
        shape: None,
    };
    for major in &file.majors {
        if major.leaves.is_empty() {
            return Err(Error::Taxonomy(format!(
                "major `{}` has no leaves (depth must be exactly 3)",
                major.id
            )));
        }
        let mut mnode = SubjectNode {
            id: major.id.clone(),
            name: major.name.clone().unwrap_or_else(|| major.id.clone()),
            parent: Some(ROOT_ID.to_string()),
            children: Vec::new(),
            renderable: false,
            shape: None,
        };
        for leaf in &major.leaves {
            let lnode = SubjectNode {
                id: leaf.id.clone(),
                name: leaf.name.clone().unwrap_or_else(|| leaf.id.clone()),
                parent: Some(major.id.clone()),
                children: Vec::new(),
                renderable: true,
                shape: Some(leaf.shape),
            };
            if nodes.insert(leaf.id.clone(), lnode).is_some() {
                return Err(Error::Taxonomy(format!("duplicate node id `{}`", leaf.id)));
            }
            mnode.children.push(leaf.id.clone());
            leaf_order.push(leaf.id.clone());
        }
        root.children.push(major.id.clone());
        major_order.push(major.id.clone());
        if nodes.insert(major.id.clone(), mnode).is_some() {
            return Err(Error::Taxonomy(format!("duplicate node id `{}`", major.id)));
        }
    }
    if nodes.insert(ROOT_ID.to_string(), root).is_some() {
        return Err(Error::Taxonomy("duplicate root id".into()));
    }
    Ok(SubjectTree {
        nodes,
        leaf_order,
        major_order,
    })
}

fn combinations<T: Clone>(items: &[T], n: usize) -> Vec<Vec<T>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (i, it) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], n - 1) {
            rest.insert(0, it.clone());
            out.push(rest);
        }
    }
    out
}

fn cartesian<'a, T>(sets: &[Vec<&'a T>]) -> Vec<Vec<&'a T>> {
    let mut out: Vec<Vec<&T>> = vec![vec![]];
    for set in sets {
        let mut next = Vec::new();
        for prefix in &out {
            for item in set {
                let mut p = prefix.clone();
                p.push(*item);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_seeded;

    #[test]
    fn default_taxonomy_loads_and_is_well_formed() {
        let tax = Taxonomy::load_default().unwrap();
        for c in AttributeClass::ALL {
            assert!(
                tax.class_cardinality(c) >= 3,
                "class {c} has fewer than 3 keywords"
            );
        }
        assert!(tax.tree.majors().len() >= 2);
        for m in tax.tree.majors() {
            assert!(tax.tree.children(m).unwrap().len() >= 3);
        }
        // parent/child links are mutually consistent
        for leaf in tax.tree.leaves() {
            let n = tax.tree.node(leaf).unwrap();
            assert!(n.renderable);
            let parent = tax.tree.node(n.parent.as_ref().unwrap()).unwrap();
            assert!(parent.children.contains(&n.id));
            assert_eq!(tax.tree.ancestors(leaf).unwrap().last().unwrap(), ROOT_ID);
        }
    }

    #[test]
    fn unknown_node_reference_is_rejected_by_name() {
        let bad = DEFAULT_TAXONOMY_TOML.replace(
            "compatible_nodes = [\"set\"]",
            "compatible_nodes = [\"no_such_node\"]",
        );
        let err = Taxonomy::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("no_such_node"), "{err}");
    }

    #[test]
    fn duplicate_keyword_is_rejected() {
        let dup = DEFAULT_TAXONOMY_TOML.replace(
            "keyword = \"hue_yellow\"",
            "keyword = \"hue_red\"",
        );
        let err = Taxonomy::from_toml(&dup).unwrap_err();
        assert!(err.to_string().contains("duplicate keyword"), "{err}");
    }

    #[test]
    fn compatible_subjects_definitions() {
        let tax = Taxonomy::load_default().unwrap();
        // compatible with root -> all leaves
        let color = tax.spec("hue_red").unwrap();
        assert_eq!(tax.compatible_subjects(color), tax.tree.leaves().to_vec());
        // restricted attribute -> exactly the leaves under its nodes
        let dyn_spec = tax.spec("motion_0").unwrap();
        let got = tax.compatible_subjects(dyn_spec);
        let mut want = Vec::new();
        for node in &dyn_spec.compatible_nodes {
            want.extend(tax.tree.leaves_under(node).unwrap());
        }
        for leaf in &got {
            assert!(want.contains(leaf));
        }
        assert_eq!(got.len(), want.len());
        // empty compatibility -> empty list
        let mut orphan = color.clone();
        orphan.compatible_nodes.clear();
        assert!(tax.compatible_subjects(&orphan).is_empty());
    }

    #[test]
    fn build_prompt_is_deterministic_per_seed() {
        let tax = Taxonomy::load_default().unwrap();
        let a = tax.build_prompt(2, &mut rng_seeded(11)).unwrap();
        let b = tax.build_prompt(2, &mut rng_seeded(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prompts_always_pass_independent_compatibility_recheck() {
        // brute-force oracle: re-run the compatibility predicate over draws
        let tax = Taxonomy::load_default().unwrap();
        let mut rng = rng_seeded(42);
        for i in 0..10_000 {
            let n = 1 + (i % 3);
            let p = tax.build_prompt(n, &mut rng).unwrap();
            tax.validate_prompt(&p).unwrap();
            for a in &p.attributes {
                let spec = tax.spec(&a.keyword).unwrap();
                assert!(tax.compatible_subjects(spec).contains(&p.subject));
            }
        }
    }

    #[test]
    fn augment_tag_is_uniform_over_synonyms() {
        let tax = Taxonomy::load_default().unwrap();
        let mut rng = rng_seeded(3);
        let attr = tax.instantiate("hue_red", &mut rng).unwrap();
        let spec = tax.spec("hue_red").unwrap();
        let k = spec.synonyms.len() as f64;
        let mut counts: HashMap<String, usize> = HashMap::new();
        let draws = 30_000;
        for _ in 0..draws {
            *counts
                .entry(tax.augment_tag(&attr, &mut rng).unwrap())
                .or_default() += 1;
        }
        // binomial 6-sigma band around 1/k
        let p = 1.0 / k;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for s in &spec.synonyms {
            let f = *counts.get(s).unwrap_or(&0) as f64 / draws as f64;
            assert!(
                (f - p).abs() < 6.0 * sigma,
                "tag `{s}` frequency {f} outside 6-sigma of {p}"
            );
        }
    }

    #[test]
    fn serialization_round_trip_is_structurally_identical() {
        let tax = Taxonomy::load_default().unwrap();
        let text = tax.to_toml().unwrap();
        let back = Taxonomy::from_toml(&text).unwrap();
        assert_eq!(tax, back);
    }

    #[test]
    fn singleton_synonym_tag() {
        let tax = Taxonomy::load_default().unwrap();
        let mut spec = tax.spec("hue_red").unwrap().clone();
        spec.synonyms = vec!["hue_red".to_string()];
        // a singleton list always yields the keyword
        let mut t = tax.clone();
        let idx = t.by_keyword["hue_red"];
        t.specs[idx] = spec;
        let mut rng = rng_seeded(0);
        let attr = t.instantiate("hue_red", &mut rng).unwrap();
        assert_eq!(t.augment_tag(&attr, &mut rng).unwrap(), "hue_red");
    }
}
