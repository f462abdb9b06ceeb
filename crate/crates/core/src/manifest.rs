//! Video records, class tables and class-balanced base sampling.
//!
//! A manifest is a line-delimited record file with an optional class-table
//! sidecar (`<stem>.classes.jsonl`) and provenance sidecar
//! (`<stem>.provenance.json`).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Default cosine threshold for merging label phrases into one class.
pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    pub source: String,
    pub split: Split,
    pub label_text: String,
    pub label_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_path: Option<String>,
    pub fps_native: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub label_id: u32,
    pub canonical_text: String,
    pub member_texts: Vec<String>,
    pub semantic_vector: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTable {
    pub entries: Vec<ClassEntry>,
}

impl ClassTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label_id: u32) -> Option<&ClassEntry> {
        self.entries.iter().find(|e| e.label_id == label_id)
    }

    /// Label id of the class that lists `text` among its members.
    pub fn resolve(&self, text: &str) -> Option<u32> {
        self.entries
            .iter()
            .find(|e| e.member_texts.iter().any(|m| m == text))
            .map(|e| e.label_id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut owner: HashMap<&str, u32> = HashMap::new();
        for (pos, e) in self.entries.iter().enumerate() {
            if e.label_id as usize != pos {
                return Err(Error::invalid(format!(
                    "class table label ids must be dense and ordered; entry {pos} has id {}",
                    e.label_id
                )));
            }
            if !e.member_texts.contains(&e.canonical_text) {
                return Err(Error::invalid(format!(
                    "class {}: canonical text {:?} is not a member",
                    e.label_id, e.canonical_text
                )));
            }
            for m in &e.member_texts {
                if let Some(&other) = owner.get(m.as_str()) {
                    if other != e.label_id {
                        return Err(Error::invalid(format!(
                            "member text {m:?} appears in classes {other} and {}",
                            e.label_id
                        )));
                    }
                }
                owner.insert(m, e.label_id);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub source_manifests: Vec<String>,
    #[serde(default)]
    pub parameters: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl Provenance {
    pub fn new() -> Self {
        Provenance {
            tool_version: TOOL_VERSION.to_string(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<VideoRecord>,
    pub classes: ClassTable,
    pub provenance: Provenance,
}

impl Manifest {
    /// Checks id uniqueness and that every label id resolves in the class table.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if let Some(first) = seen.insert(&r.id, i + 1) {
                return Err(Error::DuplicateId {
                    id: r.id.clone(),
                    first,
                    second: i + 1,
                });
            }
            if self.classes.get(r.label_id).is_none() {
                return Err(Error::invalid(format!(
                    "record {:?}: label_id {} does not resolve in the class table",
                    r.id, r.label_id
                )));
            }
        }
        self.classes.validate()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    /// Keeps only the records whose id is in `ids`, in manifest order.
    pub fn subset(&self, ids: &[String]) -> Manifest {
        let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| wanted.contains(r.id.as_str()))
                .cloned()
                .collect(),
            classes: self.classes.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

pub fn classes_sidecar(path: &Path) -> PathBuf {
    sidecar(path, "classes.jsonl")
}

pub fn provenance_sidecar(path: &Path) -> PathBuf {
    sidecar(path, "provenance.json")
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Loads a manifest and, when present, its class-table and provenance sidecars.
///
/// Without a class sidecar the table is derived from the records: one entry per
/// distinct label id, members taken from the label texts, no semantic vector.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let classes_path = classes_sidecar(path);
    let classes = classes_path
        .exists()
        .then(|| load_class_table(&classes_path))
        .transpose()?;
    load_manifest_with(path, classes)
}

pub fn load_manifest_with(path: &Path, classes: Option<ClassTable>) -> Result<Manifest> {
    let rows: Vec<(usize, VideoRecord)> = jsonl::read(path)?;
    let mut first_line: HashMap<String, usize> = HashMap::new();
    for (line, r) in &rows {
        if let Some(&first) = first_line.get(&r.id) {
            return Err(Error::DuplicateId {
                id: r.id.clone(),
                first,
                second: *line,
            });
        }
        first_line.insert(r.id.clone(), *line);
        if !(r.fps_native >= 0.0) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                message: format!("fps_native must be >= 0, got {}", r.fps_native),
            });
        }
    }
    let records: Vec<VideoRecord> = rows.into_iter().map(|(_, r)| r).collect();
    let classes = match classes {
        Some(c) => c,
        None => derive_class_table(&records),
    };
    let prov_path = provenance_sidecar(path);
    let provenance = if prov_path.exists() {
        jsonl::read_json(&prov_path)?
    } else {
        Provenance::new()
    };
    let manifest = Manifest {
        records,
        classes,
        provenance,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn derive_class_table(records: &[VideoRecord]) -> ClassTable {
    let mut by_id: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for r in records {
        let members = by_id.entry(r.label_id).or_default();
        if !members.contains(&r.label_text) {
            members.push(r.label_text.clone());
        }
    }
    ClassTable {
        entries: by_id
            .into_iter()
            .map(|(label_id, mut member_texts)| {
                member_texts.sort();
                ClassEntry {
                    label_id,
                    canonical_text: member_texts[0].clone(),
                    member_texts,
                    semantic_vector: Vec::new(),
                }
            })
            .collect(),
    }
}

/// Writes the record file in canonical form plus the class and provenance sidecars.
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    jsonl::write(path, &manifest.records)?;
    if !manifest.classes.is_empty() {
        write_class_table(&manifest.classes, &classes_sidecar(path))?;
    }
    jsonl::write_json(&provenance_sidecar(path), &manifest.provenance)
}

pub fn load_class_table(path: &Path) -> Result<ClassTable> {
    let entries: Vec<ClassEntry> = jsonl::read(path)?.into_iter().map(|(_, e)| e).collect();
    let table = ClassTable { entries };
    table.validate()?;
    Ok(table)
}

pub fn write_class_table(table: &ClassTable, path: &Path) -> Result<()> {
    jsonl::write(path, &table.entries)
}

/// One label phrase and its text-encoder embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    pub label_text: String,
    pub embedding: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Single-link merge of label phrases whose embeddings have cosine similarity
/// at or above `threshold`. Identical phrases always share a class.
///
/// Classes are numbered densely in sorted order of their canonical text, the
/// lexicographically smallest member.
pub fn merge_classes(labels: &[LabelVector], threshold: f64) -> Result<ClassTable> {
    if labels.is_empty() {
        return Err(Error::argument("merge_classes needs at least one label"));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::argument(format!(
            "merge threshold must be in (0, 1], got {threshold}"
        )));
    }
    let dim = labels[0].embedding.len();
    let mut norms = Vec::with_capacity(labels.len());
    for l in labels {
        crate::error::ensure_dim(dim, l.embedding.len())?;
        let n = norm(&l.embedding);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::invalid(format!(
                "label {:?} has a zero-norm or non-finite semantic vector",
                l.label_text
            )));
        }
        norms.push(n);
    }

    let n = labels.len();
    let mut sets = DisjointSet::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i].label_text == labels[j].label_text {
                sets.union(i, j);
                continue;
            }
            let dot: f64 = labels[i]
                .embedding
                .iter()
                .zip(&labels[j].embedding)
                .map(|(a, b)| a * b)
                .sum();
            if dot / (norms[i] * norms[j]) >= threshold {
                sets.union(i, j);
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = sets.find(i);
        groups.entry(root).or_default().push(i);
    }

    let mut entries: Vec<ClassEntry> = groups
        .into_values()
        .map(|mut members| {
            members.sort_by(|&a, &b| {
                labels[a]
                    .label_text
                    .cmp(&labels[b].label_text)
                    .then_with(|| cmp_vectors(&labels[a].embedding, &labels[b].embedding))
            });
            let canonical_text = labels[members[0]].label_text.clone();
            let canon: Vec<&Vec<f64>> = members
                .iter()
                .filter(|&&m| labels[m].label_text == canonical_text)
                .map(|&m| &labels[m].embedding)
                .collect();
            let mut semantic_vector = vec![0.0; dim];
            for v in &canon {
                for (acc, x) in semantic_vector.iter_mut().zip(v.iter()) {
                    *acc += x;
                }
            }
            for acc in &mut semantic_vector {
                *acc /= canon.len() as f64;
            }
            ClassEntry {
                label_id: 0,
                canonical_text,
                member_texts: members
                    .iter()
                    .map(|&m| labels[m].label_text.clone())
                    .collect(),
                semantic_vector,
            }
        })
        .collect();
    entries.sort_by(|a, b| a.canonical_text.cmp(&b.canonical_text));
    for (i, e) in entries.iter_mut().enumerate() {
        e.label_id = i as u32;
    }
    Ok(ClassTable { entries })
}

fn cmp_vectors(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// A class that had fewer records than requested by balanced sampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassShortfall {
    pub label_id: u32,
    pub population: usize,
    pub requested: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedSample {
    pub ids: Vec<String>,
    pub shortfalls: Vec<ClassShortfall>,
}

/// Draws `min(population, per_class)` records per class uniformly without
/// replacement. Classes are visited in ascending label id and ids are sorted
/// within each class before drawing, so the result depends only on the set of
/// records and the seed.
pub fn sample_class_balanced(
    manifest: &Manifest,
    per_class: usize,
    seed: u64,
) -> Result<BalancedSample> {
    if per_class == 0 {
        return Err(Error::argument("per_class must be at least 1"));
    }
    let mut by_class: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    for r in &manifest.records {
        by_class.entry(r.label_id).or_default().push(&r.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::new();
    let mut shortfalls = Vec::new();
    for (label_id, mut members) in by_class {
        members.sort_unstable();
        let population = members.len();
        if population <= per_class {
            if population < per_class {
                shortfalls.push(ClassShortfall {
                    label_id,
                    population,
                    requested: per_class,
                });
            }
            ids.extend(members.iter().map(|s| s.to_string()));
            continue;
        }
        let mut picked = rand::seq::index::sample(&mut rng, population, per_class).into_vec();
        picked.sort_unstable();
        ids.extend(picked.into_iter().map(|i| members[i].to_string()));
    }
    Ok(BalancedSample { ids, shortfalls })
}
