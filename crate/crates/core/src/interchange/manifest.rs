use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::block::{load_embeddings, read_embedding_header, EmbeddingBlock};
use super::facts::{check_pairs, load_facts_with_lines, FactSet};
use super::write_atomic;

pub const EMBEDDING_EXT: &str = "tlge";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub facts: FactSet,
    /// 1-based line of the record in the facts file.
    pub facts_line: usize,
    pub embedding_path: PathBuf,
}

/// Ordered binding of fact sets to embedding files.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub dataset_tag: String,
    pub facts_path: PathBuf,
    pub dim: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct ManifestBuild {
    pub manifest: DatasetManifest,
    /// Non-fatal findings, e.g. embedding files with no fact record.
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    dataset_tag: String,
    /// Absent in minimal manifests; then the facts file sits beside the manifest.
    #[serde(default = "default_facts_path")]
    facts_path: String,
    entries: Vec<ManifestFileEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFileEntry {
    image_id: String,
    facts_line: usize,
    embedding_path: String,
}

fn default_facts_path() -> String {
    "facts.jsonl".into()
}

fn dataset_tag_of<'a>(sets: impl Iterator<Item = &'a FactSet>) -> String {
    let mut tags: Vec<&str> = Vec::new();
    for s in sets {
        if !tags.contains(&s.dataset_tag.as_str()) {
            tags.push(&s.dataset_tag);
        }
    }
    tags.join("+")
}

/// Pairs every record of `facts_path` with `<embeddings_dir>/<image_id>.tlge`.
pub fn build_manifest(
    facts_path: impl AsRef<Path>,
    embeddings_dir: impl AsRef<Path>,
) -> Result<ManifestBuild> {
    let facts_path = facts_path.as_ref();
    let dir = embeddings_dir.as_ref();
    let records = load_facts_with_lines(facts_path)?;
    let mut entries = Vec::with_capacity(records.len());
    let mut dim = None;
    for (line, fs) in records {
        let path = dir.join(format!("{}.{EMBEDDING_EXT}", fs.image_id));
        if !path.is_file() {
            return Err(Error::MissingEmbedding {
                image_id: fs.image_id,
                path,
            });
        }
        let header = read_embedding_header(&path)?;
        check_entry(&fs, &header.image_id, header.n_facts, header.dim, &mut dim)?;
        entries.push(ManifestEntry {
            facts: fs,
            facts_line: line,
            embedding_path: path,
        });
    }

    let known: HashSet<&str> = entries.iter().map(|e| e.facts.image_id.as_str()).collect();
    let mut warnings = Vec::new();
    let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut extras: Vec<String> = listing
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == EMBEDDING_EXT))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .filter(|stem| !known.contains(stem.as_str()))
        .collect();
    extras.sort();
    for stem in extras {
        warnings.push(format!("embedding file {stem}.{EMBEDDING_EXT} has no fact record"));
    }

    let manifest = DatasetManifest {
        dataset_tag: dataset_tag_of(entries.iter().map(|e| &e.facts)),
        facts_path: facts_path.to_path_buf(),
        dim: dim.unwrap_or(0),
        entries,
    };
    Ok(ManifestBuild { manifest, warnings })
}

fn check_entry(
    fs: &FactSet,
    file_id: &str,
    n_facts: usize,
    file_dim: usize,
    dim: &mut Option<usize>,
) -> Result<()> {
    if file_id != fs.image_id {
        return Err(Error::IdMismatch {
            expected: fs.image_id.clone(),
            found: file_id.to_string(),
        });
    }
    if n_facts != fs.n_facts() {
        return Err(Error::Shape {
            what: "facts in embedding file",
            expected: fs.n_facts(),
            actual: n_facts,
        });
    }
    match *dim {
        None => *dim = Some(file_dim),
        Some(d) if d != file_dim => {
            return Err(Error::DimMismatch {
                expected: d,
                found: file_dim,
                context: format!("embedding for {}", fs.image_id),
            })
        }
        _ => {}
    }
    Ok(())
}

fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

fn resolve(path: &str, base: &Path) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self, base: &Path) -> Result<String> {
        let file = ManifestFile {
            dataset_tag: self.dataset_tag.clone(),
            facts_path: relative_to(&self.facts_path, base),
            entries: self
                .entries
                .iter()
                .map(|e| ManifestFileEntry {
                    image_id: e.facts.image_id.clone(),
                    facts_line: e.facts_line,
                    embedding_path: relative_to(&e.embedding_path, base),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Manifest(e.to_string()))
    }

    /// Writes the manifest atomically; paths are stored relative to its directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut json = self.to_json(base)?;
        json.push('\n');
        write_atomic(path, json.as_bytes())
    }

    /// Reads a manifest and the facts file it references, re-checking every
    /// binding (ids, fact counts, and a shared embedding dimension).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ManifestFile =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let facts_path = resolve(&file.facts_path, base);
        let by_line: HashMap<usize, FactSet> =
            load_facts_with_lines(&facts_path)?.into_iter().collect();

        let mut entries = Vec::with_capacity(file.entries.len());
        let mut seen = HashSet::new();
        let mut dim = None;
        for e in file.entries {
            let fs = by_line.get(&e.facts_line).cloned().ok_or_else(|| {
                Error::Manifest(format!(
                    "entry {:?} points at line {} which holds no record",
                    e.image_id, e.facts_line
                ))
            })?;
            if fs.image_id != e.image_id {
                return Err(Error::IdMismatch {
                    expected: e.image_id,
                    found: fs.image_id,
                });
            }
            if !seen.insert(e.image_id.clone()) {
                return Err(Error::Manifest(format!("duplicate entry {:?}", e.image_id)));
            }
            let embedding_path = resolve(&e.embedding_path, base);
            let header = read_embedding_header(&embedding_path)?;
            check_entry(&fs, &header.image_id, header.n_facts, header.dim, &mut dim)?;
            entries.push(ManifestEntry {
                facts: fs,
                facts_line: e.facts_line,
                embedding_path,
            });
        }
        check_pairs(entries.iter().map(|e| &e.facts))?;
        Ok(DatasetManifest {
            dataset_tag: file.dataset_tag,
            facts_path,
            dim: dim.unwrap_or(0),
            entries,
        })
    }

    /// Loads every embedding block (concurrently) into memory.
    pub fn load_dataset<T: Scalar>(&self) -> Result<Dataset<T>> {
        let samples = self
            .entries
            .par_iter()
            .map(|e| {
                let block = load_embeddings::<T>(&e.embedding_path)?;
                Ok(Sample {
                    facts: e.facts.clone(),
                    block,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.dataset_tag.clone(), samples)
    }
}

/// One fact set together with its embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub facts: FactSet,
    pub block: EmbeddingBlock<T>,
}

/// A manifest with all blocks resident in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub dataset_tag: String,
    samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(dataset_tag: impl Into<String>, samples: Vec<Sample<T>>) -> Result<Self> {
        let mut dim = None;
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.facts.image_id.as_str()) {
                return Err(Error::DuplicateImageId {
                    line: 0,
                    image_id: s.facts.image_id.clone(),
                });
            }
            check_entry(&s.facts, s.block.image_id(), s.block.n_facts(), s.block.dim(), &mut dim)?;
        }
        check_pairs(samples.iter().map(|s| &s.facts))?;
        Ok(Dataset {
            dataset_tag: dataset_tag.into(),
            samples,
        })
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Shared embedding dimension, or `None` for an empty dataset.
    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.block.dim())
    }

    /// Sub-dataset with the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        Dataset {
            dataset_tag: self.dataset_tag.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn find(&self, image_id: &str) -> Option<&Sample<T>> {
        self.samples.iter().find(|s| s.facts.image_id == image_id)
    }

    /// Replaces labels in order (pair metadata is dropped, as shuffled labels
    /// no longer respect pairing).
    pub fn with_labels(&self, labels: &[super::Label]) -> Result<Dataset<T>> {
        if labels.len() != self.samples.len() {
            return Err(Error::Shape {
                what: "labels",
                expected: self.samples.len(),
                actual: labels.len(),
            });
        }
        let samples = self
            .samples
            .iter()
            .zip(labels)
            .map(|(s, &l)| {
                let mut s = s.clone();
                s.facts.label = l;
                s.facts.pair_id = None;
                s
            })
            .collect();
        Ok(Dataset {
            dataset_tag: self.dataset_tag.clone(),
            samples,
        })
    }
}
