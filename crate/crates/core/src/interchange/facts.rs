use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Weird,
}

impl Label {
    pub fn is_weird(self) -> bool {
        self == Label::Weird
    }

    /// 1.0 for weird, 0.0 for normal.
    pub fn target(self) -> f64 {
        if self.is_weird() {
            1.0
        } else {
            0.0
        }
    }

    pub fn from_prob(prob: f64) -> Label {
        if prob >= 0.5 {
            Label::Weird
        } else {
            Label::Normal
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Weird => "weird",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The atomic facts generated for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactSet {
    pub image_id: String,
    pub label: Label,
    #[serde(default)]
    pub pair_id: Option<String>,
    pub dataset_tag: String,
    pub facts: Vec<String>,
}

impl FactSet {
    pub fn n_facts(&self) -> usize {
        self.facts.len()
    }

    /// Checks the per-record invariants; `line` is only used for error context.
    pub fn validate(&self, line: usize) -> Result<()> {
        let id = &self.image_id;
        if id.trim().is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
            return Err(Error::InvalidImageId {
                line,
                image_id: id.clone(),
            });
        }
        if self.facts.is_empty() {
            return Err(Error::EmptyFactList {
                line,
                image_id: id.clone(),
            });
        }
        if let Some(index) = self.facts.iter().position(|f| f.trim().is_empty()) {
            return Err(Error::BlankFact {
                line,
                image_id: id.clone(),
                index,
            });
        }
        Ok(())
    }
}

/// Parses JSONL fact records, returning each with its 1-based line number.
/// Blank lines are skipped.
pub fn parse_facts(reader: impl BufRead) -> Result<Vec<(usize, FactSet)>> {
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::FactsParse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fs: FactSet = serde_json::from_str(&line).map_err(|e| Error::FactsParse {
            line: lineno,
            message: e.to_string(),
        })?;
        fs.validate(lineno)?;
        if seen.insert(fs.image_id.clone(), lineno).is_some() {
            return Err(Error::DuplicateImageId {
                line: lineno,
                image_id: fs.image_id,
            });
        }
        out.push((lineno, fs));
    }
    check_pairs(out.iter().map(|(_, f)| f))?;
    Ok(out)
}

pub(crate) fn check_pairs<'a>(sets: impl Iterator<Item = &'a FactSet>) -> Result<()> {
    let mut pairs: HashMap<&str, Vec<Label>> = HashMap::new();
    let mut order = Vec::new();
    for fs in sets {
        if let Some(p) = fs.pair_id.as_deref() {
            let members = pairs.entry(p).or_default();
            if members.is_empty() {
                order.push(p);
            }
            members.push(fs.label);
        }
    }
    for p in order {
        let members = &pairs[p];
        if members.len() != 2 {
            return Err(Error::PairCardinality {
                pair_id: p.to_string(),
                count: members.len(),
            });
        }
        if members[0] == members[1] {
            return Err(Error::PairLabelConflict {
                pair_id: p.to_string(),
                label: members[0].to_string(),
            });
        }
    }
    Ok(())
}

pub fn load_facts_with_lines(path: impl AsRef<Path>) -> Result<Vec<(usize, FactSet)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_facts(BufReader::new(file))
}

/// Loads a facts JSONL file, preserving file order.
pub fn load_facts(path: impl AsRef<Path>) -> Result<Vec<FactSet>> {
    Ok(load_facts_with_lines(path)?
        .into_iter()
        .map(|(_, f)| f)
        .collect())
}
