//! Diagnostics over generated facts: lexical overlap (ROUGE-L F1), embedding
//! cosine similarity, marker-word counts and fact length.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interchange::{Dataset, FactSet, Label};
use crate::pooling::{mean_pool, FactVectors};
use crate::scalar::{dot, Scalar};

/// Lowercase, turn punctuation into spaces, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 over normalised tokens. Zero when either side has no tokens.
pub fn rouge_l_f1(a: &str, b: &str) -> f64 {
    let ta = tokenize(a);
    let tb = tokenize(b);
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&ta, &tb) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / ta.len() as f64;
    let r = lcs / tb.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean ROUGE-L F1 over unordered fact pairs.
pub fn pairwise_rouge<S: AsRef<str>>(facts: &[S]) -> Result<f64> {
    let n = facts.len();
    if n < 2 {
        return Err(Error::TooFewFacts(n));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += rouge_l_f1(facts[i].as_ref(), facts[j].as_ref());
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Mean cosine similarity over unordered row pairs.
pub fn pairwise_cosine<T: Scalar>(vectors: &FactVectors<T>) -> Result<f64> {
    let n = vectors.n();
    if n < 2 {
        return Err(Error::TooFewFacts(n));
    }
    let norms: Vec<f64> = vectors
        .rows()
        .map(|r| dot(r, r).as_f64().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::ZeroNorm(i));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let c = dot(vectors.row(i), vectors.row(j)).as_f64() / (norms[i] * norms[j]);
            total += c.clamp(-1.0, 1.0);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Category → keywords. Keywords are matched as whole lowercase tokens.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkerLexicon {
    categories: IndexMap<String, Vec<String>>,
}

impl Default for MarkerLexicon {
    fn default() -> Self {
        let table: [(&str, &[&str]); 4] = [
            ("common", &["common", "usual", "normal", "natural", "real"]),
            ("weird", &["unusual", "strange", "playful", "creative", "unreal", "weird"]),
            ("real", &["real", "realistic", "photo"]),
            ("digital", &["digital", "generated", "3d", "fantastic", "rendering", "artistic"]),
        ];
        let categories = table
            .iter()
            .map(|(c, ks)| (c.to_string(), ks.iter().map(|k| k.to_string()).collect()))
            .collect();
        MarkerLexicon { categories }
    }
}

impl MarkerLexicon {
    pub fn new(categories: IndexMap<String, Vec<String>>) -> Result<Self> {
        let mut normalised = IndexMap::new();
        for (name, words) in categories {
            if name.trim().is_empty() {
                return Err(Error::InvalidLexicon("empty category name".into()));
            }
            if words.is_empty() {
                return Err(Error::InvalidLexicon(format!("category {name:?} has no keywords")));
            }
            let mut kws = Vec::with_capacity(words.len());
            for w in words {
                let toks = tokenize(&w);
                if toks.len() != 1 {
                    return Err(Error::InvalidLexicon(format!(
                        "keyword {w:?} in {name:?} must be a single word"
                    )));
                }
                kws.push(toks.into_iter().next().unwrap());
            }
            normalised.insert(name, kws);
        }
        if normalised.is_empty() {
            return Err(Error::InvalidLexicon("no categories".into()));
        }
        Ok(MarkerLexicon { categories: normalised })
    }

    /// Parses `{"category": ["kw", ...], ...}`, keeping file order.
    pub fn from_json(json: &str) -> Result<Self> {
        let map: IndexMap<String, Vec<String>> =
            serde_json::from_str(json).map_err(|e| Error::InvalidLexicon(e.to_string()))?;
        Self::new(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn categories(&self) -> &IndexMap<String, Vec<String>> {
        &self.categories
    }
}

/// Per category, the number of fact sets with at least one keyword hit.
pub fn marker_hits(fact_sets: &[&FactSet], lexicon: &MarkerLexicon) -> IndexMap<String, usize> {
    let mut counts: IndexMap<String, usize> =
        lexicon.categories.keys().map(|c| (c.clone(), 0)).collect();
    for fs in fact_sets {
        let tokens: Vec<String> = fs.facts.iter().flat_map(|f| tokenize(f)).collect();
        for (cat, kws) in &lexicon.categories {
            if kws.iter().any(|k| tokens.contains(k)) {
                *counts.get_mut(cat).unwrap() += 1;
            }
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    /// `"all"`, or the label when split.
    pub group: String,
    pub n_factsets: usize,
    /// Mean fact length in Unicode characters (per set, then across sets).
    pub mean_length_chars: f64,
    pub mean_pairwise_rouge: Option<f64>,
    /// Cosine over mean-pooled encoder states of the manifest itself.
    pub mean_pairwise_cosine: Option<f64>,
    /// Sets with fewer than two facts, excluded from the similarity means.
    pub n_similarity_omitted: usize,
    pub marker_hits: IndexMap<String, usize>,
}

pub fn analyze_group<T: Scalar>(
    group: &str,
    dataset: &Dataset<T>,
    indices: &[usize],
    lexicon: &MarkerLexicon,
    epsilon: f64,
) -> Result<AnalysisReport> {
    let samples = dataset.samples();
    let mut lengths = 0.0;
    let mut rouge = Vec::new();
    let mut cosine = Vec::new();
    let mut omitted = 0;
    for &i in indices {
        let s = &samples[i];
        let facts = &s.facts.facts;
        lengths += facts.iter().map(|f| f.chars().count() as f64).sum::<f64>() / facts.len() as f64;
        if facts.len() < 2 {
            omitted += 1;
            continue;
        }
        rouge.push(pairwise_rouge(facts)?);
        let v = mean_pool(&s.block, T::of(epsilon))?;
        cosine.push(pairwise_cosine(&v)?);
    }
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let sets: Vec<&FactSet> = indices.iter().map(|&i| &samples[i].facts).collect();
    Ok(AnalysisReport {
        group: group.to_string(),
        n_factsets: indices.len(),
        mean_length_chars: if indices.is_empty() { 0.0 } else { lengths / indices.len() as f64 },
        mean_pairwise_rouge: mean(&rouge),
        mean_pairwise_cosine: mean(&cosine),
        n_similarity_omitted: omitted,
        marker_hits: marker_hits(&sets, lexicon),
    })
}

/// One report for the whole dataset, or one per label (normal, then weird).
pub fn analyze<T: Scalar>(
    dataset: &Dataset<T>,
    lexicon: &MarkerLexicon,
    split_by_label: bool,
    epsilon: f64,
) -> Result<Vec<AnalysisReport>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !split_by_label {
        let all: Vec<usize> = (0..dataset.len()).collect();
        return Ok(vec![analyze_group("all", dataset, &all, lexicon, epsilon)?]);
    }
    [Label::Normal, Label::Weird]
        .iter()
        .map(|&l| {
            let idx: Vec<usize> = dataset
                .samples()
                .iter()
                .enumerate()
                .filter(|(_, s)| s.facts.label == l)
                .map(|(i, _)| i)
                .collect();
            analyze_group(l.as_str(), dataset, &idx, lexicon, epsilon)
        })
        .collect()
}

/// Text table with Type, Length, ROUGE, Cosine Similarity and one column per
/// marker category. Similarities are shown ×100.
pub fn reports_to_text(reports: &[AnalysisReport]) -> String {
    let cats: Vec<&String> = reports
        .first()
        .map(|r| r.marker_hits.keys().collect())
        .unwrap_or_default();
    let mut s = String::from(
        "# Length in characters; cosine over the manifest's own mean-pooled fact vectors\n",
    );
    s.push_str(&format!(
        "{:<8} {:>6} {:>8} {:>8} {:>8}",
        "Type", "N", "Length", "ROUGE", "Cosine"
    ));
    for c in &cats {
        s.push_str(&format!(" {c:>8}"));
    }
    s.push('\n');
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
    for r in reports {
        s.push_str(&format!(
            "{:<8} {:>6} {:>8.2} {:>8} {:>8}",
            r.group,
            r.n_factsets,
            r.mean_length_chars,
            pct(r.mean_pairwise_rouge),
            pct(r.mean_pairwise_cosine)
        ));
        for c in &cats {
            s.push_str(&format!(" {:>8}", r.marker_hits.get(*c).copied().unwrap_or(0)));
        }
        s.push('\n');
    }
    s
}
