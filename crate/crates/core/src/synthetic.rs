//! Synthetic fact-set datasets with a planted signal, built on the mock
//! embedder. Weird sets contain exactly one fact carrying a marker token.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{marker_direction, token_vector, EmbedRequest, MockEmbedder};
use crate::error::Result;
use crate::interchange::{Dataset, FactSet, Label, Sample};

pub const DEFAULT_MARKER_TOKEN: &str = "weird";

const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ren", "tu", "sa", "vo", "pel", "dri", "on", "gu", "shi"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_per_class: usize,
    pub n_facts: usize,
    pub dim: usize,
    pub max_tokens: usize,
    /// Inclusive range of words per fact (before the marker is inserted).
    pub words_per_fact: (usize, usize),
    pub marker_token: String,
    pub marker_offset: f64,
    /// Magnitude of a shift, orthogonal to the marker direction, added to
    /// every real token vector.
    pub domain_shift: f64,
    /// Emit weird/normal pairs sharing a `pair_id` (the normal member is the
    /// weird set with the marker fact replaced).
    pub paired: bool,
    pub dataset_tag: String,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_per_class: 200,
            n_facts: 5,
            dim: 32,
            max_tokens: 12,
            words_per_fact: (4, 8),
            marker_token: DEFAULT_MARKER_TOKEN.into(),
            marker_offset: 10.0,
            domain_shift: 0.0,
            paired: false,
            dataset_tag: "synthetic".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub dataset: Dataset<f64>,
    /// Index of the marker fact for weird sets.
    pub marker_fact: Vec<Option<usize>>,
}

fn vocabulary() -> Vec<String> {
    let mut words = Vec::new();
    for a in SYLLABLES {
        for b in SYLLABLES {
            words.push(format!("{a}{b}"));
        }
    }
    words
}

/// Fixed unit vector orthogonal to [`marker_direction`].
pub fn shift_direction(dim: usize) -> Vec<f64> {
    let u = marker_direction(dim);
    let mut v = token_vector("tlg/synthetic/shift-direction", dim);
    let along: f64 = v.iter().zip(&u).map(|(a, b)| a * b).sum();
    for (x, ui) in v.iter_mut().zip(&u) {
        *x -= along * ui;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn sentence(rng: &mut impl Rng, vocab: &[String], range: (usize, usize)) -> Vec<String> {
    let len = rng.gen_range(range.0..=range.1);
    (0..len).map(|_| vocab.choose(rng).unwrap().clone()).collect()
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = vocabulary();
    let embedder = MockEmbedder::new(config.dim, config.max_tokens)
        .with_marker(config.marker_token.clone(), config.marker_offset);
    let shift: Vec<f64> = shift_direction(config.dim)
        .into_iter()
        .map(|x| x * config.domain_shift)
        .collect();

    let mut plan: Vec<(FactSet, Option<usize>)> = Vec::new();
    for i in 0..config.n_per_class {
        let mut facts: Vec<Vec<String>> = (0..config.n_facts)
            .map(|_| sentence(&mut rng, &vocab, config.words_per_fact))
            .collect();
        let normal_facts: Vec<String> = facts.iter().map(|f| f.join(" ")).collect();
        let at = rng.gen_range(0..config.n_facts);
        let pos = rng.gen_range(0..=facts[at].len()).min(config.max_tokens - 1);
        facts[at].insert(pos, config.marker_token.clone());
        let weird_facts: Vec<String> = facts.iter().map(|f| f.join(" ")).collect();

        let (normal_facts, pair_id) = if config.paired {
            (normal_facts, Some(format!("p{i:04}")))
        } else {
            let fresh = (0..config.n_facts)
                .map(|_| sentence(&mut rng, &vocab, config.words_per_fact).join(" "))
                .collect();
            (fresh, None)
        };
        let mk = |id: String, label, facts| FactSet {
            image_id: id,
            label,
            pair_id: pair_id.clone(),
            dataset_tag: config.dataset_tag.clone(),
            facts,
        };
        plan.push((mk(format!("w{i:04}"), Label::Weird, weird_facts), Some(at)));
        plan.push((mk(format!("n{i:04}"), Label::Normal, normal_facts), None));
    }
    plan.shuffle(&mut rng);

    let mut samples = Vec::with_capacity(plan.len());
    let mut marker_fact = Vec::with_capacity(plan.len());
    for (facts, at) in plan {
        let mut block = embedder.embed(&EmbedRequest::new(facts.image_id.clone(), facts.facts.clone()));
        if config.domain_shift != 0.0 {
            for i in 0..block.n_facts() {
                for j in 0..block.n_tokens() {
                    if block.is_unmasked(i, j) {
                        for (x, s) in block.token_mut(i, j).iter_mut().zip(&shift) {
                            *x = (*x + s) as f32 as f64;
                        }
                    }
                }
            }
        }
        samples.push(Sample { facts, block });
        marker_fact.push(at);
    }
    Ok(SyntheticSet {
        dataset: Dataset::new(config.dataset_tag.clone(), samples)?,
        marker_fact,
    })
}
