//! Evaluation protocols: pair-intact stratified k-fold cross-validation,
//! binary and paired accuracy, and train-on-one/test-on-another transfer.

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interchange::{Dataset, FactSet, Label};
use crate::pooling::{forward, ClassifierParams};
use crate::scalar::Scalar;
use crate::trainer::{train, TrainConfig, TrainRecord};

/// Fold index for every image id, in dataset order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: IndexMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, image_id: &str) -> Option<usize> {
        self.assignments.get(image_id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// `(train, test)` sample indices of `fact_sets` for one fold.
    pub fn split(&self, fact_sets: &[&FactSet], fold: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, fs) in fact_sets.iter().enumerate() {
            if self.fold_of(&fs.image_id) == Some(fold) {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }
}

struct Unit {
    members: Vec<usize>,
    label: Option<Label>,
}

/// Groups samples into fold units: a pair is one unit, anything unpaired is a
/// unit of one.
fn units_of(fact_sets: &[&FactSet]) -> Vec<Unit> {
    let mut units: Vec<Unit> = Vec::new();
    let mut pair_unit: HashMap<&str, usize> = HashMap::new();
    for (i, fs) in fact_sets.iter().enumerate() {
        match fs.pair_id.as_deref() {
            Some(p) => match pair_unit.get(p) {
                Some(&u) => units[u].members.push(i),
                None => {
                    pair_unit.insert(p, units.len());
                    units.push(Unit { members: vec![i], label: None });
                }
            },
            None => units.push(Unit { members: vec![i], label: Some(fs.label) }),
        }
    }
    // a pair id seen only once behaves like an unpaired sample
    for u in units.iter_mut() {
        if u.members.len() == 1 && u.label.is_none() {
            u.label = Some(fact_sets[u.members[0]].label);
        }
    }
    units
}

/// Seeded, pair-intact, label-stratified k-fold assignment.
///
/// Units are shuffled once. Pairs (balanced by construction) are dealt
/// round-robin; singletons follow, weird before normal, each going to the
/// smallest fold and, among equals, the one holding fewest of its label.
pub fn plan_folds(fact_sets: &[&FactSet], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidFoldCount(k));
    }
    let mut units = units_of(fact_sets);
    if k > units.len() {
        return Err(Error::TooManyFolds { k, units: units.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    units.shuffle(&mut rng);

    let mut fold_of_sample = vec![0usize; fact_sets.len()];
    let mut sizes = vec![0usize; k];
    let mut weird = vec![0usize; k];

    let (pairs, singles): (Vec<&Unit>, Vec<&Unit>) =
        units.iter().partition(|u| u.members.len() > 1);
    for (j, u) in pairs.iter().enumerate() {
        let f = j % k;
        for &m in &u.members {
            fold_of_sample[m] = f;
            if fact_sets[m].label.is_weird() {
                weird[f] += 1;
            }
        }
        sizes[f] += u.members.len();
    }
    let ordered = singles
        .iter()
        .filter(|u| u.label == Some(Label::Weird))
        .chain(singles.iter().filter(|u| u.label != Some(Label::Weird)));
    for u in ordered {
        let is_weird = u.label == Some(Label::Weird);
        let f = (0..k)
            .min_by_key(|&f| {
                let same = if is_weird { weird[f] } else { sizes[f] - weird[f] };
                (sizes[f], same, f)
            })
            .expect("k >= 2");
        let m = u.members[0];
        fold_of_sample[m] = f;
        sizes[f] += 1;
        if is_weird {
            weird[f] += 1;
        }
    }

    let assignments = fact_sets
        .iter()
        .zip(fold_of_sample)
        .map(|(fs, f)| (fs.image_id.clone(), f))
        .collect();
    Ok(FoldPlan { k, assignments })
}

pub fn make_folds<T: Scalar>(dataset: &Dataset<T>, k: usize, seed: u64) -> Result<FoldPlan> {
    let sets: Vec<&FactSet> = dataset.samples().iter().map(|s| &s.facts).collect();
    plan_folds(&sets, k, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub image_id: String,
    pub pair_id: Option<String>,
    pub label: Label,
    pub prob: f64,
}

pub fn predict<T: Scalar>(params: &ClassifierParams<T>, dataset: &Dataset<T>, epsilon: f64) -> Result<Vec<Prediction>> {
    dataset
        .samples()
        .iter()
        .map(|s| {
            let tr = forward(&s.block, params, T::of(epsilon))?;
            Ok(Prediction {
                image_id: s.facts.image_id.clone(),
                pair_id: s.facts.pair_id.clone(),
                label: s.facts.label,
                prob: tr.prob.as_f64(),
            })
        })
        .collect()
}

/// Fraction of predictions where `prob ≥ 0.5` agrees with `label == weird`.
pub fn accuracy(predictions: &[(f64, Label)]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let correct = predictions
        .iter()
        .filter(|(p, l)| Label::from_prob(*p) == *l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

pub fn prediction_accuracy(predictions: &[Prediction]) -> Result<f64> {
    let pl: Vec<(f64, Label)> = predictions.iter().map(|p| (p.prob, p.label)).collect();
    accuracy(&pl)
}

/// Fraction of pairs whose weird member scores strictly higher than its
/// normal member. Predictions without a pair id are ignored.
pub fn paired_accuracy(predictions: &[Prediction]) -> Result<f64> {
    let mut pairs: IndexMap<&str, (Option<f64>, Option<f64>)> = IndexMap::new();
    for p in predictions {
        let Some(id) = p.pair_id.as_deref() else { continue };
        let slot = pairs.entry(id).or_default();
        match p.label {
            Label::Weird => slot.0 = Some(p.prob),
            Label::Normal => slot.1 = Some(p.prob),
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let mut wins = 0usize;
    for (id, slot) in &pairs {
        match slot {
            (Some(w), Some(n)) => {
                if w > n {
                    wins += 1;
                }
            }
            _ => return Err(Error::IncompletePair(id.to_string())),
        }
    }
    Ok(wins as f64 / pairs.len() as f64)
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub mode: String,
    pub dataset_tag: String,
    pub k: usize,
    pub seed: u64,
    /// Spread measure used for `std_accuracy`.
    pub std_kind: String,
    pub n_samples: usize,
    pub per_fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub paired_accuracy: Option<f64>,
    pub folds: Vec<FoldResult>,
}

impl EvalReport {
    /// Plain-text table: method, mode, accuracy (percent ± std).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "# {}-fold cross-validation, seed {}, n = {}; std is the {} standard deviation over folds\n",
            self.k, self.seed, self.n_samples, self.std_kind
        ));
        let acc = format!("{:.2} ± {:.2}", 100.0 * self.mean_accuracy, 100.0 * self.std_accuracy);
        let head = self.dataset_tag.as_str();
        let w = acc.len().max(head.len());
        s.push_str(&format!("{:<12} {:<12} {:>w$}\n", "Method", "Mode", head));
        s.push_str(&format!("{:<12} {:<12} {:>w$}\n", self.method, self.mode, acc));
        s.push('\n');
        s.push_str(&format!("{:<6} {:>8} {:>8} {:>9}\n", "fold", "n_train", "n_test", "accuracy"));
        for f in &self.folds {
            s.push_str(&format!(
                "{:<6} {:>8} {:>8} {:>9.2}\n",
                f.fold, f.n_train, f.n_test, 100.0 * f.accuracy
            ));
        }
        if let Some(p) = self.paired_accuracy {
            s.push_str(&format!("\npaired accuracy: {:.2}\n", 100.0 * p));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold_index,accuracy\n");
        for (i, a) in self.per_fold_accuracy.iter().enumerate() {
            s.push_str(&format!("{i},{a}\n"));
        }
        s
    }
}

/// k-fold cross-validation. Fold `i` trains with seed `seed ^ i` on the other
/// folds; folds run in parallel but are reported in index order.
pub fn cross_validate<T: Scalar>(
    dataset: &Dataset<T>,
    k: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<EvalReport> {
    config.validate()?;
    let sets: Vec<&FactSet> = dataset.samples().iter().map(|s| &s.facts).collect();
    let plan = plan_folds(&sets, k, seed)?;

    let outcomes = (0..k)
        .into_par_iter()
        .map(|fold| {
            let (train_idx, test_idx) = plan.split(&sets, fold);
            let train_set = dataset.subset(&train_idx);
            let test_set = dataset.subset(&test_idx);
            let trained = train(&train_set, &config.with_seed(seed ^ fold as u64))?;
            let preds = predict(&trained.params, &test_set, config.epsilon)?;
            let acc = prediction_accuracy(&preds)?;
            Ok((
                FoldResult {
                    fold,
                    n_train: train_idx.len(),
                    n_test: test_idx.len(),
                    accuracy: acc,
                },
                preds,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let per_fold: Vec<f64> = outcomes.iter().map(|(f, _)| f.accuracy).collect();
    let (mean, std) = mean_std(&per_fold);
    let all_preds: Vec<Prediction> = outcomes.iter().flat_map(|(_, p)| p.clone()).collect();
    let paired = if all_preds.iter().any(|p| p.pair_id.is_some()) {
        Some(paired_accuracy(&all_preds)?)
    } else {
        None
    };
    Ok(EvalReport {
        method: "TLG".into(),
        mode: "fine-tuned".into(),
        dataset_tag: dataset.dataset_tag.clone(),
        k,
        seed,
        std_kind: "population".into(),
        n_samples: dataset.len(),
        per_fold_accuracy: per_fold,
        mean_accuracy: mean,
        std_accuracy: std,
        paired_accuracy: paired,
        folds: outcomes.into_iter().map(|(f, _)| f).collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferReport {
    pub train_tag: String,
    pub test_tag: String,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub paired_accuracy: Option<f64>,
    pub final_train_accuracy: f64,
    #[serde(skip)]
    pub history: Vec<TrainRecord>,
}

impl TransferReport {
    pub fn to_text(&self) -> String {
        format!(
            "{:<12} {:<12} {:<12} {:>9}\n{:<12} {:<12} {:<12} {:>9.2}\n",
            "Method",
            "Train",
            "Test",
            "Accuracy",
            "TLG",
            self.train_tag,
            self.test_tag,
            100.0 * self.accuracy
        )
    }
}

/// Trains once on `train_set` and scores binary accuracy on `test_set`.
pub fn transfer_eval<T: Scalar>(
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    config: &TrainConfig,
) -> Result<(TransferReport, ClassifierParams<T>)> {
    let d_train = train_set.dim().ok_or(Error::EmptyDataset)?;
    let d_test = test_set.dim().ok_or(Error::EmptyDataset)?;
    if d_train != d_test {
        return Err(Error::DimMismatch {
            expected: d_train,
            found: d_test,
            context: "train vs test manifest".into(),
        });
    }
    let trained = train(train_set, config)?;
    let preds = predict(&trained.params, test_set, config.epsilon)?;
    let paired = if preds.iter().any(|p| p.pair_id.is_some()) {
        Some(paired_accuracy(&preds)?)
    } else {
        None
    };
    let report = TransferReport {
        train_tag: train_set.dataset_tag.clone(),
        test_tag: test_set.dataset_tag.clone(),
        n_train: train_set.len(),
        n_test: test_set.len(),
        accuracy: prediction_accuracy(&preds)?,
        paired_accuracy: paired,
        final_train_accuracy: trained.history.last().map_or(0.0, |r| r.train_accuracy),
        history: trained.history,
    };
    Ok((report, trained.params))
}

/// Checks that no test sample or its pair partner leaks into training.
pub fn leak_free(fact_sets: &[&FactSet], train: &[usize], test: &[usize]) -> bool {
    let train_ids: HashSet<&str> = train.iter().map(|&i| fact_sets[i].image_id.as_str()).collect();
    let train_pairs: HashSet<&str> = train.iter().filter_map(|&i| fact_sets[i].pair_id.as_deref()).collect();
    test.iter().all(|&i| {
        let fs = fact_sets[i];
        !train_ids.contains(fs.image_id.as_str())
            && fs.pair_id.as_deref().is_none_or(|p| !train_pairs.contains(p))
    })
}
