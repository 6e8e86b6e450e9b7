//! Forward pass of the fact-set classifier: masked mean pooling over tokens,
//! softmax attention over facts, attention-weighted pooling, and a sigmoid
//! head producing the violation probability.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interchange::{write_atomic, EmbeddingBlock};
use crate::scalar::{dot, sum, Scalar};

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Row-major `n × dim` matrix of per-fact vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactVectors<T> {
    n: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> FactVectors<T> {
    pub fn new(n: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if n == 0 || dim == 0 || data.len() != n * dim {
            return Err(Error::Shape {
                what: "fact vectors",
                expected: n * dim,
                actual: data.len(),
            });
        }
        Ok(FactVectors { n, dim, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Shape {
                what: "fact vector row",
                expected: dim,
                actual: bad.len(),
            });
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
}

/// Trainable parameters: attention projection `w_attn`/`b_attn` (d → 1 per
/// fact) and classifier head `w_cls`/`b_cls`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    pub w_attn: Vec<T>,
    pub b_attn: T,
    pub w_cls: Vec<T>,
    pub b_cls: T,
}

impl<T: Scalar> ClassifierParams<T> {
    pub fn new(w_attn: Vec<T>, b_attn: T, w_cls: Vec<T>, b_cls: T) -> Result<Self> {
        let p = ClassifierParams {
            w_attn,
            b_attn,
            w_cls,
            b_cls,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(dim: usize) -> Self {
        ClassifierParams {
            w_attn: vec![T::zero(); dim],
            b_attn: T::zero(),
            w_cls: vec![T::zero(); dim],
            b_cls: T::zero(),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_attn.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_attn.is_empty() || self.w_cls.len() != self.w_attn.len() {
            return Err(Error::Shape {
                what: "classifier weights",
                expected: self.w_attn.len(),
                actual: self.w_cls.len(),
            });
        }
        let finite = self.w_attn.iter().chain(&self.w_cls).all(|v| v.is_finite())
            && self.b_attn.is_finite()
            && self.b_cls.is_finite();
        if !finite {
            return Err(Error::NonFinite("classifier params"));
        }
        Ok(())
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        self.validate()?;
        if self.dim() != dim {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: dim,
                context: "classifier params vs fact vectors".into(),
            });
        }
        Ok(())
    }

    /// Flattened view in the order `w_attn, b_attn, w_cls, b_cls`.
    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(2 * self.dim() + 2);
        v.extend_from_slice(&self.w_attn);
        v.push(self.b_attn);
        v.extend_from_slice(&self.w_cls);
        v.push(self.b_cls);
        v
    }

    pub fn from_flat(dim: usize, flat: &[T]) -> Result<Self> {
        if flat.len() != 2 * dim + 2 {
            return Err(Error::Shape {
                what: "flat params",
                expected: 2 * dim + 2,
                actual: flat.len(),
            });
        }
        Ok(ClassifierParams {
            w_attn: flat[..dim].to_vec(),
            b_attn: flat[dim],
            w_cls: flat[dim + 1..2 * dim + 1].to_vec(),
            b_cls: flat[2 * dim + 1],
        })
    }

    /// Name of flat coordinate `i`, for diagnostics.
    pub fn flat_name(dim: usize, i: usize) -> &'static str {
        match i {
            _ if i < dim => "w_attn",
            _ if i == dim => "b_attn",
            _ if i < 2 * dim + 1 => "w_cls",
            _ => "b_cls",
        }
    }

    pub fn cast<U: Scalar>(&self) -> ClassifierParams<U> {
        let c = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
        ClassifierParams {
            w_attn: c(&self.w_attn),
            b_attn: U::of(self.b_attn.as_f64()),
            w_cls: c(&self.w_cls),
            b_cls: U::of(self.b_cls.as_f64()),
        }
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub fact_vectors: FactVectors<T>,
    /// Pre-softmax attention scores, one per fact.
    pub attention_logits: Vec<T>,
    pub attention_weights: Vec<T>,
    pub pooled: Vec<T>,
    /// Classifier pre-activation.
    pub logit: T,
    pub prob: T,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn is_weird(&self) -> bool {
        self.prob >= T::of(0.5)
    }
}

/// Masked token average per fact: `Σ_j m_ij H_ij / (Σ_j m_ij + ε)`.
pub fn mean_pool<T: Scalar>(block: &EmbeddingBlock<T>, epsilon: T) -> Result<FactVectors<T>> {
    if !(epsilon > T::zero() && epsilon.is_finite()) {
        return Err(Error::InvalidEpsilon(epsilon.as_f64()));
    }
    let (n, t, d) = (block.n_facts(), block.n_tokens(), block.dim());
    if block.mask().len() != n * t || block.data().len() != n * t * d {
        return Err(Error::Shape {
            what: "embedding block",
            expected: n * t * d,
            actual: block.data().len(),
        });
    }
    let mut out = vec![T::zero(); n * d];
    for (i, acc) in out.chunks_exact_mut(d).enumerate() {
        let mut count = T::zero();
        for j in 0..t {
            if !block.is_unmasked(i, j) {
                continue;
            }
            count = count + T::one();
            for (a, &h) in acc.iter_mut().zip(block.token(i, j)) {
                *a = *a + h;
            }
        }
        let denom = count + epsilon;
        for a in acc.iter_mut() {
            *a = *a / denom;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pooled fact vectors"));
    }
    FactVectors::new(n, d, out)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&s| (s - max).exp()).collect();
    // summing in ascending order makes the normaliser independent of fact
    // order, so permuting facts permutes the weights bit for bit
    let mut sorted = exps.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let total = sum(sorted);
    exps.into_iter().map(|e| e / total).collect()
}

/// Attention logits `s_i = w_attn·V_i + b_attn` and their softmax.
pub fn attention_weights<T: Scalar>(
    vectors: &FactVectors<T>,
    params: &ClassifierParams<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    params.check_dim(vectors.dim())?;
    let logits: Vec<T> = vectors
        .rows()
        .map(|v| dot(&params.w_attn, v) + params.b_attn)
        .collect();
    if logits.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("attention logits"));
    }
    let weights = softmax(&logits);
    if weights.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("attention weights"));
    }
    Ok((logits, weights))
}

/// Weighted fact average `Σ A_i V_i / Σ A_i`. The explicit normalisation keeps
/// this valid for weight sources other than softmax.
pub fn attention_pool<T: Scalar>(vectors: &FactVectors<T>, weights: &[T]) -> Result<Vec<T>> {
    if weights.len() != vectors.n() {
        return Err(Error::Shape {
            what: "attention weights",
            expected: vectors.n(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|&a| a.is_nan() || a < T::zero()) {
        return Err(Error::NegativeWeight);
    }
    let total = sum(weights.iter().copied());
    if total.is_nan() || total <= T::zero() || !total.is_finite() {
        return Err(Error::ZeroWeightSum);
    }
    let mut pooled = vec![T::zero(); vectors.dim()];
    for (row, &a) in vectors.rows().zip(weights) {
        for (p, &v) in pooled.iter_mut().zip(row) {
            *p = *p + a * v;
        }
    }
    for p in pooled.iter_mut() {
        *p = *p / total;
    }
    Ok(pooled)
}

/// Logistic function, branch-selected to avoid overflow and kept strictly
/// inside (0, 1).
pub fn sigmoid<T: Scalar>(z: T) -> T {
    let p = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::of(2.0);
    p.max(T::min_positive_value()).min(hi)
}

/// Violation probability `σ(w_cls·v + b_cls)`; also returns the pre-activation.
pub fn classify_logit<T: Scalar>(pooled: &[T], params: &ClassifierParams<T>) -> Result<(T, T)> {
    params.check_dim(pooled.len())?;
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pooled representation"));
    }
    let z = dot(&params.w_cls, pooled) + params.b_cls;
    if !z.is_finite() {
        return Err(Error::NonFinite("classifier logit"));
    }
    Ok((z, sigmoid(z)))
}

pub fn classify<T: Scalar>(pooled: &[T], params: &ClassifierParams<T>) -> Result<T> {
    classify_logit(pooled, params).map(|(_, p)| p)
}

/// Attention, pooling and classification stages without the fact vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<T> {
    pub attention_logits: Vec<T>,
    pub attention_weights: Vec<T>,
    pub pooled: Vec<T>,
    pub logit: T,
    pub prob: T,
}

pub fn forward_head<T: Scalar>(
    vectors: &FactVectors<T>,
    params: &ClassifierParams<T>,
) -> Result<HeadOutput<T>> {
    let (attention_logits, attention_weights) = attention_weights(vectors, params)?;
    let pooled = attention_pool(vectors, &attention_weights)?;
    let (logit, prob) = classify_logit(&pooled, params)?;
    Ok(HeadOutput {
        attention_logits,
        attention_weights,
        pooled,
        logit,
        prob,
    })
}

/// Runs attention, pooling and classification on precomputed fact vectors.
pub fn forward_vectors<T: Scalar>(
    vectors: FactVectors<T>,
    params: &ClassifierParams<T>,
) -> Result<ForwardTrace<T>> {
    let h = forward_head(&vectors, params)?;
    Ok(ForwardTrace {
        fact_vectors: vectors,
        attention_logits: h.attention_logits,
        attention_weights: h.attention_weights,
        pooled: h.pooled,
        logit: h.logit,
        prob: h.prob,
    })
}

pub fn forward<T: Scalar>(
    block: &EmbeddingBlock<T>,
    params: &ClassifierParams<T>,
    epsilon: T,
) -> Result<ForwardTrace<T>> {
    params.check_dim(block.dim())?;
    forward_vectors(mean_pool(block, epsilon)?, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankedFact {
    pub fact_index: usize,
    pub attention_logit: f64,
}

/// Order fact indices by descending logit, ties by ascending index.
pub fn rank_by_logit<T: Scalar>(logits: &[T]) -> Vec<RankedFact> {
    let mut ranked: Vec<RankedFact> = logits
        .iter()
        .enumerate()
        .map(|(i, s)| RankedFact {
            fact_index: i,
            attention_logit: s.as_f64(),
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.attention_logit
            .partial_cmp(&a.attention_logit)
            .unwrap_or(Ordering::Equal)
            .then(a.fact_index.cmp(&b.fact_index))
    });
    ranked
}

/// Facts of one image ranked by pre-softmax attention logit.
pub fn rank_facts<T: Scalar>(
    block: &EmbeddingBlock<T>,
    params: &ClassifierParams<T>,
    epsilon: T,
) -> Result<Vec<RankedFact>> {
    let trace = forward(block, params, epsilon)?;
    Ok(rank_by_logit(&trace.attention_logits))
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsFile {
    dim: usize,
    #[serde(rename = "W_a")]
    w_a: Vec<f64>,
    b_a: f64,
    #[serde(rename = "W_c")]
    w_c: Vec<f64>,
    b_c: f64,
    epsilon: f64,
}

/// JSON form `{"dim","W_a","b_a","W_c","b_c","epsilon"}`.
pub fn params_to_json<T: Scalar>(params: &ClassifierParams<T>, epsilon: f64) -> Result<String> {
    let to = |v: &[T]| v.iter().map(|x| x.as_f64()).collect();
    let file = ParamsFile {
        dim: params.dim(),
        w_a: to(&params.w_attn),
        b_a: params.b_attn.as_f64(),
        w_c: to(&params.w_cls),
        b_c: params.b_cls.as_f64(),
        epsilon,
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::ParamsFormat(e.to_string()))
}

pub fn params_from_json<T: Scalar>(json: &str) -> Result<(ClassifierParams<T>, f64)> {
    let f: ParamsFile = serde_json::from_str(json).map_err(|e| Error::ParamsFormat(e.to_string()))?;
    if f.w_a.len() != f.dim || f.w_c.len() != f.dim {
        return Err(Error::ParamsFormat(format!(
            "dim {} but W_a has {} and W_c has {} entries",
            f.dim,
            f.w_a.len(),
            f.w_c.len()
        )));
    }
    if !(f.epsilon > 0.0 && f.epsilon.is_finite()) {
        return Err(Error::InvalidEpsilon(f.epsilon));
    }
    let of = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect();
    let p = ClassifierParams::new(of(&f.w_a), T::of(f.b_a), of(&f.w_c), T::of(f.b_c))?;
    Ok((p, f.epsilon))
}

pub fn save_params<T: Scalar>(params: &ClassifierParams<T>, epsilon: f64, path: impl AsRef<Path>) -> Result<()> {
    let mut json = params_to_json(params, epsilon)?;
    json.push('\n');
    write_atomic(path.as_ref(), json.as_bytes())
}

pub fn load_params<T: Scalar>(path: impl AsRef<Path>) -> Result<(ClassifierParams<T>, f64)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    params_from_json(&text)
}
