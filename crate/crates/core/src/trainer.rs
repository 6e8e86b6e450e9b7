//! Mini-batch gradient descent on binary cross-entropy with closed-form
//! gradients through the pooling classifier.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interchange::{Dataset, EmbeddingBlock, Label};
use crate::pooling::{forward_head, mean_pool, ClassifierParams, FactVectors, DEFAULT_EPSILON};
use crate::scalar::{dot, Scalar};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-12;

/// Lower bound on the denominator of the finite-difference relative error,
/// so coordinates whose true gradient is zero (e.g. the attention bias) are
/// judged on absolute error.
pub const FD_REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub weight_init_scale: f64,
    pub l2_penalty: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 200,
            batch_size: 16,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            weight_init_scale: 1.0,
            l2_penalty: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.weight_init_scale >= 0.0 && self.weight_init_scale.is_finite()) {
            return bad("weight_init_scale must be non-negative");
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return bad("l2_penalty must be non-negative");
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub params: ClassifierParams<T>,
    pub history: Vec<TrainRecord>,
}

pub fn history_to_csv(history: &[TrainRecord]) -> String {
    let mut s = String::from("epoch,mean_loss,train_accuracy\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.mean_loss, r.train_accuracy));
    }
    s
}

pub fn bce_loss<T: Scalar>(prob: T, label: Label) -> T {
    let c = T::of(PROB_CLAMP);
    let p = prob.max(c).min(T::one() - c);
    match label {
        Label::Weird => -p.ln(),
        Label::Normal => -(T::one() - p).ln(),
    }
}

/// Loss and gradient for one sample given its pooled fact vectors.
///
/// The gradient is that of the unclamped cross-entropy, `∂L/∂z = p − y`; it
/// coincides with the clamped loss whenever `p` lies inside the clamp range.
pub fn loss_and_grad_vectors<T: Scalar>(
    params: &ClassifierParams<T>,
    vectors: &FactVectors<T>,
    label: Label,
) -> Result<(T, ClassifierParams<T>)> {
    let tr = forward_head(vectors, params)?;
    let loss = bce_loss(tr.prob, label);
    let dz = tr.prob - T::of(label.target());
    let d = vectors.dim();

    let g_w_cls: Vec<T> = tr.pooled.iter().map(|&v| dz * v).collect();
    let g_pooled: Vec<T> = params.w_cls.iter().map(|&w| dz * w).collect();

    // pooled = Σ A_i V_i / S  =>  ∂pooled/∂A_i = (V_i − pooled) / S
    let total = tr.attention_weights.iter().fold(T::zero(), |a, &b| a + b);
    let g_weights: Vec<T> = vectors
        .rows()
        .map(|row| {
            row.iter()
                .zip(&tr.pooled)
                .zip(&g_pooled)
                .fold(T::zero(), |acc, ((&v, &p), &g)| acc + g * (v - p))
                / total
        })
        .collect();

    // softmax Jacobian: ∂L/∂s_j = A_j (∂L/∂A_j − Σ_i A_i ∂L/∂A_i)
    let mean_g = dot(&tr.attention_weights, &g_weights);
    let g_logits: Vec<T> = tr
        .attention_weights
        .iter()
        .zip(&g_weights)
        .map(|(&a, &g)| a * (g - mean_g))
        .collect();

    let mut g_w_attn = vec![T::zero(); d];
    for (row, &gs) in vectors.rows().zip(&g_logits) {
        for (g, &v) in g_w_attn.iter_mut().zip(row) {
            *g = *g + gs * v;
        }
    }
    let g_b_attn = g_logits.iter().fold(T::zero(), |a, &b| a + b);

    let grad = ClassifierParams {
        w_attn: g_w_attn,
        b_attn: g_b_attn,
        w_cls: g_w_cls,
        b_cls: dz,
    };
    check_finite_grad(&grad)?;
    Ok((loss, grad))
}

fn check_finite_grad<T: Scalar>(g: &ClassifierParams<T>) -> Result<()> {
    let d = g.dim();
    for (i, v) in g.to_flat().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteGradient(ClassifierParams::<T>::flat_name(d, i)));
        }
    }
    Ok(())
}

/// Analytic gradient of `bce_loss ∘ forward` for one sample.
pub fn grad<T: Scalar>(
    params: &ClassifierParams<T>,
    block: &EmbeddingBlock<T>,
    label: Label,
    epsilon: T,
) -> Result<ClassifierParams<T>> {
    let v = mean_pool(block, epsilon)?;
    loss_and_grad_vectors(params, &v, label).map(|(_, g)| g)
}

fn sample_loss<T: Scalar>(
    params: &ClassifierParams<T>,
    vectors: &FactVectors<T>,
    label: Label,
) -> Result<T> {
    Ok(bce_loss(forward_head(vectors, params)?.prob, label))
}

/// Worst relative deviation between [`grad`] and central differences
/// `(L(θ+h) − L(θ−h)) / 2h` over every parameter coordinate.
pub fn finite_diff_check<T: Scalar>(
    params: &ClassifierParams<T>,
    block: &EmbeddingBlock<T>,
    label: Label,
    h: T,
    epsilon: T,
) -> Result<T> {
    let v = mean_pool(block, epsilon)?;
    let (_, g) = loss_and_grad_vectors(params, &v, label)?;
    let analytic = g.to_flat();
    let base = params.to_flat();
    let d = params.dim();
    let two = T::of(2.0);
    let floor = T::of(FD_REL_FLOOR);
    let mut worst = T::zero();
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        plus[i] = plus[i] + h;
        let mut minus = base.clone();
        minus[i] = minus[i] - h;
        let lp = sample_loss(&ClassifierParams::from_flat(d, &plus)?, &v, label)?;
        let lm = sample_loss(&ClassifierParams::from_flat(d, &minus)?, &v, label)?;
        let numeric = (lp - lm) / (two * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Initial parameters: weights uniform in `±scale/√d`, biases zero.
pub fn init_params<T: Scalar>(dim: usize, scale: f64, rng: &mut impl Rng) -> ClassifierParams<T> {
    let s = scale / (dim as f64).sqrt();
    let mut draw = || {
        if s > 0.0 {
            T::of(rng.gen_range(-s..=s))
        } else {
            T::zero()
        }
    };
    let w_attn = (0..dim).map(|_| draw()).collect();
    let w_cls = (0..dim).map(|_| draw()).collect();
    ClassifierParams {
        w_attn,
        b_attn: T::zero(),
        w_cls,
        b_cls: T::zero(),
    }
}

/// Pooled fact vectors plus label for every sample; pooling does not depend on
/// trainable parameters so it is computed once.
pub fn pooled_samples<T: Scalar>(dataset: &Dataset<T>, epsilon: T) -> Result<Vec<(FactVectors<T>, Label)>> {
    dataset
        .samples()
        .iter()
        .map(|s| Ok((mean_pool(&s.block, epsilon)?, s.facts.label)))
        .collect()
}

/// Mean cross-entropy and accuracy of `params` on pooled samples.
pub fn evaluate_pooled<T: Scalar>(
    params: &ClassifierParams<T>,
    samples: &[(FactVectors<T>, Label)],
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (v, label) in samples {
        let tr = forward_head(v, params)?;
        loss += bce_loss(tr.prob, *label).as_f64();
        if Label::from_prob(tr.prob.as_f64()) == *label {
            correct += 1;
        }
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Cross-entropy plus `½·l2·(‖w_attn‖² + ‖w_cls‖²)`: the quantity whose
/// gradient the update step follows.
pub fn objective<T: Scalar>(
    params: &ClassifierParams<T>,
    samples: &[(FactVectors<T>, Label)],
    l2_penalty: f64,
) -> Result<f64> {
    let (loss, _) = evaluate_pooled(params, samples)?;
    let sq = |w: &[T]| w.iter().map(|x| x.as_f64().powi(2)).sum::<f64>();
    Ok(loss + 0.5 * l2_penalty * (sq(&params.w_attn) + sq(&params.w_cls)))
}

/// Fits classifier parameters.
///
/// Deterministic in `(dataset order, config)`: initialisation and every
/// per-epoch shuffle draw from one ChaCha8 stream seeded by `config.seed`.
/// Each history record is measured on the full training set with the params
/// reached at the end of that epoch.
pub fn train<T: Scalar>(dataset: &Dataset<T>, config: &TrainConfig) -> Result<Trained<T>> {
    config.validate()?;
    let dim = dataset.dim().ok_or(Error::EmptyDataset)?;
    let samples = pooled_samples(dataset, T::of(config.epsilon))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init_params::<T>(dim, config.weight_init_scale, &mut rng);
    let lr = T::of(config.learning_rate);
    let l2 = T::of(config.l2_penalty);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut acc = ClassifierParams::<T>::zeros(dim);
            for &i in batch {
                let (v, label) = &samples[i];
                let (_, g) = loss_and_grad_vectors(&params, v, *label)?;
                add_assign(&mut acc, &g);
            }
            let inv = T::one() / T::of_usize(batch.len());
            step(&mut params, &acc, inv, l2, lr);
        }
        params.validate().map_err(|_| Error::NonFiniteGradient("update"))?;
        let (mean_loss, train_accuracy) = evaluate_pooled(&params, &samples)?;
        history.push(TrainRecord {
            epoch,
            mean_loss,
            train_accuracy,
        });
    }
    Ok(Trained { params, history })
}

fn add_assign<T: Scalar>(acc: &mut ClassifierParams<T>, g: &ClassifierParams<T>) {
    for (a, &b) in acc.w_attn.iter_mut().zip(&g.w_attn) {
        *a = *a + b;
    }
    for (a, &b) in acc.w_cls.iter_mut().zip(&g.w_cls) {
        *a = *a + b;
    }
    acc.b_attn = acc.b_attn + g.b_attn;
    acc.b_cls = acc.b_cls + g.b_cls;
}

/// `θ ← θ − lr·(mean_grad + l2·θ)`, with the penalty applied to weights only.
fn step<T: Scalar>(params: &mut ClassifierParams<T>, sum_grad: &ClassifierParams<T>, inv_n: T, l2: T, lr: T) {
    for (w, &g) in params.w_attn.iter_mut().zip(&sum_grad.w_attn) {
        *w = *w - lr * (g * inv_n + l2 * *w);
    }
    for (w, &g) in params.w_cls.iter_mut().zip(&sum_grad.w_cls) {
        *w = *w - lr * (g * inv_n + l2 * *w);
    }
    params.b_attn = params.b_attn - lr * sum_grad.b_attn * inv_n;
    params.b_cls = params.b_cls - lr * sum_grad.b_cls * inv_n;
}
