//! Reference implementations written as plain loops. The extended-precision
//! paths run on 256-bit binary floats; nothing here calls into the library's
//! math.

#![allow(dead_code, clippy::needless_range_loop)]

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use astro_float::{BigFloat, Consts, RoundingMode};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tlg_core::interchange::{Dataset, EmbeddingBlock, Sample};
use tlg_core::pooling::ClassifierParams;
use tlg_core::{FactSet, Label};

const PREC: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

thread_local! {
    static CONSTS: RefCell<Consts> = RefCell::new(Consts::new().expect("astro-float constants"));
}

/// 256-bit float with arithmetic operators.
#[derive(Clone, Debug)]
pub struct Hp(BigFloat);

impl Hp {
    pub fn exp(&self) -> Hp {
        CONSTS.with(|c| Hp(self.0.exp(PREC, RM, &mut c.borrow_mut())))
    }
    pub fn ln(&self) -> Hp {
        CONSTS.with(|c| Hp(self.0.ln(PREC, RM, &mut c.borrow_mut())))
    }
}

macro_rules! hp_op {
    ($tr:ident, $m:ident) => {
        impl $tr for Hp {
            type Output = Hp;
            fn $m(self, o: Hp) -> Hp {
                Hp(self.0.$m(&o.0, PREC, RM))
            }
        }
    };
}
hp_op!(Add, add);
hp_op!(Sub, sub);
hp_op!(Mul, mul);
hp_op!(Div, div);

impl Neg for Hp {
    type Output = Hp;
    fn neg(self) -> Hp {
        Hp(self.0.neg())
    }
}

pub fn hp(x: f64) -> Hp {
    Hp(BigFloat::from_f64(x, PREC))
}

/// Correctly rounded conversion back to f64 (via decimal text).
pub fn lo(x: Hp) -> f64 {
    format!("{}", x.0).parse().expect("decimal rendering of a finite value")
}

pub struct OracleTrace {
    pub vectors: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub pooled: Vec<f64>,
    pub prob: f64,
}

/// Masked mean per fact, accumulated element by element.
pub fn oracle_mean_pool<F: Float>(block: &EmbeddingBlock<f64>, eps: F, conv: impl Fn(f64) -> F) -> Vec<Vec<F>> {
    let (n, t, d) = (block.n_facts(), block.n_tokens(), block.dim());
    let mut out = vec![vec![F::zero(); d]; n];
    for i in 0..n {
        let mut count = F::zero();
        for j in 0..t {
            count = count + conv(block.mask()[i * t + j] as f64);
        }
        for k in 0..d {
            let mut acc = F::zero();
            for j in 0..t {
                let m = conv(block.mask()[i * t + j] as f64);
                acc = acc + m * conv(block.data()[(i * t + j) * d + k]);
            }
            out[i][k] = acc / (count + eps);
        }
    }
    out
}

fn oracle_mean_pool_hp(block: &EmbeddingBlock<f64>, eps: f64) -> Vec<Vec<Hp>> {
    let (n, t, d) = (block.n_facts(), block.n_tokens(), block.dim());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut count = hp(0.0);
        for j in 0..t {
            count = count + hp(block.mask()[i * t + j] as f64);
        }
        let denom = count + hp(eps);
        let mut row = Vec::with_capacity(d);
        for k in 0..d {
            let mut acc = hp(0.0);
            for j in 0..t {
                let m = hp(block.mask()[i * t + j] as f64);
                acc = acc + m * hp(block.data()[(i * t + j) * d + k]);
            }
            row.push(acc / denom.clone());
        }
        out.push(row);
    }
    out
}

pub fn oracle_forward(block: &EmbeddingBlock<f64>, p: &ClassifierParams<f64>, eps: f64) -> OracleTrace {
    let v = oracle_mean_pool_hp(block, eps);
    oracle_head(&v, p).0
}

pub fn oracle_head_f64(vectors: &[Vec<f64>], p: &ClassifierParams<f64>) -> OracleTrace {
    let v: Vec<Vec<Hp>> = vectors.iter().map(|r| r.iter().map(|&x| hp(x)).collect()).collect();
    oracle_head(&v, p).0
}

fn oracle_head(v: &[Vec<Hp>], p: &ClassifierParams<f64>) -> (OracleTrace, Hp) {
    let n = v.len();
    let d = v[0].len();
    let mut logits = vec![hp(0.0); n];
    for i in 0..n {
        let mut s = hp(p.b_attn);
        for k in 0..d {
            s = s + hp(p.w_attn[k]) * v[i][k].clone();
        }
        logits[i] = s;
    }
    let weights = oracle_softmax(&logits);
    let mut wsum = hp(0.0);
    for w in &weights {
        wsum = wsum + w.clone();
    }
    let mut pooled = vec![hp(0.0); d];
    for k in 0..d {
        let mut acc = hp(0.0);
        for i in 0..n {
            acc = acc + weights[i].clone() * v[i][k].clone();
        }
        pooled[k] = acc / wsum.clone();
    }
    let mut z = hp(p.b_cls);
    for k in 0..d {
        z = z + hp(p.w_cls[k]) * pooled[k].clone();
    }
    let prob = oracle_sigmoid(z);
    let lo_vec = |xs: &[Hp]| xs.iter().map(|x| lo(x.clone())).collect::<Vec<f64>>();
    let trace = OracleTrace {
        vectors: v.iter().map(|r| lo_vec(r)).collect(),
        logits: lo_vec(&logits),
        weights: lo_vec(&weights),
        pooled: lo_vec(&pooled),
        prob: lo(prob.clone()),
    };
    (trace, prob)
}

/// Softmax by shifting with the first logit (exact shift invariance), so it
/// does not share the library's max-subtraction path.
pub fn oracle_softmax(logits: &[Hp]) -> Vec<Hp> {
    let shift = logits[0].clone();
    let exps: Vec<Hp> = logits.iter().map(|s| (s.clone() - shift.clone()).exp()).collect();
    let mut total = hp(0.0);
    for e in &exps {
        total = total + e.clone();
    }
    exps.into_iter().map(|e| e / total.clone()).collect()
}

pub fn oracle_sigmoid(z: Hp) -> Hp {
    hp(1.0) / (hp(1.0) + (-z).exp())
}

pub fn oracle_bce(prob: f64, label: Label) -> f64 {
    let p = prob.clamp(1e-12, 1.0 - 1e-12);
    let p = hp(p);
    lo(match label {
        Label::Weird => -(p.ln()),
        Label::Normal => -((hp(1.0) - p).ln()),
    })
}

/// Loss of one sample computed entirely by the oracle (unclamped).
pub fn oracle_loss(block: &EmbeddingBlock<f64>, p: &ClassifierParams<f64>, label: Label, eps: f64) -> Hp {
    let v = oracle_mean_pool_hp(block, eps);
    let (_, prob) = oracle_head(&v, p);
    match label {
        Label::Weird => -(prob.ln()),
        Label::Normal => -((hp(1.0) - prob).ln()),
    }
}

/// Central finite differences of [`oracle_loss`] for every parameter.
pub fn oracle_fd_grad(block: &EmbeddingBlock<f64>, p: &ClassifierParams<f64>, label: Label, eps: f64, h: f64) -> Vec<f64> {
    let base = p.to_flat();
    let d = p.dim();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let lp = oracle_loss(block, &ClassifierParams::from_flat(d, &plus).unwrap(), label, eps);
            let lm = oracle_loss(block, &ClassifierParams::from_flat(d, &minus).unwrap(), label, eps);
            // the perturbation is exactly representable, so divide by the true step
            let step = hp(plus[i]) - hp(minus[i]);
            lo((lp - lm) / step)
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random valid block with the given shape bounds (each row keeps at least
/// one unmasked token).
pub fn random_block(rng: &mut impl Rng, max_n: usize, max_t: usize, max_d: usize) -> EmbeddingBlock<f64> {
    let n = rng.gen_range(1..=max_n);
    let t = rng.gen_range(1..=max_t);
    let d = rng.gen_range(1..=max_d);
    random_block_shape(rng, n, t, d)
}

pub fn random_block_shape(rng: &mut impl Rng, n: usize, t: usize, d: usize) -> EmbeddingBlock<f64> {
    let mut mask = vec![0u8; n * t];
    for i in 0..n {
        for j in 0..t {
            mask[i * t + j] = rng.gen_bool(0.7) as u8;
        }
        let keep = rng.gen_range(0..t);
        mask[i * t + keep] = 1;
    }
    let data = (0..n * t * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    EmbeddingBlock::new("r", n, t, d, mask, data).unwrap()
}

pub fn random_params(rng: &mut impl Rng, d: usize, scale: f64) -> ClassifierParams<f64> {
    let mut v = || rng.gen_range(-scale..scale);
    let w_attn = (0..d).map(|_| v()).collect();
    let b_attn = v();
    let w_cls = (0..d).map(|_| v()).collect();
    let b_cls = v();
    ClassifierParams::new(w_attn, b_attn, w_cls, b_cls).unwrap()
}

pub fn random_label(rng: &mut impl Rng) -> Label {
    if rng.gen_bool(0.5) {
        Label::Weird
    } else {
        Label::Normal
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// LCS by exhaustive recursion with memo-free brute force on short inputs.
pub fn brute_lcs(a: &[&str], b: &[&str]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    if a[0] == b[0] {
        1 + brute_lcs(&a[1..], &b[1..])
    } else {
        brute_lcs(&a[1..], b).max(brute_lcs(a, &b[1..]))
    }
}

/// Dataset of random blocks with fixed shape and random labels; ids `s000…`.
pub fn random_dataset(rng: &mut impl Rng, n: usize, n_facts: usize, t: usize, d: usize) -> Dataset<f64> {
    let samples = (0..n)
        .map(|i| {
            let id = format!("s{i:03}");
            let block = random_block_shape(rng, n_facts, t, d).with_image_id(id.clone());
            let facts = FactSet {
                image_id: id,
                label: random_label(rng),
                pair_id: None,
                dataset_tag: "toy".into(),
                facts: (0..n_facts).map(|k| format!("fact {k}")).collect(),
            };
            Sample { facts, block }
        })
        .collect();
    Dataset::new("toy", samples).unwrap()
}
