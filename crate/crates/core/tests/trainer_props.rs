mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tlg_core::pooling::*;
use tlg_core::trainer::*;
use tlg_core::Label;

const EPS: f64 = 1e-8;
const H: f64 = 1e-5;

#[test]
fn analytic_gradient_matches_library_finite_differences() {
    let mut r = rng(100);
    for case in 0..100 {
        let b = random_block(&mut r, 6, 12, 16);
        let p = random_params(&mut r, b.dim(), 1.0);
        let label = random_label(&mut r);
        let err = finite_diff_check(&p, &b, label, H, EPS).unwrap();
        assert!(err < 1e-6, "case {case}: rel err {err}");
    }
}

#[test]
fn analytic_gradient_matches_oracle_finite_differences() {
    let mut r = rng(101);
    for case in 0..30 {
        let b = random_block(&mut r, 4, 6, 6);
        let p = random_params(&mut r, b.dim(), 1.0);
        let label = random_label(&mut r);
        let g = grad(&p, &b, label, EPS).unwrap().to_flat();
        let fd = oracle_fd_grad(&b, &p, label, EPS, H);
        for (i, (a, f)) in g.iter().zip(&fd).enumerate() {
            let rel = (a - f).abs() / a.abs().max(f.abs()).max(FD_REL_FLOOR);
            assert!(rel < 1e-7, "case {case} coord {i}: {a} vs {f}");
        }
    }
}

#[test]
fn attention_bias_gradient_vanishes() {
    let mut r = rng(102);
    for _ in 0..200 {
        let b = random_block(&mut r, 6, 8, 8);
        let p = random_params(&mut r, b.dim(), 2.0);
        let g = grad(&p, &b, random_label(&mut r), EPS).unwrap();
        assert!(g.b_attn.abs() < 1e-14, "{}", g.b_attn);
    }
}

#[test]
fn bias_gradient_is_prob_minus_target() {
    let mut r = rng(103);
    for _ in 0..100 {
        let b = random_block(&mut r, 5, 6, 7);
        let p = random_params(&mut r, b.dim(), 1.0);
        let label = random_label(&mut r);
        let prob = forward(&b, &p, EPS).unwrap().prob;
        let g = grad(&p, &b, label, EPS).unwrap();
        assert_eq!(g.b_cls, prob - label.target());
    }
}

#[test]
fn training_is_deterministic() {
    let mut r = rng(104);
    let ds = random_dataset(&mut r, 40, 3, 5, 6);
    let cfg = TrainConfig { epochs: 20, seed: 77, ..Default::default() };
    let a = train(&ds, &cfg).unwrap();
    let b = train(&ds, &cfg).unwrap();
    assert_eq!(params_to_json(&a.params, EPS).unwrap(), params_to_json(&b.params, EPS).unwrap());
    assert_eq!(a.history, b.history);
    let c = train(&ds, &cfg.with_seed(78)).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn single_sample_is_memorised() {
    let mut r = rng(105);
    for label in [Label::Weird, Label::Normal] {
        let ds = random_dataset(&mut r, 1, 4, 6, 8).with_labels(&[label]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.5,
            epochs: 2000,
            batch_size: 1,
            l2_penalty: 0.0,
            ..Default::default()
        };
        let t = train(&ds, &cfg).unwrap();
        let losses: Vec<f64> = t.history.iter().map(|h| h.mean_loss).collect();
        assert!(*losses.last().unwrap() < 1e-3, "final loss {}", losses.last().unwrap());
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
        }
        assert_eq!(t.history.last().unwrap().train_accuracy, 1.0);
    }
}

#[test]
fn full_batch_small_step_never_increases_objective() {
    let mut r = rng(106);
    let ds = random_dataset(&mut r, 30, 4, 5, 6);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 300,
        batch_size: 30,
        l2_penalty: 0.0,
        ..Default::default()
    };
    let t = train(&ds, &cfg).unwrap();
    for w in t.history.windows(2) {
        assert!(w[1].mean_loss <= w[0].mean_loss + 1e-14, "epoch {}: {} -> {}", w[1].epoch, w[0].mean_loss, w[1].mean_loss);
    }
}

/// One full-batch epoch reproduces `θ − lr·(mean grad + l2·w)` computed here
/// from the per-sample gradients.
#[test]
fn one_epoch_matches_manual_update() {
    let mut r = rng(107);
    let ds = random_dataset(&mut r, 12, 3, 4, 5);
    for l2 in [0.0, 0.3] {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 12,
            l2_penalty: l2,
            seed: 9,
            ..Default::default()
        };
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let p0: ClassifierParams<f64> = init_params(ds.dim().unwrap(), cfg.weight_init_scale, &mut init_rng);
        let d = p0.dim();
        let mut sum = vec![0.0; 2 * d + 2];
        for s in ds.samples() {
            let g = grad(&p0, &s.block, s.facts.label, EPS).unwrap().to_flat();
            for (a, b) in sum.iter_mut().zip(g) {
                *a += b;
            }
        }
        let flat0 = p0.to_flat();
        let is_bias = |i: usize| i == d || i == 2 * d + 1;
        let want: Vec<f64> = (0..flat0.len())
            .map(|i| {
                let pen = if is_bias(i) { 0.0 } else { l2 * flat0[i] };
                flat0[i] - cfg.learning_rate * (sum[i] / 12.0 + pen)
            })
            .collect();
        let got = train(&ds, &cfg).unwrap().params.to_flat();
        assert!(max_abs_diff(&got, &want) < 1e-13, "l2 = {l2}");
    }
}

#[test]
fn initialisation_bounds() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for d in [1usize, 4, 32, 300] {
        let p: ClassifierParams<f64> = init_params(d, 1.0, &mut r);
        let bound = 1.0 / (d as f64).sqrt();
        assert!(p.w_attn.iter().chain(&p.w_cls).all(|w| w.abs() <= bound));
        assert_eq!((p.b_attn, p.b_cls), (0.0, 0.0));
    }
    let z: ClassifierParams<f64> = init_params(3, 0.0, &mut r);
    assert_eq!(z, ClassifierParams::zeros(3));
}

#[test]
fn f32_training_runs() {
    let mut r = rng(108);
    let ds = random_dataset(&mut r, 20, 3, 4, 5);
    let samples: Vec<_> = ds
        .samples()
        .iter()
        .map(|s| tlg_core::interchange::Sample { facts: s.facts.clone(), block: s.block.cast::<f32>() })
        .collect();
    let ds32 = tlg_core::interchange::Dataset::new("toy", samples).unwrap();
    let cfg = TrainConfig { epochs: 10, ..Default::default() };
    let a = train(&ds, &cfg).unwrap();
    let b = train(&ds32, &cfg).unwrap();
    let diff = max_abs_diff(&a.params.to_flat(), &b.params.cast::<f64>().to_flat());
    assert!(diff < 1e-3, "{diff}");
}
