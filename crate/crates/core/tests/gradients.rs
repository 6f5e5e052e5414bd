//! Finite-difference checks for every differentiable op, the latent path and
//! the full training objective.

mod common;

use common::grad::{end_to_end_rel_error, op_reports, toy_learner};
use pcll::model::{reparameterize, GaussianVars};
use pcll::tensor::Graph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_central_differences() {
    for (name, report) in op_reports() {
        assert!(
            report.rel_error < 1e-4,
            "{name}: relative error {:.3e} (analytic {:.3e}, numeric {:.3e})",
            report.rel_error,
            report.analytic_norm,
            report.numeric_norm
        );
        assert!(report.analytic_norm > 0.0, "{name}: zero gradient");
    }
}

#[test]
fn reparameterized_sample_has_identity_mean_jacobian() {
    let mut g = Graph::<f64>::new();
    let m = g.row_leaf(vec![0.2, -0.4, 0.9]);
    let lv = g.row_leaf(vec![0.1, 0.5, -0.3]);
    let z = reparameterize(&mut g, GaussianVars { mu: m, logvar: lv }, &[0.4, -1.3, 0.9]).unwrap();
    for i in 0..3 {
        let pick = g.slice_cols(z, i, i + 1).unwrap();
        let grads = g.gradients(pick).unwrap();
        let want: Vec<f64> = (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect();
        assert_eq!(grads.get(m).unwrap(), &want[..]);
    }
}

#[test]
fn end_to_end_batch_gradient() {
    let start = std::time::Instant::now();
    let rel = end_to_end_rel_error();
    assert!(rel < 1e-3, "end-to-end relative error {rel:.3e}");
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn backward_twice_doubles_parameter_gradients() {
    let (mut learner, items) = toy_learner();
    let teacher = learner.model().clone();
    let eps = vec![vec![0.1, 0.2, 0.3], vec![0.0, -0.1, 0.4]];
    let mut g = Graph::new();
    let loss = learner.batch_loss(&mut g, &items, Some(&teacher), 1.0, &eps).unwrap();
    learner.model_mut().params_mut().zero_grad();
    g.backward(loss, learner.model_mut().params_mut()).unwrap();
    let once: Vec<Vec<f64>> = learner
        .model()
        .params()
        .iter()
        .map(|(_, _, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    g.backward(loss, learner.model_mut().params_mut()).unwrap();
    for ((_, name, t), first) in learner.model().params().iter().zip(&once) {
        let twice = t.grad().map(<[f64]>::to_vec).unwrap_or_default();
        for (a, b) in twice.iter().zip(first) {
            assert_eq!(*a, 2.0 * b, "{name}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f32>::new();
        let x = g.leaf(rows, cols, (0..rows * cols).map(|_| rng.random_range(-20.0..20.0)).collect()).unwrap();
        let s = g.softmax(x);
        for r in g.value(s).chunks(cols) {
            let total: f32 = r.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance(rows in 1usize..5, cols in 2usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let raw: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
        // The stabilizing epsilon dominates nearly constant rows.
        for r in raw.chunks(cols) {
            let m = r.iter().sum::<f64>() / cols as f64;
            prop_assume!(r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cols as f64 > 0.05);
        }
        let x = g.leaf(rows, cols, raw).unwrap();
        let n = g.normalize(x);
        for r in g.value(n).chunks(cols) {
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
