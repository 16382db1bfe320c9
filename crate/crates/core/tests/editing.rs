//! Edit objective, optimizer, and bundle-level guarantees.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustedit_core::editing::{
    capture_targets, edit_tokens, grad_wv, optimize, total_loss, total_loss_f64, EditConfig,
    EditTargets, StopReason,
};
use robustedit_core::model::{forward, mlp_down_name, seeded_random_model, Batch, ModelConfig};
use robustedit_core::Matrix;

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn rand_targets(rng: &mut ChaCha8Rng, n: usize, f: usize, d: usize) -> EditTargets {
    EditTargets {
        h_target: rand_matrix(rng, n, d),
        h_prev_ori: rand_matrix(rng, n, d),
        h_prev_pert: rand_matrix(rng, n, d),
        a_ori: rand_matrix(rng, n, f),
        a_pert: rand_matrix(rng, n, f),
    }
}

fn model() -> robustedit_core::ModelBundle {
    seeded_random_model(&ModelConfig::byte_level(3, 2, 16, 32, 48), 4).unwrap()
}

#[test]
fn loss_matches_direct_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = rand_targets(&mut rng, 3, 5, 4);
    let w = rand_matrix(&mut rng, 5, 4);
    let mse = |prev: &Matrix, a: &Matrix| -> f64 {
        let mut s = 0.0;
        for r in 0..3 {
            for j in 0..4 {
                let h: f64 = f64::from(prev.get(r, j))
                    + (0..5).map(|i| f64::from(a.get(r, i)) * f64::from(w.get(i, j))).sum::<f64>();
                s += (h - f64::from(t.h_target.get(r, j))).powi(2);
            }
        }
        s / 3.0
    };
    let l = total_loss(&w, &t, 0.5).unwrap();
    let (al, pr) = (mse(&t.h_prev_pert, &t.a_pert), mse(&t.h_prev_ori, &t.a_ori));
    assert!((l.alignment - al).abs() <= 1e-5 * al);
    assert!((l.preservation - pr).abs() <= 1e-5 * pr);
    assert_eq!(l.total, l.alignment + 0.5 * l.preservation);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn gradient_matches_central_differences(
        seed in any::<u64>(),
        n in 1usize..5, f in 1usize..8, d in 1usize..6,
        li in 0usize..4,
    ) {
        let lambda = [0.0, 0.5, 1.0, 10.0][li];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rand_targets(&mut rng, n, f, d);
        let w = rand_matrix(&mut rng, f, d);
        let g = grad_wv(&w, &t, lambda).unwrap();
        let w64: Vec<f64> = w.data().iter().map(|&v| f64::from(v)).collect();
        for i in 0..f * d {
            let h = 1e-3 * (1.0 + w64[i].abs());
            let mut p = w64.clone();
            p[i] += h;
            let mut m = w64.clone();
            m[i] -= h;
            let fd = (total_loss_f64(&p, &t, lambda).unwrap().total
                - total_loss_f64(&m, &t, lambda).unwrap().total) / (2.0 * h);
            let an = f64::from(g.data()[i]);
            prop_assert!((an - fd).abs() <= 1e-3 * an.abs().max(fd.abs()).max(1e-6));
        }
    }
}

#[test]
fn step_zero_preservation_is_exactly_zero() {
    let m = model();
    let cfg = m.config.clone();
    let t = capture_targets(&m, &cfg.encode("a + b"), &cfg.encode("a +  b"), 2).unwrap();
    let l = total_loss(m.mlp_down(2).unwrap(), &t, 1.0).unwrap();
    assert_eq!(l.preservation, 0.0);
    assert!(l.alignment > 0.0);
}

#[test]
fn small_steps_never_raise_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let t = rand_targets(&mut rng, 4, 6, 3);
        let w = rand_matrix(&mut rng, 6, 3);
        // trace of the Hessian bounds its largest eigenvalue
        let tr: f64 = [&t.a_pert, &t.a_ori]
            .iter()
            .map(|a| a.data().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>())
            .sum::<f64>()
            * 2.0
            / 4.0;
        let cfg = EditConfig {
            lambda: 1.0,
            learning_rate: 1.0 / tr,
            max_steps: 200,
            early_stopping_enabled: false,
            ..EditConfig::default()
        };
        let (_, rec) = optimize(&w, &t, 1, &cfg).unwrap();
        let mut prev = rec.initial.total;
        for &v in &rec.total_loss {
            assert!(v <= prev);
            prev = v;
        }
        assert_eq!(rec.steps_taken, 200);
        assert_eq!(rec.stop_reason, StopReason::MaxSteps);
    }
}

#[test]
fn edit_touches_only_the_key_layer_down_projection() {
    let m = model();
    let cfg = m.config.clone();
    for layer in 1..=cfg.n_layers {
        let ec = EditConfig {
            max_steps: 50,
            ..EditConfig::default()
        };
        let (e, rec) = edit_tokens(&m, &cfg.encode("x = 1"), &cfg.encode("X = 1"), layer, &ec).unwrap();
        assert_eq!(rec.key_layer, layer);
        let keep = mlp_down_name(layer);
        let mut changed = false;
        for ((na, a), (_, b)) in m.tensors().iter().zip(e.tensors()) {
            if *na == keep {
                changed = a != &b;
            } else {
                assert_eq!(a.data(), b.data(), "{na} changed");
            }
        }
        assert!(changed, "layer {layer} was not edited");
    }
}

#[test]
fn edit_is_deterministic() {
    let m = model();
    let cfg = m.config.clone();
    let ec = EditConfig::default();
    let (a, ra) = edit_tokens(&m, &cfg.encode("f(x)"), &cfg.encode("f( x)"), 2, &ec).unwrap();
    let (b, rb) = edit_tokens(&m, &cfg.encode("f(x)"), &cfg.encode("f( x)"), 2, &ec).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(a.checksum(), b.checksum());
}

#[test]
fn converged_edit_moves_perturbed_states_onto_targets() {
    let m = seeded_random_model(&ModelConfig::byte_level(4, 4, 64, 256, 64), 3).unwrap();
    let cfg = m.config.clone();
    let (ori, pert) = (cfg.encode("x = 4 -> q"), cfg.encode("x = 4 -> Q"));
    let ec = EditConfig {
        lambda: 0.0,
        learning_rate: 0.5,
        max_steps: 2000,
        ..EditConfig::default()
    };
    let (e, rec) = edit_tokens(&m, &ori, &pert, 2, &ec).unwrap();
    assert!(rec.final_loss().alignment < rec.initial.alignment);
    // the final alignment loss is the MSE of the re-run forward pass
    let t = capture_targets(&m, &ori, &pert, 2).unwrap();
    let after = total_loss(e.mlp_down(2).unwrap(), &t, 0.0).unwrap();
    let ratio = after.alignment / rec.initial.alignment;
    assert!(ratio <= 1e-6, "alignment ratio {ratio:e}, recorded {:e}, steps {} {:?}", rec.final_loss().alignment / rec.initial.alignment, rec.steps_taken, rec.stop_reason);
    let batch = Batch::left_padded(&[ori, pert], cfg.pad_id).unwrap();
    assert!(forward(&e, &batch, None, false).is_ok());
}
