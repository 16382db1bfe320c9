use proptest::prelude::*;
use robustedit_core::evaluation::metrics::{g_rir, key_layer_stats, pass_at_k};
use robustedit_core::Error;

/// Counts k-subsets of n samples (the first c correct) that hold a correct one.
fn subset_oracle(n: usize, c: usize, k: usize) -> f64 {
    let (mut hit, mut all) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == k {
            all += 1;
            if mask & ((1u32 << c) - 1) != 0 {
                hit += 1;
            }
        }
    }
    hit as f64 / all as f64
}

#[test]
fn pass_at_k_equals_subset_enumeration() {
    for n in 1..=10 {
        for c in 0..=n {
            for k in 1..=n {
                assert_eq!(pass_at_k(n, c, k).unwrap(), subset_oracle(n, c, k), "n={n} c={c} k={k}");
            }
        }
    }
}

proptest! {
    #[test]
    fn pass_at_k_is_monotone(n in 1usize..60, rc in any::<usize>(), rk in any::<usize>()) {
        let (c, k) = (rc % (n + 1), 1 + rk % n);
        let v = pass_at_k(n, c, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        if k < n {
            prop_assert!(pass_at_k(n, c, k + 1).unwrap() >= v);
        }
        if c < n {
            prop_assert!(pass_at_k(n, c + 1, k).unwrap() >= v);
        }
    }

    #[test]
    fn g_rir_is_affine_invariant(
        n in 2usize..30, ra in any::<usize>(), rb in any::<usize>(), re in any::<usize>(),
        scale in 0.5f64..2.0, shift in -1.0f64..1.0,
    ) {
        let b = rb % n;
        let a = b + 1 + ra % (n - b);
        let e = re % (n + 1);
        let f = |x: usize| x as f64 / n as f64;
        let t = |x: f64| scale * x + shift;
        let base = g_rir(f(a), f(b), f(e)).unwrap();
        let moved = g_rir(t(f(a)), t(f(b)), t(f(e))).unwrap();
        prop_assert!((base - moved).abs() <= 1e-12);
    }
}

#[test]
fn g_rir_rejects_missing_gap() {
    assert!(matches!(g_rir(0.4, 0.4, 0.9), Err(Error::NoRobustnessGap { .. })));
    assert!(matches!(g_rir(0.1, 0.4, 0.9), Err(Error::NoRobustnessGap { .. })));
    assert_eq!(g_rir(0.8, 0.2, 0.8).unwrap(), 1.0);
    assert_eq!(g_rir(0.8, 0.2, 0.2).unwrap(), 0.0);
}

#[test]
fn key_layer_stats_by_hand() {
    // layers 2, 2, 3, 7 over 8: mean 3.5, variance (2.25+2.25+0.25+12.25)/4 = 4.25
    let s = key_layer_stats(&[2, 2, 3, 7], 8).unwrap();
    assert_eq!(s.histogram, vec![0, 2, 1, 0, 0, 0, 1, 0]);
    assert_eq!(s.mean, 3.5);
    assert_eq!(s.std, 4.25f64.sqrt());
    assert!(key_layer_stats(&[], 4).is_err());
    assert!(key_layer_stats(&[5], 4).is_err());
}
