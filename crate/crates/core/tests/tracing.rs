//! Layer sweep behaviour on seeded models.

use robustedit_core::evaluation::checker::ReferenceMatch;
use robustedit_core::model::{generate, seeded_random_model, GenerationParams, ModelBundle, ModelConfig};
use robustedit_core::tracing::{
    layer_sweep, layer_sweep_unguarded, prompt_accuracy, select_key_layer, PromptPair, TraceConfig,
};
use robustedit_core::Error;

fn model(layers: usize, seed: u64) -> ModelBundle {
    seeded_random_model(&ModelConfig::byte_level(layers, 2, 16, 32, 48), seed).unwrap()
}

fn greedy_reference(m: &ModelBundle, prompt: &str, max_new: usize) -> ReferenceMatch {
    let out = generate(m, &m.config.encode(prompt), &GenerationParams::greedy(max_new), None).unwrap();
    ReferenceMatch {
        reference: out[0].clone(),
    }
}

fn cfg(max_new: usize) -> TraceConfig {
    TraceConfig {
        copies: 3,
        samples: 8,
        temperature: 0.5,
        seed: 7,
        max_new_tokens: max_new,
    }
}

#[test]
fn identical_prompts_have_no_gap() {
    let m = model(2, 1);
    let pair = PromptPair {
        ori: "x + y".into(),
        pert: "x + y".into(),
    };
    let checker = greedy_reference(&m, &pair.ori, 2);
    let err = layer_sweep(&m, &pair, &checker, &cfg(2)).unwrap_err();
    assert!(matches!(err, Error::NoRobustnessGap { .. }));

    let sweep = layer_sweep_unguarded(&m, &pair, &checker, &cfg(2)).unwrap();
    assert_eq!(sweep.acc_ori, sweep.acc_pert);
    for &a in &sweep.acc_patched {
        assert_eq!(a, sweep.acc_ori);
    }
    assert!(sweep.ri.iter().all(|r| r.is_nan()));
}

/// With one generated token and equal-length prompts, patching every position
/// of any layer with the original's states reproduces the original run above
/// that layer, so patched accuracy equals the original accuracy.
#[test]
fn full_patch_restores_single_token_accuracy() {
    for seed in 0..6 {
        let m = model(2, seed);
        let pair = PromptPair {
            ori: "a * b".into(),
            pert: "a / b".into(),
        };
        let checker = greedy_reference(&m, &pair.ori, 1);
        let sweep = layer_sweep_unguarded(&m, &pair, &checker, &cfg(1)).unwrap();
        assert_eq!(sweep.acc_patched, vec![sweep.acc_ori; 2], "seed {seed}");
        if sweep.acc_ori > sweep.acc_pert {
            assert!(sweep.ri.iter().all(|&r| r == 1.0));
        }
    }
}

#[test]
fn sweep_is_deterministic_and_sized_by_depth() {
    let m = model(3, 5);
    let pair = PromptPair {
        ori: "if a: b".into(),
        pert: "if A: b".into(),
    };
    let checker = greedy_reference(&m, &pair.ori, 3);
    let a = layer_sweep_unguarded(&m, &pair, &checker, &cfg(3)).unwrap();
    let b = layer_sweep_unguarded(&m, &pair, &checker, &cfg(3)).unwrap();
    assert_eq!(a.acc_patched.len(), 3);
    assert_eq!(a.discrepancy.len(), 3);
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    let acc = prompt_accuracy(&m, &m.config.encode(&pair.ori), &checker, &cfg(3)).unwrap();
    assert_eq!(acc, a.acc_ori);
    if a.acc_ori > a.acc_pert {
        let r = select_key_layer(&a);
        assert!((1..=3).contains(&r.key_layer));
        assert_eq!(r.max_ri, a.ri[r.key_layer - 1]);
    }
}
