//! Key-layer localization by hidden-state patching.
//!
//! 1. Measure pass@1 of the original and perturbed prompts.
//! 2. For every layer ℓ, patch the original prompt's layer-ℓ output into `B`
//!    left-padded copies of the perturbed prompt and measure pass@1 of the
//!    pooled completions.
//! 3. Pick the layer with the largest restoration improvement; break ties by
//!    the hidden-state discrepancy between the two prompts at that layer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::checker::{count_passes, Checker};
use crate::kernels::sum_sq_diff;
use crate::model::{
    aligned_overlap, forward, generate, generate_batch, Batch, GenerationParams, ModelBundle,
    PatchSpec,
};

/// Two restoration improvements closer than this are a tie.
pub const RI_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub ori: String,
    pub pert: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    /// Perturbed copies `B` in the patched batch.
    pub copies: usize,
    /// Completions per prompt (or per copy).
    pub samples: usize,
    pub temperature: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            copies: 5,
            samples: 10,
            temperature: 0.2,
            seed: 0,
            max_new_tokens: 16,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.copies == 0 || self.samples == 0 {
            return Err(Error::Parameter("copies and samples must be ≥ 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Parameter("temperature must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn generation(&self) -> GenerationParams {
        GenerationParams {
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            seed: self.seed,
            n_samples: self.samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepResult {
    pub acc_ori: f64,
    pub acc_pert: f64,
    /// Index `ℓ - 1` holds layer ℓ.
    pub acc_patched: Vec<f64>,
    pub ri: Vec<f64>,
    pub discrepancy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyLayerReport {
    /// 1-based.
    pub key_layer: usize,
    pub max_ri: f64,
    pub tie_broken: bool,
    #[serde(flatten)]
    pub sweep: LayerSweepResult,
}

/// pass@1 of `prompt`: the fraction of `cfg.samples` seeded completions the
/// checker accepts.
pub fn prompt_accuracy(
    model: &ModelBundle,
    prompt: &[u32],
    checker: &dyn Checker,
    cfg: &TraceConfig,
) -> Result<f64> {
    cfg.validate()?;
    let completions = generate(model, prompt, &cfg.generation(), None)?;
    let c = count_passes(checker, &completions)?;
    Ok(c as f64 / completions.len() as f64)
}

/// `(acc_patched − acc_pert) / (acc_ori − acc_pert)`, unclamped.
pub fn restoration_improvement(acc_patched: f64, acc_ori: f64, acc_pert: f64) -> Result<f64> {
    if acc_ori <= acc_pert {
        return Err(Error::NoRobustnessGap { acc_ori, acc_pert });
    }
    Ok((acc_patched - acc_pert) / (acc_ori - acc_pert))
}

/// Full layer sweep. Refuses pairs without a robustness gap.
pub fn layer_sweep(
    model: &ModelBundle,
    pair: &PromptPair,
    checker: &dyn Checker,
    cfg: &TraceConfig,
) -> Result<LayerSweepResult> {
    let ori = model.config.encode(&pair.ori);
    let pert = model.config.encode(&pair.pert);
    let acc_ori = prompt_accuracy(model, &ori, checker, cfg)?;
    let acc_pert = prompt_accuracy(model, &pert, checker, cfg)?;
    if acc_ori <= acc_pert {
        return Err(Error::NoRobustnessGap { acc_ori, acc_pert });
    }
    sweep_tokens(model, &ori, &pert, checker, cfg, acc_ori, acc_pert)
}

/// Layer sweep without the robustness-gap guard, for diagnostics and tests.
///
/// When `acc_ori <= acc_pert` every `ri` entry is NaN.
pub fn layer_sweep_unguarded(
    model: &ModelBundle,
    pair: &PromptPair,
    checker: &dyn Checker,
    cfg: &TraceConfig,
) -> Result<LayerSweepResult> {
    let ori = model.config.encode(&pair.ori);
    let pert = model.config.encode(&pair.pert);
    let acc_ori = prompt_accuracy(model, &ori, checker, cfg)?;
    let acc_pert = prompt_accuracy(model, &pert, checker, cfg)?;
    sweep_tokens(model, &ori, &pert, checker, cfg, acc_ori, acc_pert)
}

fn sweep_tokens(
    model: &ModelBundle,
    ori: &[u32],
    pert: &[u32],
    checker: &dyn Checker,
    cfg: &TraceConfig,
    acc_ori: f64,
    acc_pert: f64,
) -> Result<LayerSweepResult> {
    cfg.validate()?;
    let n_layers = model.config.n_layers;
    let mut rows = vec![ori.to_vec()];
    rows.extend(std::iter::repeat_n(pert.to_vec(), cfg.copies));
    let batch = Batch::left_padded(&rows, model.config.pad_id)?;
    let overlap = aligned_overlap(batch.width(), ori.len(), pert.len());

    let (_, trace) = forward(model, &batch, None, true)?;
    let trace = trace.expect("capture requested");
    let ori_states = &trace.states[0];
    let pert_states = &trace.states[1];

    let params = cfg.generation();
    let copies: Vec<usize> = (1..=cfg.copies).collect();
    let per_layer: Vec<(f64, f64)> = (1..=n_layers)
        .into_par_iter()
        .map(|layer| -> Result<(f64, f64)> {
            let discrepancy = sum_sq_diff(
                &ori_states[layer].select_rows(&overlap),
                &pert_states[layer].select_rows(&overlap),
            )?;
            let patch = PatchSpec {
                layer,
                source_states: ori_states[layer].clone(),
                positions: overlap.clone(),
                samples: copies.clone(),
            };
            let out = generate_batch(model, &batch, &params, Some(&patch))?;
            let mut passes = 0;
            let mut total = 0;
            for &s in &copies {
                passes += count_passes(checker, &out[s])?;
                total += out[s].len();
            }
            Ok((passes as f64 / total as f64, discrepancy))
        })
        .collect::<Result<_>>()?;

    let acc_patched: Vec<f64> = per_layer.iter().map(|p| p.0).collect();
    let discrepancy = per_layer.iter().map(|p| p.1).collect();
    let ri = acc_patched
        .iter()
        .map(|&a| restoration_improvement(a, acc_ori, acc_pert).unwrap_or(f64::NAN))
        .collect();
    Ok(LayerSweepResult {
        acc_ori,
        acc_pert,
        acc_patched,
        ri,
        discrepancy,
    })
}

/// Argmax of restoration improvement; ties (within [`RI_TIE_TOLERANCE`]) go
/// to the largest discrepancy, then to the smallest layer index.
pub fn select_key_layer(sweep: &LayerSweepResult) -> KeyLayerReport {
    let max_ri = sweep
        .ri
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..sweep.ri.len())
        .filter(|&i| (sweep.ri[i] - max_ri).abs() <= RI_TIE_TOLERANCE || sweep.ri[i] == max_ri)
        .collect();
    let mut best = tied.first().copied().unwrap_or(0);
    for &i in &tied[1..] {
        if sweep.discrepancy[i] > sweep.discrepancy[best] {
            best = i;
        }
    }
    KeyLayerReport {
        key_layer: best + 1,
        max_ri,
        tie_broken: tied.len() > 1,
        sweep: sweep.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep(ri: Vec<f64>, discrepancy: Vec<f64>) -> LayerSweepResult {
        LayerSweepResult {
            acc_ori: 1.0,
            acc_pert: 0.0,
            acc_patched: ri.clone(),
            ri,
            discrepancy,
        }
    }

    #[test]
    fn ri_examples() {
        assert_eq!(restoration_improvement(0.6, 0.6, 0.2).unwrap(), 1.0);
        assert_eq!(restoration_improvement(0.2, 0.6, 0.2).unwrap(), 0.0);
        assert!((restoration_improvement(0.4, 0.6, 0.2).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            restoration_improvement(0.4, 0.2, 0.2),
            Err(Error::NoRobustnessGap { .. })
        ));
        assert!(restoration_improvement(0.9, 0.6, 0.2).unwrap() > 1.0);
        assert!(restoration_improvement(0.0, 0.6, 0.2).unwrap() < 0.0);
    }

    #[test]
    fn key_layer_with_tie() {
        let r = select_key_layer(&sweep(vec![0.2, 0.9, 0.9], vec![1.0, 5.0, 3.0]));
        assert_eq!(r.key_layer, 2);
        assert!(r.tie_broken);
    }

    #[test]
    fn key_layer_without_tie() {
        let r = select_key_layer(&sweep(vec![0.1, 0.8, 0.3], vec![0.0; 3]));
        assert_eq!(r.key_layer, 2);
        assert!(!r.tie_broken);
        assert_eq!(r.max_ri, 0.8);
    }

    #[test]
    fn key_layer_full_tie_takes_smallest_index() {
        let r = select_key_layer(&sweep(vec![0.5; 4], vec![2.0; 4]));
        assert_eq!(r.key_layer, 1);
        assert!(r.tie_broken);
    }

    #[test]
    fn report_json_field_names() {
        let r = select_key_layer(&sweep(vec![0.1, 0.8], vec![0.0, 1.0]));
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["acc_ori", "acc_pert", "acc_patched", "ri", "discrepancy", "key_layer", "tie_broken"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: KeyLayerReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
