//! Leave-one-in generalization protocol, clean-input regression, and
//! per-task accuracy evaluation.

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::editing::{edit_tokens, EditConfig, StopReason};
use crate::error::{Error, Result};
use crate::model::{generate, GenerationParams, ModelBundle};
use crate::seed::derive_seed;
use crate::tracing::{layer_sweep, select_key_layer, TraceConfig};

use super::checker::{count_passes, ResolvedChecker};
use super::dataset::{categories, TaskRecord};
use super::metrics::{g_rir, key_layer_stats, pass_at_k, KeyLayerStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub samples: usize,
    pub temperature: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub k: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            temperature: 0.2,
            seed: 0,
            max_new_tokens: 16,
            k: vec![1, 10],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Parameter("eval samples must be ≥ 1".into()));
        }
        if let Some(&k) = self.k.iter().find(|&&k| k == 0 || k > self.samples) {
            return Err(Error::Parameter(format!(
                "k = {k} must lie in 1..={}",
                self.samples
            )));
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

/// How the edited layer is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Localization {
    /// Layer sweep plus key-layer selection.
    #[default]
    Trace,
    /// Uniformly random layer from the middle third, seeded per candidate.
    RandomMiddle,
    Manual { layer: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSettings {
    pub trace: TraceConfig,
    pub edit: EditConfig,
    pub eval: EvalConfig,
    pub localization: Localization,
    /// Run seed; all protocol-level random choices derive from it.
    pub seed: u64,
    /// Cap on edit candidates per category (seeded subset); `None` uses all.
    pub max_candidates: Option<usize>,
}

impl ProtocolSettings {
    pub fn validate(&self) -> Result<()> {
        self.trace.validate()?;
        self.edit.validate()?;
        self.eval.validate()
    }
}

/// Layers `⌊N/3⌋+1 ..= max(lo, ⌈2N/3⌉)`.
pub fn middle_third(n_layers: usize) -> RangeInclusive<usize> {
    let lo = n_layers / 3 + 1;
    let hi = (2 * n_layers).div_ceil(3).max(lo).min(n_layers);
    lo.min(hi)..=hi
}

pub fn random_middle_layer(n_layers: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.random_range(middle_third(n_layers))
}

/// A task with tokenized prompts and a runnable checker.
#[derive(Debug, Clone)]
pub struct ResolvedTask {
    pub record: TaskRecord,
    pub ori: Vec<u32>,
    pub pert: Vec<u32>,
    pub checker: ResolvedChecker,
}

/// Tokenizes prompts and resolves checkers against the unedited model.
pub fn resolve_tasks(
    model: &ModelBundle,
    tasks: &[TaskRecord],
    max_new_tokens: usize,
) -> Result<Vec<ResolvedTask>> {
    tasks
        .par_iter()
        .map(|t| {
            let ori = model.config.encode(&t.prompt_ori);
            let pert = model.config.encode(&t.prompt_pert);
            let checker = t.checker.resolve(model, &ori, max_new_tokens)?;
            Ok(ResolvedTask {
                record: t.clone(),
                ori,
                pert,
                checker,
            })
        })
        .collect()
}

/// Passing completions out of `eval.samples`.
pub fn count_task_passes(
    model: &ModelBundle,
    prompt: &[u32],
    checker: &ResolvedChecker,
    eval: &EvalConfig,
) -> Result<usize> {
    let completions = generate(model, prompt, &eval.generation(), None)?;
    count_passes(checker, &completions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtK {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: String,
    pub category: String,
    pub n: usize,
    pub c_ori: usize,
    pub c_pert: usize,
    pub acc_ori: f64,
    pub acc_pert: f64,
    pub pass_at_k_ori: Vec<PassAtK>,
    pub pass_at_k_pert: Vec<PassAtK>,
}

fn pass_curve(n: usize, c: usize, ks: &[usize]) -> Result<Vec<PassAtK>> {
    ks.iter()
        .map(|&k| Ok(PassAtK {
            k,
            value: pass_at_k(n, c, k)?,
        }))
        .collect()
}

/// pass@1 and pass@k of both prompts of every task.
pub fn evaluate_tasks(
    model: &ModelBundle,
    tasks: &[ResolvedTask],
    eval: &EvalConfig,
) -> Result<Vec<TaskEval>> {
    eval.validate()?;
    tasks
        .par_iter()
        .map(|t| {
            let n = eval.samples;
            let c_ori = count_task_passes(model, &t.ori, &t.checker, eval)?;
            let c_pert = count_task_passes(model, &t.pert, &t.checker, eval)?;
            Ok(TaskEval {
                task_id: t.record.task_id.clone(),
                category: t.record.category.clone(),
                n,
                c_ori,
                c_pert,
                acc_ori: pass_at_k(n, c_ori, 1)?,
                acc_pert: pass_at_k(n, c_pert, 1)?,
                pass_at_k_ori: pass_curve(n, c_ori, &eval.k)?,
                pass_at_k_pert: pass_curve(n, c_pert, &eval.k)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KDelta {
    pub k: usize,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanTaskDelta {
    pub task_id: String,
    pub c_before: usize,
    pub c_after: usize,
    pub deltas: Vec<KDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanRegression {
    pub n_samples: usize,
    pub tasks: Vec<CleanTaskDelta>,
    /// Means over tasks.
    pub aggregate: Vec<KDelta>,
}

impl CleanRegression {
    pub fn delta_at(&self, k: usize) -> Option<f64> {
        self.aggregate.iter().find(|d| d.k == k).map(|d| d.delta)
    }
}

/// pass@k on the original prompts before and after an edit, with identical
/// seeds. Deltas are `after − before`.
pub fn clean_regression(
    before: &ModelBundle,
    after: &ModelBundle,
    tasks: &[ResolvedTask],
    eval: &EvalConfig,
) -> Result<CleanRegression> {
    eval.validate()?;
    let n = eval.samples;
    let per_task: Vec<CleanTaskDelta> = tasks
        .par_iter()
        .map(|t| {
            let c_before = count_task_passes(before, &t.ori, &t.checker, eval)?;
            let c_after = count_task_passes(after, &t.ori, &t.checker, eval)?;
            let deltas = eval
                .k
                .iter()
                .map(|&k| {
                    let b = pass_at_k(n, c_before, k)?;
                    let a = pass_at_k(n, c_after, k)?;
                    Ok(KDelta {
                        k,
                        before: b,
                        after: a,
                        delta: a - b,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(CleanTaskDelta {
                task_id: t.record.task_id.clone(),
                c_before,
                c_after,
                deltas,
            })
        })
        .collect::<Result<_>>()?;
    let m = per_task.len().max(1) as f64;
    let aggregate = eval
        .k
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mean = |f: fn(&KDelta) -> f64| per_task.iter().map(|t| f(&t.deltas[i])).sum::<f64>() / m;
            KDelta {
                k,
                before: mean(|d| d.before),
                after: mean(|d| d.after),
                delta: mean(|d| d.delta),
            }
        })
        .collect();
    Ok(CleanRegression {
        n_samples: n,
        tasks: per_task,
        aggregate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task_id: String,
    pub acc_ori: f64,
    pub acc_pert: f64,
    /// Mean perturbed-prompt accuracy over the edits that held this task out.
    pub acc_edited: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub task_id: String,
    pub key_layer: usize,
    pub tie_broken: Option<bool>,
    pub max_ri: Option<f64>,
    pub steps_taken: usize,
    pub stop_reason: StopReason,
    pub delta_w_frobenius: f64,
    pub initial_alignment: f64,
    pub final_alignment: f64,
    /// Perturbed-prompt pass@1 of the edited pair itself.
    pub self_acc_pert_before: f64,
    pub self_acc_pert_after: f64,
    pub held_out: Vec<String>,
    pub held_out_acc_ori: f64,
    pub held_out_acc_pert: f64,
    pub held_out_acc_edited: f64,
    /// `None` when the held-out aggregate has no robustness gap.
    pub g_rir: Option<f64>,
    pub clean: Vec<KDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCandidate {
    pub task_id: String,
    pub code: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub n_tasks: usize,
    pub tasks: Vec<TaskAccuracy>,
    pub candidates: Vec<String>,
    pub edits: Vec<EditOutcome>,
    pub skipped_candidates: Vec<SkippedCandidate>,
    pub mean_g_rir: Option<f64>,
    pub key_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCategory {
    pub category: String,
    pub code: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub n_layers: usize,
    pub categories: Vec<CategoryReport>,
    pub skipped_categories: Vec<SkippedCategory>,
    pub key_layer_histogram: Option<KeyLayerStats>,
    /// Mean clean-prompt Δpass@k over every edit, per k.
    pub clean_deltas: Vec<PassAtK>,
    pub clean_delta_pass1: Option<f64>,
    pub clean_delta_pass10: Option<f64>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

struct Baseline {
    c_ori: usize,
    c_pert: usize,
}

/// Leave-one-in over one category: for each candidate, localize and edit on
/// that pair alone, then measure the other tasks' perturbed prompts.
pub fn leave_one_in(
    model: &ModelBundle,
    tasks: &[TaskRecord],
    category: &str,
    settings: &ProtocolSettings,
) -> Result<CategoryReport> {
    settings.validate()?;
    let members: Vec<TaskRecord> = tasks.iter().filter(|t| t.category == category).cloned().collect();
    let resolved = resolve_tasks(model, &members, settings.eval.max_new_tokens)?;
    leave_one_in_resolved(model, category, &resolved, settings)
}

fn leave_one_in_resolved(
    model: &ModelBundle,
    category: &str,
    members: &[ResolvedTask],
    settings: &ProtocolSettings,
) -> Result<CategoryReport> {
    let eval = &settings.eval;
    let n = eval.samples as f64;
    if members.len() < 2 {
        return Err(Error::Protocol(format!(
            "category {category:?} has {} task(s); at least 2 are required",
            members.len()
        )));
    }
    let baseline: Vec<Baseline> = members
        .par_iter()
        .map(|t| {
            Ok(Baseline {
                c_ori: count_task_passes(model, &t.ori, &t.checker, eval)?,
                c_pert: count_task_passes(model, &t.pert, &t.checker, eval)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut gap: Vec<usize> = (0..members.len())
        .filter(|&i| baseline[i].c_ori > baseline[i].c_pert)
        .collect();
    if gap.len() < 2 {
        return Err(Error::Protocol(format!(
            "category {category:?} has {} task(s) with a robustness gap; at least 2 are required",
            gap.len()
        )));
    }
    if let Some(cap) = settings.max_candidates {
        if cap < gap.len() {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, "candidates", 0));
            gap.shuffle(&mut rng);
            gap.truncate(cap.max(1));
            gap.sort_unstable();
        }
    }

    let n_layers = model.config.n_layers;
    let mut edits = Vec::new();
    let mut skipped = Vec::new();
    let mut edited_acc: Vec<Vec<f64>> = vec![Vec::new(); members.len()];

    for (ci, &i) in gap.iter().enumerate() {
        let cand = &members[i];
        let (layer, tie_broken, max_ri) = match settings.localization {
            Localization::Trace => {
                match layer_sweep(model, &cand.record.pair(), &cand.checker, &settings.trace) {
                    Ok(sweep) => {
                        let r = select_key_layer(&sweep);
                        (r.key_layer, Some(r.tie_broken), Some(r.max_ri))
                    }
                    Err(e @ Error::NoRobustnessGap { .. }) => {
                        skipped.push(SkippedCandidate {
                            task_id: cand.record.task_id.clone(),
                            code: e.code().into(),
                            reason: e.to_string(),
                        });
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
            Localization::RandomMiddle => {
                let s = derive_seed(settings.seed, "no-localization", ci as u64);
                (random_middle_layer(n_layers, s), None, None)
            }
            Localization::Manual { layer } => {
                model.config.check_layer(layer)?;
                (layer, None, None)
            }
        };

        let (edited, record) = edit_tokens(model, &cand.ori, &cand.pert, layer, &settings.edit)?;

        let held: Vec<usize> = (0..members.len()).filter(|&j| j != i).collect();
        let evals: Vec<usize> = std::iter::once(i)
            .chain(held.iter().copied())
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&j| count_task_passes(&edited, &members[j].pert, &members[j].checker, eval))
            .collect::<Result<_>>()?;
        let self_after = evals[0] as f64 / n;
        let held_edited: Vec<f64> = evals[1..].iter().map(|&c| c as f64 / n).collect();
        for (&j, &a) in held.iter().zip(&held_edited) {
            edited_acc[j].push(a);
        }
        let agg_ori = mean(held.iter().map(|&j| baseline[j].c_ori as f64 / n));
        let agg_pert = mean(held.iter().map(|&j| baseline[j].c_pert as f64 / n));
        let agg_edited = mean(held_edited.iter().copied());

        let clean = clean_regression(model, &edited, members, eval)?;

        edits.push(EditOutcome {
            task_id: cand.record.task_id.clone(),
            key_layer: layer,
            tie_broken,
            max_ri,
            steps_taken: record.steps_taken,
            stop_reason: record.stop_reason,
            delta_w_frobenius: record.delta_w_frobenius,
            initial_alignment: record.initial.alignment,
            final_alignment: record.final_loss().alignment,
            self_acc_pert_before: baseline[i].c_pert as f64 / n,
            self_acc_pert_after: self_after,
            held_out: held.iter().map(|&j| members[j].record.task_id.clone()).collect(),
            held_out_acc_ori: agg_ori,
            held_out_acc_pert: agg_pert,
            held_out_acc_edited: agg_edited,
            g_rir: g_rir(agg_ori, agg_pert, agg_edited).ok(),
            clean: clean.aggregate,
        });
    }

    let defined: Vec<f64> = edits.iter().filter_map(|e| e.g_rir).collect();
    Ok(CategoryReport {
        category: category.to_string(),
        n_tasks: members.len(),
        tasks: members
            .iter()
            .zip(&baseline)
            .zip(&edited_acc)
            .map(|((t, b), ea)| TaskAccuracy {
                task_id: t.record.task_id.clone(),
                acc_ori: b.c_ori as f64 / n,
                acc_pert: b.c_pert as f64 / n,
                acc_edited: (!ea.is_empty()).then(|| mean(ea.iter().copied())),
            })
            .collect(),
        candidates: gap.iter().map(|&i| members[i].record.task_id.clone()).collect(),
        key_layers: edits.iter().map(|e| e.key_layer).collect(),
        mean_g_rir: (!defined.is_empty()).then(|| mean(defined.iter().copied())),
        edits,
        skipped_candidates: skipped,
    })
}

/// Runs leave-one-in for each selected category (all, in order of first
/// appearance, when `selected` is `None`). Categories that cannot support the
/// protocol are recorded as skipped.
pub fn run_protocol(
    model: &ModelBundle,
    tasks: &[TaskRecord],
    selected: Option<&[String]>,
    settings: &ProtocolSettings,
) -> Result<ProtocolReport> {
    settings.validate()?;
    let cats = match selected {
        Some(s) => s.to_vec(),
        None => categories(tasks),
    };
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for cat in cats {
        let members: Vec<TaskRecord> = tasks.iter().filter(|t| t.category == cat).cloned().collect();
        let resolved = resolve_tasks(model, &members, settings.eval.max_new_tokens)?;
        match leave_one_in_resolved(model, &cat, &resolved, settings) {
            Ok(r) => reports.push(r),
            Err(e @ Error::Protocol(_)) => skipped.push(SkippedCategory {
                category: cat,
                code: e.code().into(),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }

    let layers: Vec<usize> = reports.iter().flat_map(|r| r.key_layers.iter().copied()).collect();
    let key_layer_histogram = if layers.is_empty() {
        None
    } else {
        Some(key_layer_stats(&layers, model.config.n_layers)?)
    };
    let all_edits: Vec<&EditOutcome> = reports.iter().flat_map(|r| r.edits.iter()).collect();
    let clean_deltas: Vec<PassAtK> = if all_edits.is_empty() {
        Vec::new()
    } else {
        settings
            .eval
            .k
            .iter()
            .enumerate()
            .map(|(i, &k)| PassAtK {
                k,
                value: mean(all_edits.iter().map(|e| e.clean[i].delta)),
            })
            .collect()
    };
    let at = |k: usize| clean_deltas.iter().find(|d| d.k == k).map(|d| d.value);
    Ok(ProtocolReport {
        n_layers: model.config.n_layers,
        categories: reports,
        skipped_categories: skipped,
        key_layer_histogram,
        clean_delta_pass1: at(1),
        clean_delta_pass10: at(10),
        clean_deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn middle_third_ranges() {
        assert_eq!(middle_third(1), 1..=1);
        assert_eq!(middle_third(2), 1..=2);
        assert_eq!(middle_third(3), 2..=2);
        assert_eq!(middle_third(4), 2..=3);
        assert_eq!(middle_third(12), 5..=8);
        assert_eq!(middle_third(32), 11..=22);
        for n in 1..64 {
            let r = middle_third(n);
            assert!(*r.start() >= 1 && *r.end() <= n && r.start() <= r.end());
        }
    }

    #[test]
    fn random_middle_is_seeded() {
        for s in 0..50 {
            let l = random_middle_layer(12, s);
            assert!(middle_third(12).contains(&l));
            assert_eq!(l, random_middle_layer(12, s));
        }
    }

    #[test]
    fn eval_config_rejects_large_k() {
        let e = EvalConfig {
            samples: 5,
            k: vec![1, 10],
            ..EvalConfig::default()
        };
        assert!(e.validate().is_err());
    }
}
