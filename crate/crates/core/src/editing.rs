//! Down-projection editing at the key layer.
//!
//! With every parameter upstream of `W_V` frozen, the layer output is affine
//! in `W_V`:
//!
//! ```text
//! h(W_V) = h_prev + a · W_V
//! ```
//!
//! where `h_prev` is the previous layer's output and `a` the post-GELU MLP
//! activation. Both are captured once, so the objective
//!
//! ```text
//! L(W_V) = mse(h_pert(W_V), h_target) + λ · mse(h_ori(W_V), h_target)
//! ```
//!
//! is an exact quadratic whose gradient has the closed form used here.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{add, matmul, sum_sq_diff, Matrix};
use crate::model::{aligned_overlap, forward_with, Batch, ForwardOptions, ModelBundle};
use crate::tracing::PromptPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub early_stop_patience: usize,
    pub early_stop_rel_tol: f64,
    pub early_stopping_enabled: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            learning_rate: 1e-2,
            max_steps: 100,
            early_stop_patience: 10,
            early_stop_rel_tol: 1e-6,
            early_stopping_enabled: true,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Parameter("lambda must be finite and ≥ 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter("learning_rate must be finite and > 0".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Parameter("early_stop_patience must be ≥ 1".into()));
        }
        if !(self.early_stop_rel_tol >= 0.0) {
            return Err(Error::Parameter("early_stop_rel_tol must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Frozen inputs of the editing objective, restricted to the aligned overlap
/// rows of the two prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTargets {
    /// Original prompt's key-layer output from the pre-edit model.
    pub h_target: Matrix,
    pub h_prev_ori: Matrix,
    pub h_prev_pert: Matrix,
    pub a_ori: Matrix,
    pub a_pert: Matrix,
}

impl EditTargets {
    /// Number of aligned token rows.
    pub fn n_rows(&self) -> usize {
        self.h_target.rows()
    }

    fn check(&self, wv: (usize, usize)) -> Result<()> {
        let n = self.h_target.rows();
        let d = self.h_target.cols();
        let f = self.a_ori.cols();
        let ok = n > 0
            && self.h_prev_ori.shape() == (n, d)
            && self.h_prev_pert.shape() == (n, d)
            && self.a_ori.shape() == (n, f)
            && self.a_pert.shape() == (n, f)
            && wv == (f, d);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "edit targets (n={n}, d={d}, f={f}) with W_V {wv:?}"
            )))
        }
    }
}

/// Captures the frozen objective inputs at `layer` from one unpatched forward
/// over the left-padded pair.
pub fn capture_targets(
    model: &ModelBundle,
    ori: &[u32],
    pert: &[u32],
    layer: usize,
) -> Result<EditTargets> {
    model.config.check_layer(layer)?;
    let batch = Batch::left_padded(&[ori.to_vec(), pert.to_vec()], model.config.pad_id)?;
    let out = forward_with(
        model,
        &batch,
        &ForwardOptions {
            patch: None,
            capture_hidden: true,
            capture_mlp_layer: Some(layer),
        },
    )?;
    let rows = aligned_overlap(batch.width(), ori.len(), pert.len());
    let states = out.trace.expect("hidden capture requested").states;
    let acts = out.mlp_activations.expect("mlp capture requested");
    Ok(EditTargets {
        h_target: states[0][layer].select_rows(&rows),
        h_prev_ori: states[0][layer - 1].select_rows(&rows),
        h_prev_pert: states[1][layer - 1].select_rows(&rows),
        a_ori: acts[0].select_rows(&rows),
        a_pert: acts[1].select_rows(&rows),
    })
}

/// `(1/n) Σ_i ‖h1_i − h2_i‖²` over `n` rows; the row norm is not divided by d.
pub fn mse(h1: &Matrix, h2: &Matrix) -> Result<f64> {
    if h1.rows() == 0 {
        return Err(Error::Dimension("mse over zero rows".into()));
    }
    Ok(sum_sq_diff(h1, h2)? / h1.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditLoss {
    pub total: f64,
    pub alignment: f64,
    pub preservation: f64,
}

impl EditLoss {
    fn is_finite(&self) -> bool {
        self.total.is_finite() && self.alignment.is_finite() && self.preservation.is_finite()
    }
}

/// Residuals `h − h_target` (as 64-bit) plus the losses they imply.
struct Evaluation {
    loss: EditLoss,
    resid_pert: Vec<f64>,
    resid_ori: Vec<f64>,
}

/// Recomputes both key-layer outputs with the same kernels as the forward
/// pass, so the pre-edit `W_V` reproduces `h_target` bit for bit.
fn evaluate(wv: &Matrix, t: &EditTargets, lambda: f64) -> Result<Evaluation> {
    t.check(wv.shape())?;
    let h_pert = add(&t.h_prev_pert, &matmul(&t.a_pert, wv)?)?;
    let h_ori = add(&t.h_prev_ori, &matmul(&t.a_ori, wv)?)?;
    let resid = |h: &Matrix| -> Vec<f64> {
        h.data()
            .iter()
            .zip(t.h_target.data())
            .map(|(&x, &y)| f64::from(x) - f64::from(y))
            .collect()
    };
    let resid_pert = resid(&h_pert);
    let resid_ori = resid(&h_ori);
    let n = t.n_rows() as f64;
    let alignment = resid_pert.iter().map(|r| r * r).sum::<f64>() / n;
    let preservation = resid_ori.iter().map(|r| r * r).sum::<f64>() / n;
    Ok(Evaluation {
        loss: EditLoss {
            total: alignment + lambda * preservation,
            alignment,
            preservation,
        },
        resid_pert,
        resid_ori,
    })
}

/// `(2/n)·a_pertᵀ·r_pert + λ·(2/n)·a_oriᵀ·r_ori`, in 64-bit.
fn gradient(t: &EditTargets, ev: &Evaluation, lambda: f64) -> Vec<f64> {
    let (n, d) = t.h_target.shape();
    let f = t.a_ori.cols();
    let scale = 2.0 / n as f64;
    let mut g = vec![0.0f64; f * d];
    let mut accumulate = |a: &Matrix, resid: &[f64], w: f64| {
        if w == 0.0 {
            return;
        }
        for r in 0..n {
            let rrow = &resid[r * d..(r + 1) * d];
            for (i, &ai) in a.row(r).iter().enumerate() {
                let c = w * f64::from(ai);
                if c == 0.0 {
                    continue;
                }
                for (gv, &rv) in g[i * d..(i + 1) * d].iter_mut().zip(rrow) {
                    *gv += c * rv;
                }
            }
        }
    };
    accumulate(&t.a_pert, &ev.resid_pert, scale);
    accumulate(&t.a_ori, &ev.resid_ori, lambda * scale);
    g
}

/// Alignment, preservation, and total loss at `wv`.
pub fn total_loss(wv: &Matrix, targets: &EditTargets, lambda: f64) -> Result<EditLoss> {
    Ok(evaluate(wv, targets, lambda)?.loss)
}

/// The same objective evaluated entirely in 64-bit for a 64-bit `wv`
/// (row-major f × d). Used for finite-difference checks.
pub fn total_loss_f64(wv: &[f64], targets: &EditTargets, lambda: f64) -> Result<EditLoss> {
    let (n, d) = targets.h_target.shape();
    let f = targets.a_ori.cols();
    targets.check((f, d))?;
    if wv.len() != f * d {
        return Err(Error::Dimension(format!("{} values for a {f}x{d} W_V", wv.len())));
    }
    let mse64 = |prev: &Matrix, a: &Matrix| -> f64 {
        let mut total = 0.0;
        let mut row = vec![0.0f64; d];
        for r in 0..n {
            for (j, v) in row.iter_mut().enumerate() {
                *v = f64::from(prev.get(r, j));
            }
            for (i, &ai) in a.row(r).iter().enumerate() {
                let ai = f64::from(ai);
                for (v, &w) in row.iter_mut().zip(&wv[i * d..(i + 1) * d]) {
                    *v += ai * w;
                }
            }
            for (j, v) in row.iter().enumerate() {
                let e = v - f64::from(targets.h_target.get(r, j));
                total += e * e;
            }
        }
        total / n as f64
    };
    let alignment = mse64(&targets.h_prev_pert, &targets.a_pert);
    let preservation = mse64(&targets.h_prev_ori, &targets.a_ori);
    Ok(EditLoss {
        total: alignment + lambda * preservation,
        alignment,
        preservation,
    })
}

/// Gradient of the total loss with respect to `W_V` (f × d).
pub fn grad_wv(wv: &Matrix, targets: &EditTargets, lambda: f64) -> Result<Matrix> {
    let ev = evaluate(wv, targets, lambda)?;
    let g = gradient(targets, &ev, lambda);
    Matrix::from_vec(wv.rows(), wv.cols(), g.into_iter().map(|v| v as f32).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::MaxSteps => write!(f, "max_steps"),
            StopReason::EarlyStop => write!(f, "early_stop"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub key_layer: usize,
    pub n_rows: usize,
    pub initial: EditLoss,
    pub steps_taken: usize,
    /// Losses of the 64-bit iterate after each update; index 0 is after the
    /// first step.
    pub alignment_loss: Vec<f64>,
    pub preservation_loss: Vec<f64>,
    pub total_loss: Vec<f64>,
    pub stop_reason: StopReason,
    pub delta_w_frobenius: f64,
}

impl EditRecord {
    /// `step,alignment,preservation,total`; step 0 is the pre-edit loss.
    pub fn loss_curve_csv(&self) -> String {
        let mut s = String::from("step,alignment,preservation,total\n");
        s.push_str(&format!(
            "0,{},{},{}\n",
            self.initial.alignment, self.initial.preservation, self.initial.total
        ));
        for i in 0..self.steps_taken {
            s.push_str(&format!(
                "{},{},{},{}\n",
                i + 1,
                self.alignment_loss[i],
                self.preservation_loss[i],
                self.total_loss[i]
            ));
        }
        s
    }

    pub fn final_loss(&self) -> EditLoss {
        match self.steps_taken {
            0 => self.initial,
            n => EditLoss {
                total: self.total_loss[n - 1],
                alignment: self.alignment_loss[n - 1],
                preservation: self.preservation_loss[n - 1],
            },
        }
    }
}

/// Residuals of the iterate `w0 + Δ`, linear in the 64-bit update `Δ`.
///
/// The constant parts come from the f32 evaluation at `w0`, so `Δ = 0`
/// reproduces [`total_loss`] at `w0` exactly and later steps follow the
/// quadratic without per-step f32 rounding.
fn evaluate_delta(
    t: &EditTargets,
    base: &Evaluation,
    delta: &[f64],
    lambda: f64,
) -> Evaluation {
    let (n, d) = t.h_target.shape();
    let shift = |a: &Matrix, c: &[f64]| -> Vec<f64> {
        let mut out = c.to_vec();
        for r in 0..n {
            let orow = &mut out[r * d..(r + 1) * d];
            for (i, &ai) in a.row(r).iter().enumerate() {
                let ai = f64::from(ai);
                if ai == 0.0 {
                    continue;
                }
                for (o, &dv) in orow.iter_mut().zip(&delta[i * d..(i + 1) * d]) {
                    *o += ai * dv;
                }
            }
        }
        out
    };
    let resid_pert = shift(&t.a_pert, &base.resid_pert);
    let resid_ori = shift(&t.a_ori, &base.resid_ori);
    let nf = n as f64;
    let alignment = resid_pert.iter().map(|r| r * r).sum::<f64>() / nf;
    let preservation = resid_ori.iter().map(|r| r * r).sum::<f64>() / nf;
    Evaluation {
        loss: EditLoss {
            total: alignment + lambda * preservation,
            alignment,
            preservation,
        },
        resid_pert,
        resid_ori,
    }
}

/// Largest loss increase treated as rounding, relative to the step-0 loss.
const ROUNDING_RISE: f64 = 1e-12;

/// Runs gradient descent on frozen targets from `w0`.
///
/// The update `Δ = W − w0` is kept in 64-bit and rounded into the f32 tensor
/// once at the end. Recorded losses are those of the 64-bit iterate, which
/// makes the per-step monotonicity of the quadratic observable.
pub fn optimize(
    w0: &Matrix,
    targets: &EditTargets,
    key_layer: usize,
    cfg: &EditConfig,
) -> Result<(Matrix, EditRecord)> {
    cfg.validate()?;
    let base = evaluate(w0, targets, cfg.lambda)?;
    if !base.loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            loss: base.loss.total,
        });
    }
    let mut record = EditRecord {
        key_layer,
        n_rows: targets.n_rows(),
        initial: base.loss,
        steps_taken: 0,
        alignment_loss: Vec::new(),
        preservation_loss: Vec::new(),
        total_loss: Vec::new(),
        stop_reason: StopReason::MaxSteps,
        delta_w_frobenius: 0.0,
    };
    let mut delta = vec![0.0f64; w0.rows() * w0.cols()];
    let mut best = base.loss.total;
    let mut stale = 0;
    let mut g = gradient(targets, &base, cfg.lambda);
    let mut prev_total = base.loss.total;
    let mut prev_delta = delta.clone();

    for step in 1..=cfg.max_steps {
        if cfg.early_stopping_enabled && g.iter().all(|&v| v == 0.0) {
            record.stop_reason = StopReason::EarlyStop;
            break;
        }
        if cfg.early_stopping_enabled {
            prev_delta.copy_from_slice(&delta);
        }
        for (dv, gv) in delta.iter_mut().zip(&g) {
            *dv -= cfg.learning_rate * gv;
        }
        let ev = evaluate_delta(targets, &base, &delta, cfg.lambda);
        if !ev.loss.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: ev.loss.total,
            });
        }
        // A rise this small is rounding noise: the iterate has reached the
        // floating-point floor. Larger rises are left to the divergence check.
        if cfg.early_stopping_enabled
            && ev.loss.total > prev_total
            && ev.loss.total - prev_total <= ROUNDING_RISE * base.loss.total
        {
            delta.copy_from_slice(&prev_delta);
            record.stop_reason = StopReason::EarlyStop;
            break;
        }
        prev_total = ev.loss.total;
        record.alignment_loss.push(ev.loss.alignment);
        record.preservation_loss.push(ev.loss.preservation);
        record.total_loss.push(ev.loss.total);
        record.steps_taken = step;
        g = gradient(targets, &ev, cfg.lambda);

        if cfg.early_stopping_enabled {
            if ev.loss.total < best * (1.0 - cfg.early_stop_rel_tol) {
                best = ev.loss.total;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.early_stop_patience {
                    record.stop_reason = StopReason::EarlyStop;
                    break;
                }
            }
        }
    }

    let mut w = w0.clone();
    for (wv, dv) in w.data_mut().iter_mut().zip(&delta) {
        *wv = (f64::from(*wv) + dv) as f32;
    }
    if !w.is_finite() {
        return Err(Error::Divergence {
            step: record.steps_taken,
            loss: f64::INFINITY,
        });
    }
    record.delta_w_frobenius = w
        .data()
        .iter()
        .zip(w0.data())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum::<f64>()
        .sqrt();
    Ok((w, record))
}

/// Edits layer `key_layer`'s down-projection so the perturbed prompt's
/// key-layer states move toward the original prompt's. Every other tensor of
/// the returned bundle is a bitwise copy of the input.
pub fn edit(
    model: &ModelBundle,
    pair: &PromptPair,
    key_layer: usize,
    cfg: &EditConfig,
) -> Result<(ModelBundle, EditRecord)> {
    let ori = model.config.encode(&pair.ori);
    let pert = model.config.encode(&pair.pert);
    edit_tokens(model, &ori, &pert, key_layer, cfg)
}

pub fn edit_tokens(
    model: &ModelBundle,
    ori: &[u32],
    pert: &[u32],
    key_layer: usize,
    cfg: &EditConfig,
) -> Result<(ModelBundle, EditRecord)> {
    cfg.validate()?;
    let targets = capture_targets(model, ori, pert, key_layer)?;
    let w0 = model.mlp_down(key_layer)?;
    let (w, record) = optimize(w0, &targets, key_layer, cfg)?;
    Ok((model.with_mlp_down(key_layer, w)?, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{seeded_random_model, ModelConfig};

    fn small() -> ModelBundle {
        seeded_random_model(&ModelConfig::byte_level(2, 2, 16, 32, 64), 5).unwrap()
    }

    #[test]
    fn mse_examples() {
        let h = Matrix::from_rows(&[vec![0.5, -1.0]]).unwrap();
        assert_eq!(mse(&h, &h).unwrap(), 0.0);
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(mse(&a, &b).unwrap(), 2.0);
        let c = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(mse(&a, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn mse_two_rows_reference() {
        let a = Matrix::from_rows(&[vec![0.1, -0.7, 2.5], vec![1.25, 0.0, -3.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.3, 0.2, 2.0], vec![-1.0, 0.5, -2.75]]).unwrap();
        let mut s = 0.0f64;
        for r in 0..2 {
            for c in 0..3 {
                let d = f64::from(a.get(r, c)) - f64::from(b.get(r, c));
                s += d * d;
            }
        }
        let expect = s / 2.0;
        assert!((mse(&a, &b).unwrap() - expect).abs() <= 1e-6 * expect);
    }

    #[test]
    fn step_zero_preservation_is_exactly_zero() {
        let m = small();
        let t = capture_targets(&m, &m.config.encode("sort the list"), &m.config.encode("sortt the list"), 2)
            .unwrap();
        let l = total_loss(m.mlp_down(2).unwrap(), &t, 1.0).unwrap();
        assert_eq!(l.preservation, 0.0);
        assert!(l.alignment > 0.0);
        let l0 = total_loss(m.mlp_down(2).unwrap(), &t, 0.0).unwrap();
        assert_eq!(l0.total, l0.alignment);
    }

    #[test]
    fn degenerate_pair_is_a_no_op() {
        let m = small();
        let pair = PromptPair {
            ori: "reverse a string".into(),
            pert: "reverse a string".into(),
        };
        let (edited, rec) = edit(&m, &pair, 1, &EditConfig::default()).unwrap();
        assert_eq!(rec.initial.alignment, 0.0);
        assert_eq!(rec.initial.preservation, 0.0);
        assert_eq!(rec.stop_reason, StopReason::EarlyStop);
        assert_eq!(rec.steps_taken, 0);
        assert_eq!(edited, m);
    }

    #[test]
    fn stationary_gradient_is_zero() {
        let m = small();
        let tok = m.config.encode("abc");
        let t = capture_targets(&m, &tok, &tok, 1).unwrap();
        let g = grad_wv(m.mlp_down(1).unwrap(), &t, 0.7).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_layer_is_rejected() {
        let m = small();
        let pair = PromptPair {
            ori: "a".into(),
            pert: "b".into(),
        };
        assert!(matches!(
            edit(&m, &pair, 3, &EditConfig::default()),
            Err(Error::LayerIndex { .. })
        ));
        assert!(matches!(
            edit(&m, &pair, 0, &EditConfig::default()),
            Err(Error::LayerIndex { .. })
        ));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let m = small();
        let pair = PromptPair {
            ori: "count the words".into(),
            pert: "count teh words".into(),
        };
        let cfg = EditConfig {
            learning_rate: 1e12,
            ..EditConfig::default()
        };
        assert!(matches!(edit(&m, &pair, 1, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn csv_has_initial_row() {
        let m = small();
        let pair = PromptPair {
            ori: "max of list".into(),
            pert: "max of lsit".into(),
        };
        let cfg = EditConfig {
            max_steps: 3,
            early_stopping_enabled: false,
            ..EditConfig::default()
        };
        let (_, rec) = edit(&m, &pair, 2, &cfg).unwrap();
        let csv = rec.loss_curve_csv();
        assert_eq!(csv.lines().count(), 1 + 1 + 3);
        assert!(csv.starts_with("step,alignment,preservation,total\n0,"));
    }
}
