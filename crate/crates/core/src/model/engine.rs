//! Forward pass shared by full-batch evaluation and cached decoding.
//!
//! A [`Session`] owns the key/value cache of one sequence and processes rows
//! in blocks. Every row is computed from its own inputs plus the cache, so a
//! prompt fed in one block and a sequence fed row by row produce bitwise
//! identical states.

use crate::error::{Error, Result};
use crate::kernels::{gelu_scalar, matmul, matvec_into, rms_norm_row, softmax_in_place, Matrix};

use super::{Batch, HiddenTrace, ModelBundle, PatchSpec, NORM_EPS};

/// Callback invoked after the embedding (layer 0) and after every layer's
/// output. Receives the block's hidden rows (mutable, for patching) and, for
/// layers ≥ 1, the post-activation MLP input to the down-projection.
pub(crate) type LayerHook<'a> = dyn FnMut(usize, &mut Matrix, Option<&Matrix>) + 'a;

#[derive(Debug, Clone)]
pub(crate) struct Session<'m> {
    model: &'m ModelBundle,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    valid: Vec<bool>,
    next_pos: usize,
}

impl<'m> Session<'m> {
    pub(crate) fn new(model: &'m ModelBundle) -> Self {
        let n = model.config.n_layers;
        Self {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            valid: Vec::new(),
            next_pos: 0,
        }
    }

    /// Number of non-pad positions fed so far.
    pub(crate) fn n_valid(&self) -> usize {
        self.next_pos
    }

    /// Feeds a block of rows; returns its logits (rows × V).
    pub(crate) fn feed(
        &mut self,
        tokens: &[u32],
        valid: &[bool],
        hook: &mut LayerHook<'_>,
    ) -> Result<Matrix> {
        let cfg = &self.model.config;
        let d = cfg.d_model;
        let start = self.valid.len();
        let rows = tokens.len();

        let mut h = Matrix::zeros(rows, d);
        for (i, (&tok, &ok)) in tokens.iter().zip(valid).enumerate() {
            if tok as usize >= cfg.vocab_size {
                return Err(Error::Parameter(format!(
                    "token id {tok} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
            if !ok {
                continue;
            }
            let pos = self.next_pos;
            if pos >= cfg.max_seq {
                return Err(Error::SequenceTooLong {
                    len: pos + 1,
                    max_seq: cfg.max_seq,
                });
            }
            self.next_pos += 1;
            let te = self.model.token_embedding.row(tok as usize);
            let pe = self.model.position_embedding.row(pos);
            for ((o, &a), &b) in h.row_mut(i).iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }
        self.valid.extend_from_slice(valid);
        hook(0, &mut h, None);

        for l in 0..cfg.n_layers {
            h = self.layer(l, start, h, hook)?;
        }

        let mut normed = Matrix::zeros(rows, d);
        for r in 0..rows {
            rms_norm_row(h.row(r), self.model.final_norm.data(), NORM_EPS, normed.row_mut(r));
        }
        matmul(&normed, &self.model.unembedding)
    }

    fn layer(
        &mut self,
        l: usize,
        start: usize,
        x: Matrix,
        hook: &mut LayerHook<'_>,
    ) -> Result<Matrix> {
        let cfg = &self.model.config;
        let w = &self.model.layers[l];
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let rows = x.rows();

        let mut xn = Matrix::zeros(rows, d);
        for r in 0..rows {
            rms_norm_row(x.row(r), w.attn_norm.data(), NORM_EPS, xn.row_mut(r));
        }
        let q = matmul(&xn, &w.wq)?;
        let k = matmul(&xn, &w.wk)?;
        let v = matmul(&xn, &w.wv)?;
        self.keys[l].extend_from_slice(k.data());
        self.values[l].extend_from_slice(v.data());

        let att = self.attend(l, start, &q);
        let att_out = matmul(&att, &w.wo)?;

        // u = x + Att(x); the MLP reads norm(u).
        let mut un = Matrix::zeros(rows, d);
        let mut u = vec![0.0f32; d];
        for r in 0..rows {
            for ((o, &a), &b) in u.iter_mut().zip(x.row(r)).zip(att_out.row(r)) {
                *o = a + b;
            }
            rms_norm_row(&u, w.mlp_norm.data(), NORM_EPS, un.row_mut(r));
        }

        let mut act = Matrix::zeros(rows, f);
        let mut acc = vec![0.0f64; f];
        let bias = w.mlp_up_bias.data();
        for r in 0..rows {
            matvec_into(un.row(r), &w.mlp_up, &mut acc);
            for ((o, &s), &b) in act.row_mut(r).iter_mut().zip(&acc).zip(bias) {
                *o = gelu_scalar(s as f32 + b);
            }
        }
        let down = matmul(&act, &w.mlp_down)?;
        let mut out = x;
        for (o, &m) in out.data_mut().iter_mut().zip(down.data()) {
            *o += m;
        }
        hook(l + 1, &mut out, Some(&act));
        Ok(out)
    }

    /// Causal multi-head attention for the block starting at `start`.
    fn attend(&self, l: usize, start: usize, q: &Matrix) -> Matrix {
        let cfg = &self.model.config;
        let (d, nh, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let keys = &self.keys[l];
        let values = &self.values[l];
        let mut out = Matrix::zeros(q.rows(), d);
        let mut scores = Vec::new();
        let mut idx = Vec::new();
        let mut acc = vec![0.0f64; dh];
        for r in 0..q.rows() {
            let p = start + r;
            if !self.valid[p] {
                continue;
            }
            idx.clear();
            idx.extend((0..=p).filter(|&j| self.valid[j]));
            let qrow = q.row(r);
            for hd in 0..nh {
                let off = hd * dh;
                let qh = &qrow[off..off + dh];
                scores.clear();
                for &j in &idx {
                    let kh = &keys[j * d + off..j * d + off + dh];
                    let dot: f64 = qh
                        .iter()
                        .zip(kh)
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum();
                    scores.push(dot * scale);
                }
                softmax_in_place(&mut scores);
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (&j, &pj) in idx.iter().zip(&scores) {
                    let vh = &values[j * d + off..j * d + off + dh];
                    for (a, &vv) in acc.iter_mut().zip(vh) {
                        *a += pj * f64::from(vv);
                    }
                }
                for (o, &a) in out.row_mut(r)[off..off + dh].iter_mut().zip(&acc) {
                    *o = a as f32;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a> {
    pub patch: Option<&'a PatchSpec>,
    pub capture_hidden: bool,
    /// Capture the down-projection inputs (`h_down`) of this 1-based layer.
    pub capture_mlp_layer: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Per sample, T × V.
    pub logits: Vec<Matrix>,
    pub trace: Option<HiddenTrace>,
    /// Per sample, T × d_ff, for `capture_mlp_layer`.
    pub mlp_activations: Option<Vec<Matrix>>,
}

pub(crate) fn validate_patch(model: &ModelBundle, batch: &Batch, patch: &PatchSpec) -> Result<()> {
    model.config.check_layer(patch.layer)?;
    let width = batch.width();
    if patch.source_states.shape() != (width, model.config.d_model) {
        return Err(Error::Dimension(format!(
            "patch source {:?} for a batch of width {width}",
            patch.source_states.shape()
        )));
    }
    for &s in &patch.samples {
        if s >= batch.n_samples() {
            return Err(Error::Parameter(format!("patched sample {s} outside batch")));
        }
        for &t in &patch.positions {
            if t >= width || !batch.attention_mask[s][t] {
                return Err(Error::Parameter(format!(
                    "patch position {t} is not a non-pad position of sample {s}"
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn validate_batch(model: &ModelBundle, batch: &Batch) -> Result<()> {
    let width = batch.width();
    if width > model.config.max_seq {
        return Err(Error::SequenceTooLong {
            len: width,
            max_seq: model.config.max_seq,
        });
    }
    Ok(())
}

/// Hook that overwrites rows of one sample with patch rows, if it is patched.
pub(crate) fn patch_rows(patch: Option<&PatchSpec>, sample: usize, layer: usize, h: &mut Matrix) {
    if let Some(p) = patch {
        if p.layer == layer && p.samples.contains(&sample) {
            for &t in &p.positions {
                h.row_mut(t).copy_from_slice(p.source_states.row(t));
            }
        }
    }
}

/// Full forward over a left-padded batch.
pub fn forward(
    model: &ModelBundle,
    batch: &Batch,
    patch: Option<&PatchSpec>,
    capture: bool,
) -> Result<(Vec<Matrix>, Option<HiddenTrace>)> {
    let out = forward_with(
        model,
        batch,
        &ForwardOptions {
            patch,
            capture_hidden: capture,
            capture_mlp_layer: None,
        },
    )?;
    Ok((out.logits, out.trace))
}

pub fn forward_with(
    model: &ModelBundle,
    batch: &Batch,
    opts: &ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    validate_batch(model, batch)?;
    if let Some(p) = opts.patch {
        validate_patch(model, batch, p)?;
    }
    if let Some(l) = opts.capture_mlp_layer {
        model.config.check_layer(l)?;
    }
    let mut logits = Vec::with_capacity(batch.n_samples());
    let mut states = Vec::new();
    let mut acts = Vec::new();
    for s in 0..batch.n_samples() {
        let mut session = Session::new(model);
        let mut layers: Vec<Matrix> = Vec::new();
        let mut act: Option<Matrix> = None;
        let mut hook = |layer: usize, h: &mut Matrix, a: Option<&Matrix>| {
            patch_rows(opts.patch, s, layer, h);
            if opts.capture_hidden {
                layers.push(h.clone());
            }
            if opts.capture_mlp_layer == Some(layer) {
                act = a.cloned();
            }
        };
        let lg = session.feed(&batch.token_ids[s], &batch.attention_mask[s], &mut hook)?;
        logits.push(lg);
        if opts.capture_hidden {
            states.push(layers);
        }
        if let Some(a) = act {
            acts.push(a);
        }
    }
    Ok(ForwardOutput {
        logits,
        trace: opts.capture_hidden.then_some(HiddenTrace { states }),
        mlp_activations: opts.capture_mlp_layer.map(|_| acts),
    })
}
