//! Seeded autoregressive decoding over the cached engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{softmax_in_place, Matrix};

use super::engine::{patch_rows, validate_batch, validate_patch, Session};
use super::{Batch, GenerationParams, ModelBundle, PatchSpec};

/// Draws the next token from a logits row. Pad and bos are never emitted.
///
/// Temperature 0 is argmax with the lowest id winning ties.
pub fn sample_token(
    logits: &[f32],
    temperature: f64,
    excluded: &[u32],
    rng: &mut ChaCha8Rng,
) -> u32 {
    let allowed = |i: usize| !excluded.contains(&(i as u32));
    if temperature <= 0.0 {
        let mut best = None;
        for (i, &v) in logits.iter().enumerate() {
            if !allowed(i) {
                continue;
            }
            match best {
                Some((_, bv)) if v <= bv => {}
                _ => best = Some((i, v)),
            }
        }
        return best.map_or(0, |(i, _)| i as u32);
    }
    let mut scaled: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if allowed(i) {
                f64::from(v) / temperature
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    softmax_in_place(&mut scaled);
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in scaled.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        last = i;
        cum += p;
        if u < cum {
            return i as u32;
        }
    }
    last as u32
}

/// Generates `n_samples` continuations of an unpadded prompt.
pub fn generate(
    model: &ModelBundle,
    prompt: &[u32],
    params: &GenerationParams,
    patch: Option<&PatchSpec>,
) -> Result<Vec<Vec<u32>>> {
    if prompt.is_empty() {
        return Err(Error::Parameter("prompt must be non-empty".into()));
    }
    let batch = Batch::left_padded(&[prompt.to_vec()], model.config.pad_id)?;
    Ok(generate_batch(model, &batch, params, patch)?.remove(0))
}

/// Generates `n_samples` continuations for every row of a left-padded batch.
///
/// The patch is applied once, during the prompt pass. Completion `j` of every
/// row draws from a generator seeded with `seed + j`, so output does not
/// depend on evaluation order.
pub fn generate_batch(
    model: &ModelBundle,
    batch: &Batch,
    params: &GenerationParams,
    patch: Option<&PatchSpec>,
) -> Result<Vec<Vec<Vec<u32>>>> {
    let cfg = &model.config;
    if params.temperature < 0.0 || !params.temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature {} must be finite and non-negative",
            params.temperature
        )));
    }
    validate_batch(model, batch)?;
    if let Some(p) = patch {
        validate_patch(model, batch, p)?;
    }
    let excluded = [cfg.pad_id, cfg.bos_id];
    let mut out = Vec::with_capacity(batch.n_samples());
    for s in 0..batch.n_samples() {
        let len = batch.row_len(s);
        if len + params.max_new_tokens > cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: len + params.max_new_tokens,
                max_seq: cfg.max_seq,
            });
        }
        let mut session = Session::new(model);
        let mut hook = |layer: usize, h: &mut Matrix, _: Option<&Matrix>| {
            patch_rows(patch, s, layer, h)
        };
        let logits = session.feed(&batch.token_ids[s], &batch.attention_mask[s], &mut hook)?;
        let last = logits.row(logits.rows() - 1).to_vec();

        let mut completions = Vec::with_capacity(params.n_samples);
        for j in 0..params.n_samples {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(j as u64));
            let mut sess = session.clone();
            let mut row = last.clone();
            let mut produced = Vec::with_capacity(params.max_new_tokens);
            let mut noop = |_: usize, _: &mut Matrix, _: Option<&Matrix>| {};
            while produced.len() < params.max_new_tokens {
                let tok = sample_token(&row, params.temperature, &excluded, &mut rng);
                if tok == cfg.eos_id {
                    break;
                }
                produced.push(tok);
                if produced.len() == params.max_new_tokens {
                    break;
                }
                debug_assert!(sess.n_valid() < cfg.max_seq);
                let lg = sess.feed(&[tok], &[true], &mut noop)?;
                row = lg.row(0).to_vec();
            }
            completions.push(produced);
        }
        out.push(completions);
    }
    Ok(out)
}
