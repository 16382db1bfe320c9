//! Decoder-only transformer with hidden-state capture and patching.
//!
//! Each layer updates a single residual stream:
//!
//! ```text
//! u   = h + Att(norm_att(h))
//! h'  = h + gelu(norm_mlp(u) · W_up + b_up) · W_down
//! ```
//!
//! The attention output feeds the MLP input inside one residual add; there is
//! no separate post-attention residual. `W_down` is the only tensor the
//! editing module touches.

mod engine;
mod generate;
mod init;
mod io;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::Matrix;

pub use engine::{forward, forward_with, ForwardOptions, ForwardOutput};
pub use generate::{generate, generate_batch, sample_token};
pub use init::{seeded_random_model, INIT_STD};
pub use io::{load_crml, read_crml, save_crml, write_crml, CRML_MAGIC, CRML_VERSION};

/// Epsilon inside every RMS normalization.
pub const NORM_EPS: f64 = 1e-5;

pub const BYTE_PAD: u32 = 256;
pub const BYTE_BOS: u32 = 257;
pub const BYTE_EOS: u32 = 258;
pub const BYTE_VOCAB: usize = 259;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub pad_id: u32,
    pub bos_id: u32,
    pub eos_id: u32,
}

impl ModelConfig {
    /// Config for the byte-level tokenizer: ids 0..=255 are bytes, the special tokens follow.
    pub fn byte_level(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        d_ff: usize,
        max_seq: usize,
    ) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_ff,
            vocab_size: BYTE_VOCAB,
            max_seq,
            pad_id: BYTE_PAD,
            bos_id: BYTE_BOS,
            eos_id: BYTE_EOS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModel(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head, and width counts must be positive".into());
        }
        if self.max_seq == 0 {
            return bad("max_seq must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        let v = self.vocab_size as u64;
        let ids = [self.pad_id, self.bos_id, self.eos_id];
        if ids.iter().any(|&i| u64::from(i) >= v) {
            return bad("special token id outside the vocabulary".into());
        }
        if ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
            return bad("pad, bos and eos ids must be distinct".into());
        }
        Ok(())
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.n_layers {
            return Err(Error::LayerIndex {
                layer,
                n_layers: self.n_layers,
            });
        }
        Ok(())
    }

    /// `[BOS] + bytes`. Only meaningful for byte-level configs.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        std::iter::once(self.bos_id)
            .chain(text.bytes().map(u32::from))
            .collect()
    }

    /// Byte tokens decoded as (lossy) UTF-8; special tokens are dropped.
    pub fn decode(&self, tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Matrix,
    pub mlp_up: Matrix,
    pub mlp_up_bias: Matrix,
    /// Down-projection `W_V` (d_ff × d_model).
    pub mlp_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Matrix,
    pub unembedding: Matrix,
}

/// Name of the down-projection tensor of 1-based layer `layer`.
pub fn mlp_down_name(layer: usize) -> String {
    format!("layers.{layer}.mlp.down")
}

impl ModelBundle {
    /// Tensor names with their expected shapes, in container order.
    pub fn directory(config: &ModelConfig) -> Vec<(String, usize, usize)> {
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut dir = vec![
            ("token_embedding".to_string(), v, d),
            ("position_embedding".to_string(), config.max_seq, d),
        ];
        for l in 1..=config.n_layers {
            dir.push((format!("layers.{l}.attn_norm"), 1, d));
            dir.push((format!("layers.{l}.attn.wq"), d, d));
            dir.push((format!("layers.{l}.attn.wk"), d, d));
            dir.push((format!("layers.{l}.attn.wv"), d, d));
            dir.push((format!("layers.{l}.attn.wo"), d, d));
            dir.push((format!("layers.{l}.mlp_norm"), 1, d));
            dir.push((format!("layers.{l}.mlp.up"), d, f));
            dir.push((format!("layers.{l}.mlp.up_bias"), 1, f));
            dir.push((mlp_down_name(l), f, d));
        }
        dir.push(("final_norm".to_string(), 1, d));
        dir.push(("unembedding".to_string(), d, v));
        dir
    }

    /// All tensors, in container order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, lw) in self.layers.iter().enumerate() {
            let l = i + 1;
            out.push((format!("layers.{l}.attn_norm"), &lw.attn_norm));
            out.push((format!("layers.{l}.attn.wq"), &lw.wq));
            out.push((format!("layers.{l}.attn.wk"), &lw.wk));
            out.push((format!("layers.{l}.attn.wv"), &lw.wv));
            out.push((format!("layers.{l}.attn.wo"), &lw.wo));
            out.push((format!("layers.{l}.mlp_norm"), &lw.mlp_norm));
            out.push((format!("layers.{l}.mlp.up"), &lw.mlp_up));
            out.push((format!("layers.{l}.mlp.up_bias"), &lw.mlp_up_bias));
            out.push((mlp_down_name(l), &lw.mlp_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembedding".to_string(), &self.unembedding));
        out
    }

    /// Assembles a bundle from tensors listed in container order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let dir = Self::directory(&config);
        if tensors.len() != dir.len() {
            return Err(Error::InvalidModel(format!(
                "expected {} tensors, found {}",
                dir.len(),
                tensors.len()
            )));
        }
        for ((name, r, c), t) in dir.iter().zip(&tensors) {
            if t.shape() != (*r, *c) {
                return Err(Error::InvalidModel(format!(
                    "{name}: expected {r}x{c}, found {}x{}",
                    t.rows(),
                    t.cols()
                )));
            }
            if !t.is_finite() {
                return Err(Error::InvalidModel(format!("{name}: non-finite values")));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked above");
        let token_embedding = next();
        let position_embedding = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next(),
                mlp_up: next(),
                mlp_up_bias: next(),
                mlp_down: next(),
            });
        }
        let final_norm = next();
        let unembedding = next();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_norm,
            unembedding,
        })
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerWeights> {
        self.config.check_layer(layer)?;
        Ok(&self.layers[layer - 1])
    }

    pub fn mlp_down(&self, layer: usize) -> Result<&Matrix> {
        Ok(&self.layer(layer)?.mlp_down)
    }

    /// A copy of the bundle with layer `layer`'s down-projection replaced.
    pub fn with_mlp_down(&self, layer: usize, mlp_down: Matrix) -> Result<Self> {
        let current = self.mlp_down(layer)?;
        if current.shape() != mlp_down.shape() {
            return Err(Error::Dimension(format!(
                "mlp_down replacement {:?} for {:?}",
                mlp_down.shape(),
                current.shape()
            )));
        }
        let mut out = self.clone();
        out.layers[layer - 1].mlp_down = mlp_down;
        Ok(out)
    }

    /// SHA-256 over every tensor's little-endian bytes in container order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, t) in self.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Left-padded token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub token_ids: Vec<Vec<u32>>,
    pub attention_mask: Vec<Vec<bool>>,
    pub position_ids: Vec<Vec<usize>>,
}

impl Batch {
    /// Right-aligns `seqs` by left-padding with `pad_id`.
    pub fn left_padded(seqs: &[Vec<u32>], pad_id: u32) -> Result<Self> {
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Parameter("batch rows must be non-empty".into()));
        }
        let mut token_ids = Vec::with_capacity(seqs.len());
        let mut attention_mask = Vec::with_capacity(seqs.len());
        for s in seqs {
            let pad = width - s.len();
            let mut row = vec![pad_id; pad];
            row.extend_from_slice(s);
            token_ids.push(row);
            let mut mask = vec![false; pad];
            mask.resize(width, true);
            attention_mask.push(mask);
        }
        Self::from_parts(token_ids, attention_mask)
    }

    /// Builds a batch from an explicit grid and mask, deriving position ids.
    pub fn from_parts(token_ids: Vec<Vec<u32>>, attention_mask: Vec<Vec<bool>>) -> Result<Self> {
        if token_ids.is_empty() || token_ids.len() != attention_mask.len() {
            return Err(Error::Dimension("token grid and mask disagree".into()));
        }
        let width = token_ids[0].len();
        let mut position_ids = Vec::with_capacity(token_ids.len());
        for (row, mask) in token_ids.iter().zip(&attention_mask) {
            if row.len() != width || mask.len() != width {
                return Err(Error::Dimension("ragged batch rows".into()));
            }
            let first = mask.iter().position(|&m| m).ok_or_else(|| {
                Error::Parameter("batch row contains only padding".into())
            })?;
            if mask[first..].iter().any(|&m| !m) {
                return Err(Error::Parameter("padding must be on the left".into()));
            }
            let pos = (0..width).map(|t| t.saturating_sub(first)).collect();
            position_ids.push(pos);
        }
        Ok(Self {
            token_ids,
            attention_mask,
            position_ids,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.token_ids.len()
    }

    pub fn width(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }

    /// Number of non-pad positions in row `s`.
    pub fn row_len(&self, s: usize) -> usize {
        self.attention_mask[s].iter().filter(|&&m| m).count()
    }
}

/// Grid positions shared by two right-aligned sequences: the rightmost
/// `min(len_a, len_b)` columns of a grid of width `width`.
pub fn aligned_overlap(width: usize, len_a: usize, len_b: usize) -> Vec<usize> {
    let m = len_a.min(len_b).min(width);
    (width - m..width).collect()
}

/// Replace hidden states of `samples` at `positions` after layer `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub layer: usize,
    /// Grid-aligned source rows (T × d); only `positions` are read.
    pub source_states: Matrix,
    pub positions: Vec<usize>,
    pub samples: Vec<usize>,
}

/// Per sample, per layer 0..=N hidden states (T × d each).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub states: Vec<Vec<Matrix>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    /// 0 means greedy argmax.
    pub temperature: f64,
    pub seed: u64,
    pub n_samples: usize,
}

impl GenerationParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            temperature: 0.0,
            seed: 0,
            n_samples: 1,
        }
    }
}
