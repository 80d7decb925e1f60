//! Bidirectional encoder stack with per-layer hidden-state capture.
//!
//! The architecture follows the studied model family: learned token,
//! position and segment embeddings summed before the first block, then N
//! post-norm blocks of multi-head self-attention and a feed-forward network,
//! each wrapped in residual + layer norm with dropout. Two task heads sit on
//! the final layer: span prediction (start/end softmax over positions) and
//! sequence classification over the leading `[CLS]` vector.
//!
//! Layer indexing includes the embedding output as layer 0, so a trace holds
//! N+1 matrices.

mod backward;
mod forward;
mod heads;

pub use backward::{backward, ModelGrads};
pub use forward::{forward_with_cache, ForwardCache};
pub use heads::{select_span, span_head, seqclass_head, SpanPrediction};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("input length {len} exceeds max_len {max_len}")]
    OverLength { len: usize, max_len: usize },
    #[error("unknown token id {id} (vocab size {vocab_size})")]
    UnknownToken { id: usize, vocab_size: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input field lengths differ: {0}")]
    RaggedInput(String),
}

/// Hyperparameters of the encoder stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: large enough to show the layer phases, small
    /// enough to train on a CPU in minutes.
    pub fn desk_scale(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_len: 128,
            dropout_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.n_layers == 0 || self.max_len == 0 || self.d_model == 0 {
            return Err(EncoderError::InvalidConfig(
                "n_layers, d_model and max_len must be >= 1".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EncoderError::InvalidConfig(format!(
                "dropout_rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Per-token role used to mark inputs for later analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Question,
    Context,
    Answer,
    SupportingFact,
    Special,
    Pad,
}

impl Role {
    pub fn to_u8(self) -> u8 {
        match self {
            Role::Question => 0,
            Role::Context => 1,
            Role::Answer => 2,
            Role::SupportingFact => 3,
            Role::Special => 4,
            Role::Pad => 5,
        }
    }

    pub fn from_u8(v: u8) -> Option<Role> {
        Some(match v {
            0 => Role::Question,
            1 => Role::Context,
            2 => Role::Answer,
            3 => Role::SupportingFact,
            4 => Role::Special,
            5 => Role::Pad,
            _ => return None,
        })
    }
}

/// Model-ready token sequence with segments, mask and role tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub token_ids: Vec<usize>,
    /// 0 for the question segment, 1 for context.
    pub segment_ids: Vec<u8>,
    /// 1 on real positions, 0 exactly on pad positions.
    pub attention_mask: Vec<u8>,
    pub roles: Vec<Role>,
}

impl EncodedInput {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let n = self.token_ids.len();
        if self.segment_ids.len() != n || self.attention_mask.len() != n || self.roles.len() != n {
            return Err(EncoderError::RaggedInput(format!(
                "tokens {} segments {} mask {} roles {}",
                n,
                self.segment_ids.len(),
                self.attention_mask.len(),
                self.roles.len()
            )));
        }
        for (i, (&m, &r)) in self.attention_mask.iter().zip(&self.roles).enumerate() {
            let is_pad = r == Role::Pad;
            if (m == 0) != is_pad {
                return Err(EncoderError::RaggedInput(format!(
                    "position {i}: mask {m} does not agree with role {r:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-pad positions (pads are a suffix by construction).
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Extend with pad tokens up to `target_len`.
    pub fn padded_to(&self, target_len: usize, pad_id: usize) -> EncodedInput {
        let mut out = self.clone();
        while out.token_ids.len() < target_len {
            out.token_ids.push(pad_id);
            out.segment_ids.push(1);
            out.attention_mask.push(0);
            out.roles.push(Role::Pad);
        }
        out
    }
}

/// All N+1 layer outputs for one input; index 0 is the embedding output.
#[derive(Debug, Clone)]
pub struct HiddenStateTrace {
    pub layers: Vec<Tensor>,
    pub input: EncodedInput,
}

impl HiddenStateTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.input.len()
    }

    pub fn d_model(&self) -> usize {
        self.layers[0].cols()
    }
}

/// Parameters of one encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bq: Tensor,
    pub bk: Tensor,
    pub bv: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl BlockParams {
    fn init(d: usize, d_ff: usize, std: f64, rng: &mut Rng) -> Self {
        BlockParams {
            wq: Tensor::random_normal(vec![d, d], std, rng),
            wk: Tensor::random_normal(vec![d, d], std, rng),
            wv: Tensor::random_normal(vec![d, d], std, rng),
            wo: Tensor::random_normal(vec![d, d], std, rng),
            bq: Tensor::zeros(vec![d]),
            bk: Tensor::zeros(vec![d]),
            bv: Tensor::zeros(vec![d]),
            bo: Tensor::zeros(vec![d]),
            ln1_gain: Tensor::filled(vec![d], 1.0),
            ln1_bias: Tensor::zeros(vec![d]),
            w1: Tensor::random_normal(vec![d, d_ff], std, rng),
            b1: Tensor::zeros(vec![d_ff]),
            w2: Tensor::random_normal(vec![d_ff, d], std, rng),
            b2: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::filled(vec![d], 1.0),
            ln2_bias: Tensor::zeros(vec![d]),
        }
    }
}

/// Linear head: `w` maps d_model to the output arity, plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearHead {
    fn init(d: usize, out: usize, std: f64, rng: &mut Rng) -> Self {
        LinearHead {
            w: Tensor::random_normal(vec![d, out], std, rng),
            b: Tensor::zeros(vec![out]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }
}

/// Encoder stack plus both task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub seg_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub span_head: LinearHead,
    pub class_head: LinearHead,
}

/// Initialization scale for weight matrices and embeddings.
const INIT_STD: f64 = 0.1;

/// Longest span the span head may predict (answers here are single words;
/// the cap prevents degenerate long spans).
pub const SPAN_CAP: usize = 8;

impl Model {
    /// Fresh model with seeded Gaussian init; `n_classes` sizes the
    /// classification head.
    pub fn new(config: ModelConfig, n_classes: usize) -> Result<Model, EncoderError> {
        config.validate()?;
        let mut rng = Rng::from_seed_stream(config.seed, 0x6d6f64656c);
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams::init(d, config.d_ff, INIT_STD, &mut rng))
            .collect();
        Ok(Model {
            tok_emb: Tensor::random_normal(vec![config.vocab_size, d], INIT_STD, &mut rng),
            pos_emb: Tensor::random_normal(vec![config.max_len, d], INIT_STD, &mut rng),
            seg_emb: Tensor::random_normal(vec![2, d], INIT_STD, &mut rng),
            blocks,
            span_head: LinearHead::init(d, 2, INIT_STD, &mut rng),
            class_head: LinearHead::init(d, n_classes, INIT_STD, &mut rng),
            config,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_head.out_dim()
    }

    /// Stable (name, tensor) enumeration used by the optimizer, the
    /// checkpoint format and gradient checks.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("seg_emb".into(), &self.seg_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (field, t) in b.named_fields() {
                out.push((format!("block{i}.{field}"), t));
            }
        }
        out.push(("span_head.w".into(), &self.span_head.w));
        out.push(("span_head.b".into(), &self.span_head.b));
        out.push(("class_head.w".into(), &self.class_head.w));
        out.push(("class_head.b".into(), &self.class_head.b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
            ("seg_emb".into(), &mut self.seg_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (field, t) in b.named_fields_mut() {
                out.push((format!("block{i}.{field}"), t));
            }
        }
        out.push(("span_head.w".into(), &mut self.span_head.w));
        out.push(("span_head.b".into(), &mut self.span_head.b));
        out.push(("class_head.w".into(), &mut self.class_head.w));
        out.push(("class_head.b".into(), &mut self.class_head.b));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters flattened in `named_tensors` order, for gradient
    /// checking.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`Model::flat_params`].
    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, t) in self.named_tensors_mut() {
            let len = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// Order-sensitive FNV-1a digest of all parameter bytes; used to verify
    /// that probing leaves the encoder untouched.
    pub fn param_checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                for byte in v.to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x100000001b3);
                }
            }
        }
        hash
    }

    /// Validated forward pass capturing every layer's output.
    pub fn forward_with_trace(&self, input: &EncodedInput) -> Result<HiddenStateTrace, EncoderError> {
        let cache = forward_with_cache(self, input, None)?;
        Ok(cache.into_trace(input.clone()))
    }
}

impl BlockParams {
    fn named_fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("bq", &self.bq),
            ("bk", &self.bk),
            ("bv", &self.bv),
            ("bo", &self.bo),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }

    fn named_fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("bq", &mut self.bq),
            ("bk", &mut self.bk),
            ("bv", &mut self.bv),
            ("bo", &mut self.bo),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
        ]
    }
}

#[cfg(test)]
mod tests;
