//! Neural transducer: front-end stacking, streaming encoder, prediction
//! network, additive joiner, full-lattice loss and greedy decoding.

pub mod checkpoint;
mod decode;
mod encoder;
mod frontend;
mod joiner;
mod loss;
mod predictor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Precision, Tensor, Var};

pub use decode::{greedy_search, EMISSION_CAP};
#[cfg(test)]
pub(crate) use decode::argmax;
pub use encoder::{encode, encoder_lookahead, init_encoder};
pub use frontend::{init_frontend, stack_features, stacked_len, stacked_width};
pub use joiner::{init_joiner, join, join_projected, project_encoder, project_predictor};
pub use loss::{
    rnnt_loss, rnnt_loss_bruteforce, rnnt_loss_values, BruteForce, MAX_BRUTEFORCE_STEPS,
};
pub use predictor::{init_predictor, predict, predictor_start, predictor_step, PredictorState};

/// Index of the blank label in every logit row.
pub const BLANK: usize = 0;

/// Output tokens in `[1, vocab_size]`; 0 is reserved for blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, vocab_size: usize) -> Result<Self> {
        for &t in &tokens {
            if t == 0 || t as usize > vocab_size {
                return Err(Error::invalid(format!(
                    "token {t} outside [1, {vocab_size}] (0 is blank)"
                )));
            }
        }
        Ok(TokenSequence(tokens))
    }

    /// Skips range validation; callers guarantee tokens are non-blank.
    pub(crate) fn from_raw(tokens: Vec<u32>) -> Self {
        TokenSequence(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Acoustic frames of one utterance with its transcript and anchor span.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// `T_raw x d_raw`.
    pub frames: Tensor,
    pub transcript: TokenSequence,
    /// Anchor length `T_w` in raw frames.
    pub anchor_len: usize,
    /// Per raw frame generating label, when known.
    pub frame_labels: Option<Vec<u32>>,
}

impl FeatureSequence {
    pub fn new(
        frames: Tensor,
        transcript: TokenSequence,
        anchor_len: usize,
        frame_labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        let t = frames.rows();
        if anchor_len == 0 || anchor_len > t {
            return Err(Error::invalid(format!(
                "anchor_len={anchor_len} must be in [1, T_raw={t}]"
            )));
        }
        if let Some(l) = &frame_labels {
            if l.len() != t {
                return Err(Error::invalid(format!(
                    "frame_labels has {} entries but T_raw={t}",
                    l.len()
                )));
            }
        }
        Ok(FeatureSequence {
            frames,
            transcript,
            anchor_len,
            frame_labels,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn anchor_frames(&self) -> Tensor {
        self.frames.slice_rows(0, self.anchor_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Unidirectional GRU stack.
    Recurrent,
    /// Self-attention restricted to the current and previous chunks.
    ChunkedAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_raw: usize,
    pub stack_factor: usize,
    /// Width of each raw frame after the first projection, before stacking.
    pub front_dim: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub encoder_kind: EncoderKind,
    /// Chunk width (encoder frames) for the attention encoder.
    pub chunk_size: usize,
    pub predictor_layers: usize,
    pub joiner_dim: usize,
    pub vocab_size: usize,
    pub context_dim: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_raw: 16,
            stack_factor: 4,
            front_dim: 16,
            d_model: 64,
            encoder_layers: 2,
            encoder_kind: EncoderKind::Recurrent,
            chunk_size: 4,
            predictor_layers: 1,
            joiner_dim: 64,
            vocab_size: 16,
            context_dim: 32,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("model config: {m}")));
        if self.stack_factor < 1 {
            return bad("stack_factor must be >= 1");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2");
        }
        if self.context_dim < 1 {
            return bad("context_dim must be >= 1");
        }
        if self.d_raw == 0 || self.d_model == 0 || self.front_dim == 0 || self.joiner_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.encoder_layers == 0 || self.predictor_layers == 0 {
            return bad("encoder_layers and predictor_layers must be >= 1");
        }
        if self.encoder_kind == EncoderKind::ChunkedAttention && self.chunk_size == 0 {
            return bad("chunk_size must be >= 1");
        }
        Ok(())
    }

    /// Labels per logit row: the vocabulary plus blank.
    pub fn num_labels(&self) -> usize {
        self.vocab_size + 1
    }
}

/// Joint logits over a `T x (U+1)` alignment grid. Row `t * (U+1) + u` of
/// `values` holds `z_{t,u}`; column 0 is blank.
#[derive(Debug, Clone, Copy)]
pub struct LogitLattice {
    pub values: Var,
    pub frames: usize,
    pub target_len: usize,
    pub num_labels: usize,
}

impl LogitLattice {
    pub fn rows(&self) -> usize {
        self.frames * (self.target_len + 1)
    }
}
