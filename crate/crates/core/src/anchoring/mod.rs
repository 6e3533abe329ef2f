//! Context embedding from the anchor segment, encoder input biasing and
//! per-frame joiner gating.
//!
//! A small auxiliary network maps a span of stacked frames to a
//! `context_dim` vector. Applied to the anchor it gives the context `c`;
//! applied to short windows of the utterance it gives `h_t`. The gate
//! `b_t = sigmoid(cos(c, h_t))` shifts blank logits by `1 - b_t` and every
//! other logit by `b_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, sigmoid, Tape, Tensor, Var};
use crate::params::{init_linear, linear, Bound, ParamStore};
use crate::transducer::{
    encode, join, predict, stack_features, FeatureSequence, LogitLattice, ModelConfig, BLANK,
};

/// Lower end of the gate range, `sigmoid(-1)`.
pub const GATE_MIN: f64 = 0.268_941_421_369_995_1;
/// Upper end of the gate range, `sigmoid(1)`.
pub const GATE_MAX: f64 = 0.731_058_578_630_004_9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    Clean,
    Mixed,
}

/// Where the anchor comes from for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSpec {
    /// Anchor length `T_w` in raw frames.
    pub anchor_len: usize,
    pub source: AnchorSource,
    /// Clean rendering of the utterance start, required for `Clean`.
    pub clean_frames: Option<Tensor>,
}

impl AnchorSpec {
    /// Anchor taken from the (possibly mixed) input itself.
    pub fn mixed(anchor_len: usize) -> Self {
        AnchorSpec {
            anchor_len,
            source: AnchorSource::Mixed,
            clean_frames: None,
        }
    }

    pub fn clean(anchor_len: usize, clean_frames: Tensor) -> Self {
        AnchorSpec {
            anchor_len,
            source: AnchorSource::Clean,
            clean_frames: Some(clean_frames),
        }
    }

    pub fn validate(&self, stack_factor: usize) -> Result<()> {
        if self.anchor_len < stack_factor {
            return Err(Error::invalid(format!(
                "anchor of {} raw frames is shorter than stack_factor={stack_factor}",
                self.anchor_len
            )));
        }
        if self.source == AnchorSource::Clean {
            match &self.clean_frames {
                None => return Err(Error::invalid("clean anchor requested without clean frames")),
                Some(c) if c.rows() < self.anchor_len => {
                    return Err(Error::invalid(format!(
                        "clean frames hold {} rows, anchor needs {}",
                        c.rows(),
                        self.anchor_len
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Raw anchor frames `T_w x d_raw` for `seq`.
    pub fn frames(&self, seq: &FeatureSequence) -> Result<Tensor> {
        let src = match self.source {
            AnchorSource::Mixed => &seq.frames,
            AnchorSource::Clean => self
                .clean_frames
                .as_ref()
                .ok_or_else(|| Error::invalid("clean anchor requested without clean frames"))?,
        };
        if src.rows() < self.anchor_len {
            return Err(Error::invalid(format!(
                "anchor_len={} exceeds the {} available frames",
                self.anchor_len,
                src.rows()
            )));
        }
        Ok(src.slice_rows(0, self.anchor_len))
    }
}

/// Context vector `c` extracted from an anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding(Vec<f64>);

impl ContextEmbedding {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if let Some(v) = c.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "context embedding".into(),
                value: *v,
            });
        }
        Ok(ContextEmbedding(c))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Per encoder frame gate values.
#[derive(Debug, Clone, PartialEq)]
pub struct GateBias(Vec<f64>);

impl GateBias {
    pub fn new(b: Vec<f64>) -> Result<Self> {
        // A hair of slack for rounding in the sigmoid.
        if let Some(v) = b.iter().find(|v| !(GATE_MIN - 1e-12..=GATE_MAX + 1e-12).contains(*v)) {
            return Err(Error::invalid(format!("gate value {v} outside [sigmoid(-1), sigmoid(1)]")));
        }
        Ok(GateBias(b))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Windows over encoder frames used for `h_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubsegmentConfig {
    /// Frames sharing one embedding.
    pub block: usize,
    pub left_ctx: usize,
    pub right_ctx: usize,
}

impl SubsegmentConfig {
    /// Full-scale setting: 4-frame blocks with 32 frames of left and 4 of
    /// right context.
    pub fn full_scale() -> Self {
        SubsegmentConfig {
            block: 4,
            left_ctx: 32,
            right_ctx: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block == 0 {
            return Err(Error::invalid("subsegment block must be >= 1"));
        }
        Ok(())
    }

    /// `(block_start, block_end, window_start, window_end)` for each block
    /// of a `frames`-long sequence, half-open and clipped to `[0, frames)`.
    pub fn windows(&self, frames: usize) -> Vec<(usize, usize, usize, usize)> {
        (0..frames.div_ceil(self.block))
            .map(|i| {
                let s = i * self.block;
                let e = (s + self.block).min(frames);
                (s, e, s.saturating_sub(self.left_ctx), (e + self.right_ctx).min(frames))
            })
            .collect()
    }
}

impl Default for SubsegmentConfig {
    /// Scaled to toy utterances of a few dozen encoder frames.
    fn default() -> Self {
        SubsegmentConfig {
            block: 2,
            left_ctx: 3,
            right_ctx: 1,
        }
    }
}

/// Which anchoring mechanisms a model uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// Feed `c` into the encoder input projection.
    pub bias: bool,
    /// Gate joiner logits with `b_t`.
    pub gating: bool,
    /// Channels of the auxiliary network's convolutions.
    pub aux_hidden: usize,
    pub subsegment: SubsegmentConfig,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            bias: true,
            gating: true,
            aux_hidden: 32,
            subsegment: SubsegmentConfig::default(),
        }
    }
}

impl AnchorConfig {
    pub fn disabled() -> Self {
        AnchorConfig {
            bias: false,
            gating: false,
            ..AnchorConfig::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.bias || self.gating
    }
}

const KERNEL: usize = 3;

pub fn init_aux_net(store: &mut ParamStore, cfg: &ModelConfig, a: &AnchorConfig, seed: u64) {
    init_linear(store, "aux.conv1", KERNEL * cfg.d_model, a.aux_hidden, true, seed);
    init_linear(store, "aux.conv2", KERNEL * a.aux_hidden, a.aux_hidden, true, seed);
    init_linear(store, "aux.out", a.aux_hidden, cfg.context_dim, true, seed);
}

/// `W_proj`, `(d_model + context_dim) x d_model`, no bias.
pub fn init_bias_projection(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    init_linear(store, "anchor.proj", cfg.d_model + cfg.context_dim, cfg.d_model, false, seed);
}

/// Auxiliary network: two width-3 temporal convolutions with ReLU, mean
/// pooling over time, then a linear map. `x[n x d_model]` to `1 x D`.
pub fn aux_embed(tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
    if tape.value(x).rows() == 0 {
        return Err(Error::invalid("auxiliary network needs at least one frame"));
    }
    let u = tape.unfold_time(x, KERNEL)?;
    let h = linear(tape, p, u, "aux.conv1", true)?;
    let h = tape.relu(h);
    let u = tape.unfold_time(h, KERNEL)?;
    let h = linear(tape, p, u, "aux.conv2", true)?;
    let h = tape.relu(h);
    let m = tape.mean_rows(h);
    linear(tape, p, m, "aux.out", true)
}

/// Context embedding from stacked anchor frames.
pub fn extract_context(tape: &mut Tape, p: &Bound, anchor_stacked: Var) -> Result<Var> {
    aux_embed(tape, p, anchor_stacked)
}

/// `ReLU([x_t, c] W_proj)` for every frame of `stacked[T x d_model]`.
pub fn bias_encoder_inputs(tape: &mut Tape, p: &Bound, stacked: Var, c: Var) -> Result<Var> {
    let t = tape.value(stacked).rows();
    let (cr, _) = tape.value(c).dims2();
    if cr != 1 {
        return Err(Error::shape("bias_encoder_inputs", format!("c must be one row, got {cr}")));
    }
    let cs = tape.tile_rows(c, t);
    let xc = tape.concat_cols(&[stacked, cs])?;
    let y = linear(tape, p, xc, "anchor.proj", false)?;
    Ok(tape.relu(y))
}

/// One embedding per block of encoder frames, `n_blocks x D`.
pub fn subsegment_embeddings(
    tape: &mut Tape,
    p: &Bound,
    stacked: Var,
    sub: &SubsegmentConfig,
) -> Result<Var> {
    sub.validate()?;
    let t = tape.value(stacked).rows();
    if t == 0 {
        return Err(Error::invalid("subsegment embeddings need at least one frame"));
    }
    let mut rows = Vec::new();
    for (_, _, ws, we) in sub.windows(t) {
        let w = tape.slice_rows(stacked, ws, we)?;
        rows.push(aux_embed(tape, p, w)?);
    }
    tape.concat_rows(&rows)
}

/// `b = sigmoid(cos(c, h))`; a zero vector gives 0.5.
pub fn gate_bias(c: &[f64], h: &[f64]) -> f64 {
    let cos = cosine_similarity(c, h);
    if cos == 0.0 && (c.iter().all(|v| *v == 0.0) || h.iter().all(|v| *v == 0.0)) {
        log::debug!("degenerate gate: zero-norm embedding");
    }
    sigmoid(cos)
}

/// Per-frame gate column `T x 1` from `c[1 x D]` and block embeddings.
pub fn frame_gates(
    tape: &mut Tape,
    c: Var,
    blocks: Var,
    sub: &SubsegmentConfig,
    frames: usize,
) -> Result<Var> {
    let cos = tape.cosine_rows(c, blocks)?;
    let b = tape.sigmoid(cos);
    let b = tape.repeat_each_row(b, sub.block);
    tape.slice_rows(b, 0, frames)
}

/// Shift lattice logits: blank by `1 - b_t`, all other labels by `b_t`.
pub fn apply_joiner_gating(tape: &mut Tape, lattice: &LogitLattice, b: Var) -> Result<LogitLattice> {
    let (t, one) = tape.value(b).dims2();
    if t != lattice.frames || one != 1 {
        return Err(Error::shape(
            "apply_joiner_gating",
            format!("gate is {t} x {one}, lattice has T={}", lattice.frames),
        ));
    }
    let v = lattice.num_labels;
    let neg = tape.scale(b, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let pair = tape.concat_cols(&[one_minus, b])?;
    let mut sel = vec![0.0; 2 * v];
    sel[BLANK] = 1.0;
    for k in 0..v {
        if k != BLANK {
            sel[v + k] = 1.0;
        }
    }
    let sel = tape.constant(Tensor::new(vec![2, v], sel)?);
    let shift = tape.matmul(pair, sel)?;
    let shift = tape.repeat_each_row(shift, lattice.target_len + 1);
    let values = tape.add(lattice.values, shift)?;
    Ok(LogitLattice { values, ..*lattice })
}

/// Pieces of one anchored forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AnchoredOutput {
    pub lattice: LogitLattice,
    /// Encoder states `T x d_model`.
    pub encoded: Var,
    /// Context `1 x D`, when anchoring is enabled.
    pub context: Option<Var>,
    /// Gate column `T x 1`, when gating is enabled.
    pub gate: Option<Var>,
}

/// Encoder-side pass: returns `(encoded, context, gate)`.
pub fn anchored_encode(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    anchor_cfg: &AnchorConfig,
    raw: Var,
    anchor_raw: Var,
) -> Result<(Var, Option<Var>, Option<Var>)> {
    let stacked = stack_features(tape, p, raw, cfg)?;
    if !anchor_cfg.enabled() {
        let f = encode(tape, p, stacked, cfg)?;
        return Ok((f, None, None));
    }
    let anchor_stacked = stack_features(tape, p, anchor_raw, cfg)?;
    let c = extract_context(tape, p, anchor_stacked)?;
    let enc_in = if anchor_cfg.bias {
        bias_encoder_inputs(tape, p, stacked, c)?
    } else {
        stacked
    };
    let f = encode(tape, p, enc_in, cfg)?;
    let gate = if anchor_cfg.gating {
        let frames = tape.value(stacked).rows();
        let blocks = subsegment_embeddings(tape, p, stacked, &anchor_cfg.subsegment)?;
        Some(frame_gates(tape, c, blocks, &anchor_cfg.subsegment, frames)?)
    } else {
        None
    };
    Ok((f, Some(c), gate))
}

/// Full anchored lattice for `seq`. With both mechanisms disabled this is
/// exactly the plain transducer.
pub fn anchored_forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    anchor_cfg: &AnchorConfig,
    seq: &FeatureSequence,
    spec: &AnchorSpec,
) -> Result<AnchoredOutput> {
    spec.validate(cfg.stack_factor)?;
    let raw = tape.constant(seq.frames.clone());
    let anchor_raw = tape.constant(spec.frames(seq)?);
    anchored_forward_vars(tape, p, cfg, anchor_cfg, raw, anchor_raw, seq)
}

/// As [`anchored_forward`] with the raw input and anchor already on the tape.
pub fn anchored_forward_vars(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    anchor_cfg: &AnchorConfig,
    raw: Var,
    anchor_raw: Var,
    seq: &FeatureSequence,
) -> Result<AnchoredOutput> {
    let (encoded, context, gate) = anchored_encode(tape, p, cfg, anchor_cfg, raw, anchor_raw)?;
    let g = predict(tape, p, cfg, &seq.transcript)?;
    let lattice = join(tape, p, encoded, g)?;
    let lattice = match gate {
        Some(b) => apply_joiner_gating(tape, &lattice, b)?,
        None => lattice,
    };
    Ok(AnchoredOutput {
        lattice,
        encoded,
        context,
        gate,
    })
}

#[cfg(test)]
mod tests;
