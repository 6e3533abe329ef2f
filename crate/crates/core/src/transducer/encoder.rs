//! Streaming encoder. Frame `t` of the output depends only on input frames
//! `<= t + encoder_lookahead(cfg)`.

use super::{EncoderKind, ModelConfig};
use crate::error::Result;
use crate::nn::{gru_sequence, init_gru, init_layer_norm, layer_norm};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{init_linear, linear, Bound, ParamStore};

const MASKED: f64 = -1e30;

pub fn encoder_lookahead(cfg: &ModelConfig) -> usize {
    match cfg.encoder_kind {
        EncoderKind::Recurrent => 0,
        EncoderKind::ChunkedAttention => cfg.chunk_size - 1,
    }
}

pub fn init_encoder(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    let d = cfg.d_model;
    for l in 0..cfg.encoder_layers {
        let pre = format!("enc.{l}");
        match cfg.encoder_kind {
            EncoderKind::Recurrent => init_gru(store, &format!("{pre}.gru"), d, d, seed),
            EncoderKind::ChunkedAttention => {
                init_layer_norm(store, &format!("{pre}.ln1"), d, seed);
                for name in ["q", "k", "v", "o"] {
                    init_linear(store, &format!("{pre}.{name}"), d, d, false, seed);
                }
                init_layer_norm(store, &format!("{pre}.ln2"), d, seed);
                init_linear(store, &format!("{pre}.ff1"), d, 2 * d, true, seed);
                init_linear(store, &format!("{pre}.ff2"), 2 * d, d, true, seed);
            }
        }
    }
    init_layer_norm(store, "enc.out_ln", d, seed);
}

/// Additive mask allowing frame `t` to see every frame in its own chunk and
/// all earlier chunks.
fn chunk_mask(t: usize, chunk: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            if j / chunk > i / chunk {
                m.data_mut()[i * t + j] = MASKED;
            }
        }
    }
    m
}

fn attention_layer(tape: &mut Tape, p: &Bound, pre: &str, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let t = tape.value(x).rows();
    let a = layer_norm(tape, p, &format!("{pre}.ln1"), x)?;
    let q = linear(tape, p, a, &format!("{pre}.q"), false)?;
    let k = linear(tape, p, a, &format!("{pre}.k"), false)?;
    let v = linear(tape, p, a, &format!("{pre}.v"), false)?;
    let kt = tape.transpose(k);
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (cfg.d_model as f64).sqrt());
    let mask = tape.constant(chunk_mask(t, cfg.chunk_size));
    let s = tape.add(s, mask)?;
    let w = tape.softmax_rows(s);
    let o = tape.matmul(w, v)?;
    let o = linear(tape, p, o, &format!("{pre}.o"), false)?;
    let x = tape.add(x, o)?;
    let f = layer_norm(tape, p, &format!("{pre}.ln2"), x)?;
    let f = linear(tape, p, f, &format!("{pre}.ff1"), true)?;
    let f = tape.relu(f);
    let f = linear(tape, p, f, &format!("{pre}.ff2"), true)?;
    tape.add(x, f)
}

/// `stacked[T x d_model]` to encoder states `f[T x d_model]`.
pub fn encode(tape: &mut Tape, p: &Bound, stacked: Var, cfg: &ModelConfig) -> Result<Var> {
    let mut x = stacked;
    for l in 0..cfg.encoder_layers {
        let pre = format!("enc.{l}");
        x = match cfg.encoder_kind {
            EncoderKind::Recurrent => gru_sequence(tape, p, &format!("{pre}.gru"), x, cfg.d_model)?,
            EncoderKind::ChunkedAttention => attention_layer(tape, p, &pre, x, cfg)?,
        };
    }
    layer_norm(tape, p, "enc.out_ln", x)
}
