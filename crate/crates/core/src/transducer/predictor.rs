//! Prediction network: label embedding followed by a GRU stack.
//! Row 0 of the embedding table (the blank index) doubles as the
//! start-of-sequence input.

use super::{ModelConfig, TokenSequence, BLANK};
use crate::error::{Error, Result};
use crate::nn::{gru_cell, init_gru, init_layer_norm, layer_norm};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{linear, Bound, Init, ParamStore};

pub fn init_predictor(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    store.init("pred.embed", &[cfg.num_labels(), cfg.d_model], Init::Uniform(1.0), seed);
    for l in 0..cfg.predictor_layers {
        init_gru(store, &format!("pred.{l}.gru"), cfg.d_model, cfg.d_model, seed);
    }
    init_layer_norm(store, "pred.out_ln", cfg.d_model, seed);
}

/// Hidden state of every predictor layer plus the normalised output `g`.
#[derive(Debug, Clone)]
pub struct PredictorState {
    hidden: Vec<Var>,
    pub output: Var,
}

fn step(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    hidden: &[Var],
    token: u32,
) -> Result<PredictorState> {
    if token as usize > cfg.vocab_size {
        return Err(Error::invalid(format!(
            "token {token} outside vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    let embed = p.var("pred.embed")?;
    let mut x = tape.gather_rows(embed, &[token as usize])?;
    let mut next = Vec::with_capacity(hidden.len());
    for (l, &h) in hidden.iter().enumerate() {
        let pre = format!("pred.{l}.gru");
        let xi = linear(tape, p, x, &format!("{pre}.ih"), true)?;
        x = gru_cell(tape, p, &pre, xi, h)?;
        next.push(x);
    }
    let output = layer_norm(tape, p, "pred.out_ln", x)?;
    Ok(PredictorState {
        hidden: next,
        output,
    })
}

/// State after consuming the start symbol (empty history): `g_0`.
pub fn predictor_start(tape: &mut Tape, p: &Bound, cfg: &ModelConfig) -> Result<PredictorState> {
    let zeros: Vec<Var> = (0..cfg.predictor_layers)
        .map(|_| tape.constant(Tensor::zeros(&[1, cfg.d_model])))
        .collect();
    step(tape, p, cfg, &zeros, BLANK as u32)
}

pub fn predictor_step(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    state: &PredictorState,
    token: u32,
) -> Result<PredictorState> {
    if token == BLANK as u32 {
        return Err(Error::invalid("predictor cannot consume blank"));
    }
    step(tape, p, cfg, &state.hidden, token)
}

/// `g[(U+1) x d_model]`: row `u` summarises `y_1..y_u`.
pub fn predict(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, y: &TokenSequence) -> Result<Var> {
    let mut state = predictor_start(tape, p, cfg)?;
    let mut rows = vec![state.output];
    for &tok in y.tokens() {
        state = predictor_step(tape, p, cfg, &state, tok)?;
        rows.push(state.output);
    }
    tape.concat_rows(&rows)
}
