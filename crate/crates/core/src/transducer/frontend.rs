//! Per-frame projection followed by time stacking (frame-rate subsampling).

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::params::{init_linear, linear, Bound, ParamStore};

/// Encoder frames produced from `raw_frames` raw frames; any remainder is
/// dropped.
pub fn stacked_len(raw_frames: usize, stack_factor: usize) -> Result<usize> {
    if raw_frames < stack_factor {
        return Err(Error::invalid(format!(
            "T_raw={raw_frames} shorter than stack_factor={stack_factor}"
        )));
    }
    Ok(raw_frames / stack_factor)
}

/// Width of one stacked frame before the output projection.
pub fn stacked_width(cfg: &ModelConfig) -> usize {
    cfg.stack_factor * cfg.front_dim
}

pub fn init_frontend(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    init_linear(store, "front.in", cfg.d_raw, cfg.front_dim, true, seed);
    init_linear(store, "front.out", stacked_width(cfg), cfg.d_model, true, seed);
}

/// `raw[T_raw x d_raw]` to `[floor(T_raw / stack_factor) x d_model]`.
pub fn stack_features(tape: &mut Tape, p: &Bound, raw: Var, cfg: &ModelConfig) -> Result<Var> {
    let (t_raw, d) = tape.value(raw).dims2();
    if d != cfg.d_raw {
        return Err(Error::shape(
            "stack_features",
            format!("raw frames have d_raw={d}, config expects d_raw={}", cfg.d_raw),
        ));
    }
    let t = stacked_len(t_raw, cfg.stack_factor)?;
    let x = linear(tape, p, raw, "front.in", true)?;
    let x = if t * cfg.stack_factor < t_raw {
        tape.slice_rows(x, 0, t * cfg.stack_factor)?
    } else {
        x
    };
    let x = tape.reshape(x, t, stacked_width(cfg))?;
    linear(tape, p, x, "front.out", true)
}
