//! Frame-synchronous greedy decoding.

use super::joiner::project_encoder;
use super::{predictor_start, predictor_step, project_predictor, ModelConfig, TokenSequence, BLANK};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::params::{linear, Bound};

/// Maximum non-blank emissions per encoder frame.
pub const EMISSION_CAP: usize = 4;

/// Index of the largest value; ties go to the lowest index (blank first).
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Add the joiner gate for one frame in place: blank gets `1 - b`, every
/// other label gets `b`.
pub(crate) fn gate_row(row: &mut [f64], b: f64) {
    row[BLANK] += 1.0 - b;
    for v in row.iter_mut().skip(1) {
        *v += b;
    }
}

/// Greedy search over encoder states `f[T x d_model]`. At each frame the
/// best label is emitted until blank wins or [`EMISSION_CAP`] is reached.
/// `gate`, when present, holds one gate value per encoder frame.
pub fn greedy_search(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    f: Var,
    gate: Option<&[f64]>,
) -> Result<TokenSequence> {
    let frames = tape.value(f).rows();
    if let Some(g) = gate {
        if g.len() != frames {
            return Err(Error::shape(
                "greedy_search",
                format!("gate has {} values but T={frames}", g.len()),
            ));
        }
    }
    let pf = project_encoder(tape, p, f)?;
    let mut state = predictor_start(tape, p, cfg)?;
    let mut pg = project_predictor(tape, p, state.output)?;
    let mut out = Vec::new();
    for t in 0..frames {
        let ft = tape.slice_rows(pf, t, t + 1)?;
        let mut emitted = 0;
        while emitted < EMISSION_CAP {
            let h = tape.add(ft, pg)?;
            let h = tape.tanh(h);
            let z = linear(tape, p, h, "join.out", true)?;
            let mut row = tape.value(z).data().to_vec();
            if let Some(g) = gate {
                gate_row(&mut row, g[t]);
            }
            let k = argmax(&row);
            if k == BLANK {
                break;
            }
            out.push(k as u32);
            state = predictor_step(tape, p, cfg, &state, k as u32)?;
            pg = project_predictor(tape, p, state.output)?;
            emitted += 1;
        }
    }
    Ok(TokenSequence::from_raw(out))
}
