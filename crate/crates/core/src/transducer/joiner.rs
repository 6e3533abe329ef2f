//! Additive joiner: `z_{t,u} = W tanh(A f_t + B g_u) + b`.

use super::{LogitLattice, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::params::{init_linear, linear, Bound, ParamStore};

pub fn init_joiner(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    init_linear(store, "join.enc", cfg.d_model, cfg.joiner_dim, true, seed);
    init_linear(store, "join.pred", cfg.d_model, cfg.joiner_dim, false, seed);
    init_linear(store, "join.out", cfg.joiner_dim, cfg.num_labels(), true, seed);
}

pub fn project_encoder(tape: &mut Tape, p: &Bound, f: Var) -> Result<Var> {
    linear(tape, p, f, "join.enc", true)
}

pub fn project_predictor(tape: &mut Tape, p: &Bound, g: Var) -> Result<Var> {
    linear(tape, p, g, "join.pred", false)
}

/// Combine already-projected encoder rows `pf[T x J]` with projected
/// predictor rows `pg[(U+1) x J]` into the full lattice.
pub fn join_projected(tape: &mut Tape, p: &Bound, pf: Var, pg: Var) -> Result<LogitLattice> {
    let (t, jf) = tape.value(pf).dims2();
    let (u1, jg) = tape.value(pg).dims2();
    if jf != jg {
        return Err(Error::shape(
            "join",
            format!("encoder projection joiner_dim={jf} vs predictor projection joiner_dim={jg}"),
        ));
    }
    let a = tape.repeat_each_row(pf, u1);
    let b = tape.tile_rows(pg, t);
    let h = tape.add(a, b)?;
    let h = tape.tanh(h);
    let z = linear(tape, p, h, "join.out", true)?;
    let num_labels = tape.value(z).cols();
    Ok(LogitLattice {
        values: z,
        frames: t,
        target_len: u1 - 1,
        num_labels,
    })
}

/// `f[T x d_model]`, `g[(U+1) x d_model]` to a `T x (U+1)` logit lattice.
pub fn join(tape: &mut Tape, p: &Bound, f: Var, g: Var) -> Result<LogitLattice> {
    let pf = project_encoder(tape, p, f)?;
    let pg = project_predictor(tape, p, g)?;
    join_projected(tape, p, pf, pg)
}
