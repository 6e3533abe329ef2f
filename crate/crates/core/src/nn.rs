//! Small layers shared by the encoder, predictor and auxiliary networks.

use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{init_linear, linear, Bound, Init, ParamStore};

pub fn init_gru(store: &mut ParamStore, prefix: &str, din: usize, hidden: usize, seed: u64) {
    init_linear(store, &format!("{prefix}.ih"), din, 3 * hidden, true, seed);
    init_linear(store, &format!("{prefix}.hh"), hidden, 3 * hidden, true, seed);
}

/// One GRU update given the precomputed input projection row `xi[1 x 3H]`
/// (gate order: reset, update, candidate).
pub fn gru_cell(tape: &mut Tape, p: &Bound, prefix: &str, xi: Var, h: Var) -> Result<Var> {
    let hidden = tape.value(h).cols();
    let hh = linear(tape, p, h, &format!("{prefix}.hh"), true)?;
    let xr = tape.slice_cols(xi, 0, hidden)?;
    let xz = tape.slice_cols(xi, hidden, 2 * hidden)?;
    let xn = tape.slice_cols(xi, 2 * hidden, 3 * hidden)?;
    let hr = tape.slice_cols(hh, 0, hidden)?;
    let hz = tape.slice_cols(hh, hidden, 2 * hidden)?;
    let hn = tape.slice_cols(hh, 2 * hidden, 3 * hidden)?;
    let r = tape.add(xr, hr)?;
    let r = tape.sigmoid(r);
    let z = tape.add(xz, hz)?;
    let z = tape.sigmoid(z);
    let rn = tape.mul(r, hn)?;
    let n = tape.add(xn, rn)?;
    let n = tape.tanh(n);
    // h' = n + z * (h - n)
    let d = tape.sub(h, n)?;
    let zd = tape.mul(z, d)?;
    tape.add(n, zd)
}

/// Run a GRU over all rows of `x`, starting from a zero state.
pub fn gru_sequence(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, hidden: usize) -> Result<Var> {
    let steps = tape.value(x).rows();
    let xi = linear(tape, p, x, &format!("{prefix}.ih"), true)?;
    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut outs = Vec::with_capacity(steps);
    for t in 0..steps {
        let row = tape.slice_rows(xi, t, t + 1)?;
        h = gru_cell(tape, p, prefix, row, h)?;
        outs.push(h);
    }
    tape.concat_rows(&outs)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize, seed: u64) {
    store.init(&format!("{prefix}.g"), &[1, dim], Init::Ones, seed);
    store.init(&format!("{prefix}.b"), &[1, dim], Init::Zeros, seed);
}

pub fn layer_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x, 1e-5);
    let n = tape.mul_row(n, p.var(&format!("{prefix}.g"))?)?;
    tape.add_row(n, p.var(&format!("{prefix}.b"))?)
}
