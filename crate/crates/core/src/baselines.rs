//! Anchor-mean baselines: subtract the anchor's mean feature vector from
//! every frame (AMS), or append it and apply a learned affine map (AMC).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{linear, Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Ams,
    Amc,
}

/// Per-dimension mean of the anchor frames.
pub fn anchor_mean(anchor: &Tensor) -> Result<Vec<f64>> {
    let (r, c) = anchor.dims2();
    if r == 0 {
        return Err(Error::invalid("anchor mean of an empty anchor"));
    }
    let mut m = vec![0.0; c];
    for i in 0..r {
        for (s, v) in m.iter_mut().zip(anchor.row_slice(i)) {
            *s += v;
        }
    }
    Ok(m.into_iter().map(|s| s / r as f64).collect())
}

/// Subtract `mean[1 x d]` from every row of `frames[T x d]`.
pub fn apply_ams(tape: &mut Tape, frames: Var, mean: Var) -> Result<Var> {
    let (t, d) = tape.value(frames).dims2();
    let (mr, md) = tape.value(mean).dims2();
    if mr != 1 || md != d {
        return Err(Error::shape(
            "apply_ams",
            format!("mean is {mr} x {md}, frames have d={d}"),
        ));
    }
    let m = tape.tile_rows(mean, t);
    tape.sub(frames, m)
}

/// `[frames_t, mean] W + b` with `W` = `amc.w` (`2d x d`) and `b` = `amc.b`.
pub fn apply_amc(tape: &mut Tape, p: &Bound, frames: Var, mean: Var) -> Result<Var> {
    let (t, d) = tape.value(frames).dims2();
    let (mr, md) = tape.value(mean).dims2();
    if mr != 1 || md != d {
        return Err(Error::shape(
            "apply_amc",
            format!("mean is {mr} x {md}, frames have d={d}"),
        ));
    }
    let m = tape.tile_rows(mean, t);
    let x = tape.concat_cols(&[frames, m])?;
    linear(tape, p, x, "amc", true)
}

/// `[I; -I]`: AMC reduces to AMS with this transform and a zero bias.
pub fn subtraction_transform(d: usize) -> Tensor {
    let mut w = vec![0.0; 2 * d * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
        w[(d + i) * d + i] = -1.0;
    }
    Tensor::new(vec![2 * d, d], w).unwrap()
}

/// AMC parameters, starting from the subtraction transform.
pub fn init_amc(store: &mut ParamStore, d_raw: usize) {
    store.insert("amc.w", subtraction_transform(d_raw));
    store.insert("amc.b", Tensor::zeros(&[1, d_raw]));
}

/// Apply the baseline to raw frames given the raw anchor.
pub fn apply_baseline(
    tape: &mut Tape,
    p: &Bound,
    kind: BaselineKind,
    frames: Var,
    anchor: Var,
) -> Result<Var> {
    if tape.value(anchor).rows() == 0 {
        return Err(Error::invalid("anchor mean of an empty anchor"));
    }
    let mean = tape.mean_rows(anchor);
    match kind {
        BaselineKind::Ams => apply_ams(tape, frames, mean),
        BaselineKind::Amc => apply_amc(tape, p, frames, mean),
    }
}
