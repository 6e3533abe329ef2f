//! Objectives that keep the context embedding about speaking style:
//! anchor feature reconstruction and variance-invariance-covariance (VIC)
//! regularisation of the two anchor halves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{init_linear, linear, Bound, Init, ParamStore};
use crate::transducer::ModelConfig;

/// Frame-level labels for the anchor, one per raw frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSequence(Vec<u32>);

impl LabelSequence {
    pub fn new(labels: Vec<u32>, num_labels: usize) -> Result<Self> {
        if let Some(l) = labels.iter().find(|&&l| l as usize >= num_labels) {
            return Err(Error::invalid(format!("frame label {l} outside [0, {num_labels})")));
        }
        Ok(LabelSequence(labels))
    }

    pub fn labels(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_fr: f64,
    /// Variance term weight.
    pub gamma: f64,
    /// Invariance term weight.
    pub mu: f64,
    /// Covariance term weight.
    pub nu: f64,
    /// Added to the variance inside the square root of the variance hinge.
    pub var_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_fr: 0.1,
            gamma: 1.0,
            mu: 1.0,
            nu: 0.05,
            var_eps: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_fr, self.gamma, self.mu, self.nu, self.var_eps];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpanderConfig {
    pub output_dim: usize,
    /// ReLU layers before the final linear map.
    pub hidden_layers: usize,
}

impl Default for ExpanderConfig {
    fn default() -> Self {
        ExpanderConfig {
            output_dim: 128,
            hidden_layers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    pub label_embed_dim: usize,
    pub hidden: usize,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            label_embed_dim: 16,
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveMode {
    #[default]
    None,
    Fr,
    Vic,
    Both,
}

impl ObjectiveMode {
    pub fn uses_fr(self) -> bool {
        matches!(self, ObjectiveMode::Fr | ObjectiveMode::Both)
    }

    pub fn uses_vic(self) -> bool {
        matches!(self, ObjectiveMode::Vic | ObjectiveMode::Both)
    }
}

/// Labels per frame for reconstruction: every token plus 0.
pub fn frame_label_count(cfg: &ModelConfig) -> usize {
    cfg.vocab_size + 1
}

pub fn init_fr_net(store: &mut ParamStore, cfg: &ModelConfig, fr: &ReconstructionConfig, seed: u64) {
    store.init(
        "fr.embed",
        &[frame_label_count(cfg), fr.label_embed_dim],
        Init::Uniform(1.0),
        seed,
    );
    init_linear(store, "fr.l1", fr.label_embed_dim + cfg.context_dim, fr.hidden, true, seed);
    init_linear(store, "fr.l2", fr.hidden, cfg.d_raw, true, seed);
}

/// Reconstruct the raw anchor from frame labels and `c`, returning the
/// mean squared error over frames and feature dimensions.
pub fn feature_reconstruction_loss(
    tape: &mut Tape,
    p: &Bound,
    labels: &LabelSequence,
    c: Var,
    anchor_raw: Var,
) -> Result<Var> {
    let t = tape.value(anchor_raw).rows();
    if labels.len() != t {
        return Err(Error::shape(
            "feature_reconstruction_loss",
            format!("{} labels for {t} anchor frames", labels.len()),
        ));
    }
    let table = p.var("fr.embed")?;
    let idx: Vec<usize> = labels.labels().iter().map(|&l| l as usize).collect();
    let e = tape.gather_rows(table, &idx)?;
    let cs = tape.tile_rows(c, t);
    let x = tape.concat_cols(&[e, cs])?;
    let h = linear(tape, p, x, "fr.l1", true)?;
    let h = tape.relu(h);
    let xhat = linear(tape, p, h, "fr.l2", true)?;
    tape.mse(xhat, anchor_raw)
}

/// Split frames at the midpoint; an odd frame goes to the first half.
pub fn split_anchor_halves(tape: &mut Tape, frames: Var) -> Result<(Var, Var)> {
    let n = tape.value(frames).rows();
    if n < 2 {
        return Err(Error::invalid(format!(
            "anchor of {n} frame(s) cannot be split into two halves"
        )));
    }
    let mid = n.div_ceil(2);
    Ok((tape.slice_rows(frames, 0, mid)?, tape.slice_rows(frames, mid, n)?))
}

pub fn init_expander(store: &mut ParamStore, cfg: &ModelConfig, e: &ExpanderConfig, seed: u64) {
    let mut din = cfg.context_dim;
    for i in 0..e.hidden_layers {
        init_linear(store, &format!("vic.exp.{i}"), din, e.output_dim, true, seed);
        din = e.output_dim;
    }
    init_linear(store, "vic.exp.out", din, e.output_dim, true, seed);
}

/// Expander network: `N x D` to `N x output_dim`.
pub fn expand(tape: &mut Tape, p: &Bound, e: &ExpanderConfig, c: Var) -> Result<Var> {
    let mut x = c;
    for i in 0..e.hidden_layers {
        x = linear(tape, p, x, &format!("vic.exp.{i}"), true)?;
        x = tape.relu(x);
    }
    linear(tape, p, x, "vic.exp.out", true)
}

/// The weighted VIC terms and their sum.
#[derive(Debug, Clone, Copy)]
pub struct VicTerms {
    /// `v(Z) + v(Z')`.
    pub variance: Var,
    pub invariance: Var,
    /// `c(Z) + c(Z')`.
    pub covariance: Var,
    pub total: Var,
}

/// Mean over dimensions of `max(0, 1 - sqrt(Var(z_j) + eps))`.
pub fn variance_hinge(tape: &mut Tape, z: Var, eps: f64) -> Result<Var> {
    let v = tape.var_rows(z)?;
    let v = tape.add_scalar(v, eps);
    let s = tape.sqrt(v);
    let s = tape.scale(s, -1.0);
    let h = tape.add_scalar(s, 1.0);
    let h = tape.relu(h);
    Ok(tape.mean_all(h))
}

/// Sum of squared off-diagonal entries of the batch covariance, over the
/// number of dimensions.
pub fn covariance_penalty(tape: &mut Tape, z: Var) -> Result<Var> {
    let (n, d) = tape.value(z).dims2();
    if n < 2 {
        return Err(Error::invalid(format!("covariance needs N >= 2 rows, got {n}")));
    }
    let m = tape.mean_rows(z);
    let m = tape.tile_rows(m, n);
    let zc = tape.sub(z, m)?;
    let zt = tape.transpose(zc);
    let cov = tape.matmul(zt, zc)?;
    let cov = tape.scale(cov, 1.0 / (n - 1) as f64);
    let mut mask = vec![1.0; d * d];
    for i in 0..d {
        mask[i * d + i] = 0.0;
    }
    let mask = tape.constant(Tensor::new(vec![d, d], mask)?);
    let off = tape.mul(cov, mask)?;
    let sq = tape.square(off);
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / d as f64))
}

/// VIC loss on two already-expanded batches `Z`, `Z'` of shape `N x d`.
pub fn vic_terms(tape: &mut Tape, z: Var, z2: Var, w: &LossWeights) -> Result<VicTerms> {
    let n = tape.value(z).rows();
    if n < 2 {
        return Err(Error::invalid(format!("VIC needs a batch of N >= 2, got {n}")));
    }
    let v1 = variance_hinge(tape, z, w.var_eps)?;
    let v2 = variance_hinge(tape, z2, w.var_eps)?;
    let variance = tape.add(v1, v2)?;
    let invariance = tape.mse(z, z2)?;
    let c1 = covariance_penalty(tape, z)?;
    let c2 = covariance_penalty(tape, z2)?;
    let covariance = tape.add(c1, c2)?;
    let a = tape.scale(variance, w.gamma);
    let b = tape.scale(invariance, w.mu);
    let c = tape.scale(covariance, w.nu);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(VicTerms {
        variance,
        invariance,
        covariance,
        total,
    })
}

/// VIC loss of context batches `C`, `C'` (`N x D`) through the expander.
pub fn vic_loss(
    tape: &mut Tape,
    p: &Bound,
    e: &ExpanderConfig,
    c: Var,
    c2: Var,
    w: &LossWeights,
) -> Result<VicTerms> {
    let z = expand(tape, p, e, c)?;
    let z2 = expand(tape, p, e, c2)?;
    vic_terms(tape, z, z2, w)
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    let x = tape.scalar(v);
    if !x.is_finite() {
        return Err(Error::NonFinite {
            what: what.to_string(),
            value: x,
        });
    }
    Ok(())
}

/// Combine the transducer loss with the auxiliary terms selected by `mode`.
pub fn total_loss(
    tape: &mut Tape,
    rnnt: Var,
    vic: Option<Var>,
    fr: Option<Var>,
    w: &LossWeights,
    mode: ObjectiveMode,
) -> Result<Var> {
    check_finite(tape, rnnt, "transducer loss")?;
    let mut total = rnnt;
    if mode.uses_vic() {
        let v = vic.ok_or_else(|| Error::invalid("objective mode needs a VIC loss"))?;
        check_finite(tape, v, "VIC loss")?;
        total = tape.add(total, v)?;
    }
    if mode.uses_fr() {
        let f = fr.ok_or_else(|| Error::invalid("objective mode needs a reconstruction loss"))?;
        check_finite(tape, f, "reconstruction loss")?;
        let f = tape.scale(f, w.lambda_fr);
        total = tape.add(total, f)?;
    }
    Ok(total)
}
