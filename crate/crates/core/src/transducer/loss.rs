//! Transducer loss `-log P(y|x)` over the full alignment lattice, plus an
//! exhaustive-enumeration reference used to check it.

use super::{LogitLattice, TokenSequence, BLANK};
use crate::error::{Error, Result};
use crate::numerics::{log_add, log_softmax_slice, log_sum_exp, Tape, Var};

/// Largest `T + U` the enumeration reference accepts.
pub const MAX_BRUTEFORCE_STEPS: usize = 12;

fn check_dims(logits: &[f64], frames: usize, y: &[u32], num_labels: usize) -> Result<()> {
    let u1 = y.len() + 1;
    if frames == 0 {
        return Err(Error::invalid("transducer loss needs at least one frame (T=0)"));
    }
    if logits.len() != frames * u1 * num_labels {
        return Err(Error::shape(
            "rnnt_loss",
            format!(
                "lattice holds {} values, expected T={frames} x (U+1)={u1} x labels={num_labels}",
                logits.len()
            ),
        ));
    }
    for &k in y {
        if k as usize == BLANK || k as usize >= num_labels {
            return Err(Error::invalid(format!(
                "target token {k} is blank or outside {num_labels} labels"
            )));
        }
    }
    Ok(())
}

fn log_probs(logits: &[f64], num_labels: usize) -> Vec<f64> {
    let mut lp = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks(num_labels).zip(lp.chunks_mut(num_labels)) {
        log_softmax_slice(src, dst);
    }
    lp
}

/// Loss and its gradient with respect to the raw logits (row-major
/// `T x (U+1) x labels`), via forward and backward variables on the lattice.
pub fn rnnt_loss_values(
    logits: &[f64],
    frames: usize,
    y: &[u32],
    num_labels: usize,
) -> Result<(f64, Vec<f64>)> {
    check_dims(logits, frames, y, num_labels)?;
    let u1 = y.len() + 1;
    let big_u = y.len();
    let lp = log_probs(logits, num_labels);
    let at = |t: usize, u: usize, k: usize| lp[(t * u1 + u) * num_labels + k];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * u1];
    for t in 0..frames {
        for u in 0..u1 {
            let a = if t == 0 && u == 0 {
                0.0
            } else {
                let from_blank = if t > 0 { alpha[(t - 1) * u1 + u] + at(t - 1, u, BLANK) } else { ninf };
                let from_emit = if u > 0 { alpha[t * u1 + u - 1] + at(t, u - 1, y[u - 1] as usize) } else { ninf };
                log_add(from_blank, from_emit)
            };
            alpha[t * u1 + u] = a;
        }
    }
    let log_p = alpha[(frames - 1) * u1 + big_u] + at(frames - 1, big_u, BLANK);
    if !log_p.is_finite() {
        return Err(Error::NonFinite {
            what: "transducer log-likelihood".into(),
            value: log_p,
        });
    }

    let mut beta = vec![ninf; frames * u1];
    for t in (0..frames).rev() {
        for u in (0..u1).rev() {
            let b = if t == frames - 1 && u == big_u {
                at(t, u, BLANK)
            } else {
                let via_blank = if t + 1 < frames { beta[(t + 1) * u1 + u] + at(t, u, BLANK) } else { ninf };
                let via_emit = if u < big_u { beta[t * u1 + u + 1] + at(t, u, y[u] as usize) } else { ninf };
                log_add(via_blank, via_emit)
            };
            beta[t * u1 + u] = b;
        }
    }

    // d(-log P)/d(log p) for the transitions actually on the lattice, then
    // through the log-softmax of each row.
    let mut grad = vec![0.0; logits.len()];
    let mut dlp = vec![0.0; num_labels];
    for t in 0..frames {
        for u in 0..u1 {
            dlp.iter_mut().for_each(|v| *v = 0.0);
            let a = alpha[t * u1 + u];
            let next_blank = if t + 1 < frames {
                beta[(t + 1) * u1 + u]
            } else if u == big_u {
                0.0
            } else {
                ninf
            };
            dlp[BLANK] = -(a + at(t, u, BLANK) + next_blank - log_p).exp();
            if u < big_u {
                let k = y[u] as usize;
                dlp[k] = -(a + at(t, u, k) + beta[t * u1 + u + 1] - log_p).exp();
            }
            let s: f64 = dlp.iter().sum();
            let row = (t * u1 + u) * num_labels;
            for k in 0..num_labels {
                let p = lp[row + k].exp();
                grad[row + k] = dlp[k] - p * s;
            }
        }
    }
    Ok((-log_p, grad))
}

/// Differentiable `-log P(y|x)` recorded on the tape.
pub fn rnnt_loss(tape: &mut Tape, lattice: &LogitLattice, y: &TokenSequence) -> Result<Var> {
    if lattice.target_len != y.len() {
        return Err(Error::shape(
            "rnnt_loss",
            format!("lattice U={} but transcript has U={}", lattice.target_len, y.len()),
        ));
    }
    let (loss, grad) = rnnt_loss_values(
        tape.value(lattice.values).data(),
        lattice.frames,
        y.tokens(),
        lattice.num_labels,
    )?;
    tape.scalar_fn(lattice.values, loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruteForce {
    pub loss: f64,
    /// Arrangements of `T` blanks and `U` labels that were scored.
    pub enumerated: usize,
}

/// Reference loss by enumerating every ordering of `T` blanks and `U` label
/// emissions. Orderings that emit after the final blank leave the lattice and
/// carry zero probability.
pub fn rnnt_loss_bruteforce(
    logits: &[f64],
    frames: usize,
    y: &[u32],
    num_labels: usize,
) -> Result<BruteForce> {
    check_dims(logits, frames, y, num_labels)?;
    if frames + y.len() > MAX_BRUTEFORCE_STEPS {
        return Err(Error::invalid(format!(
            "T+U={} exceeds enumeration bound {MAX_BRUTEFORCE_STEPS}",
            frames + y.len()
        )));
    }
    let u1 = y.len() + 1;
    let row_lp = |t: usize, u: usize, k: usize| {
        let row = &logits[(t * u1 + u) * num_labels..(t * u1 + u + 1) * num_labels];
        row[k] - log_sum_exp(row)
    };
    let steps = frames + y.len();
    let mut path_logps = Vec::new();
    let mut enumerated = 0;
    // Bit i set: step i is an emission.
    for mask in 0u32..(1 << steps) {
        if mask.count_ones() as usize != y.len() {
            continue;
        }
        enumerated += 1;
        let (mut t, mut u) = (0, 0);
        let mut lp = 0.0;
        let mut valid = true;
        for i in 0..steps {
            if t >= frames {
                valid = false;
                break;
            }
            if mask & (1 << i) != 0 {
                lp += row_lp(t, u, y[u] as usize);
                u += 1;
            } else {
                lp += row_lp(t, u, BLANK);
                t += 1;
            }
        }
        if valid && t == frames && u == y.len() {
            path_logps.push(lp);
        }
    }
    Ok(BruteForce {
        loss: -log_sum_exp(&path_logps),
        enumerated,
    })
}
