//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation step.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator so gradients that are
    /// zero on both sides do not divide by zero.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            tolerance: 1e-6,
            floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub index: usize,
    pub max_rel_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval<F>(loss_fn: &F, params: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = loss_fn(&mut tape, &vars)?;
    let v = tape.scalar(root);
    if !v.is_finite() {
        return Err(Error::NonFinite {
            what: "loss under gradient check".into(),
            value: v,
        });
    }
    Ok((tape, vars, root))
}

/// Compare reverse-mode gradients of `loss_fn` against central differences
/// for every element of every parameter.
pub fn finite_difference_check<F>(
    loss_fn: F,
    params: &[Tensor],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, root) = eval(&loss_fn, params)?;
    let loss = tape.scalar(root);
    tape.backward(root)?;

    let mut reports = Vec::with_capacity(params.len());
    let mut work = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params[pi].len()]);
        let mut numeric = vec![0.0; analytic.len()];
        let mut max_err: f64 = 0.0;
        for k in 0..analytic.len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + cfg.step;
            let (t1, _, r1) = eval(&loss_fn, &work)?;
            work[pi].data_mut()[k] = orig - cfg.step;
            let (t2, _, r2) = eval(&loss_fn, &work)?;
            work[pi].data_mut()[k] = orig;
            numeric[k] = (t1.scalar(r1) - t2.scalar(r2)) / (2.0 * cfg.step);
            max_err = max_err.max(relative_error(analytic[k], numeric[k], cfg.floor));
        }
        reports.push(ParamReport {
            index: pi,
            max_rel_error: max_err,
            analytic,
            numeric,
        });
    }
    Ok(GradCheckReport {
        loss,
        params: reports,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_has_zero_gradients() {
        let p = vec![Tensor::row(vec![0.3, -1.2])];
        let rep = finite_difference_check(
            |t, v| {
                let z = t.scale(v[0], 0.0);
                let s = t.sum_all(z);
                Ok(t.add_scalar(s, 4.0))
            },
            &p,
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(rep.params[0].analytic, vec![0.0, 0.0]);
        assert_eq!(rep.params[0].numeric, vec![0.0, 0.0]);
        assert_eq!(rep.max_rel_error(), 0.0);
    }

    #[test]
    fn quadratic_matches_exactly() {
        let p = vec![Tensor::row(vec![1.0, 2.0])];
        let rep = finite_difference_check(
            |t, v| {
                let sq = t.square(v[0]);
                Ok(t.sum_all(sq))
            },
            &p,
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(rep.params[0].analytic, vec![2.0, 4.0]);
        for (n, e) in rep.params[0].numeric.iter().zip([2.0, 4.0]) {
            assert!((n - e).abs() < 1e-8);
        }
        assert!(rep.passed());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let p = vec![Tensor::row(vec![-1.0])];
        let err = finite_difference_check(
            |t, v| {
                let s = t.sqrt(v[0]);
                Ok(t.sum_all(s))
            },
            &p,
            GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
