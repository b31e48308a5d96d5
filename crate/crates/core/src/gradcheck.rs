//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{LabError, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
}

impl GradCheckReport {
    /// True when no coordinates were available to check.
    pub fn is_vacuous(&self) -> bool {
        self.checked == 0
    }
}

/// Compares analytic gradients against a sixth-order central difference
/// `(45 d1 - 9 d2 + d3) / 60h`, where `dk = L(x + kh) - L(x - kh)`, on
/// `samples` coordinates drawn uniformly (with replacement) from all
/// parameter entries. The error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
///
/// `loss_fn` builds a scalar loss on the given tape; it must be
/// deterministic (no dropout).
pub fn finite_difference_check<F>(
    loss_fn: F,
    params: &ParamStore<f64>,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Tape<'p, f64>, &'p ParamStore<f64>) -> Result<Var>,
{
    if samples == 0 {
        return Err(LabError::invalid("finite_difference_check needs samples >= 1"));
    }
    if !(step > 0.0) {
        return Err(LabError::invalid("finite-difference step must be > 0"));
    }
    let total = params.numel();
    if total == 0 {
        return Ok(GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            worst: None,
            worst_values: (0.0, 0.0),
        });
    }

    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::inference();
        let loss = loss_fn(&mut tape, p)?;
        Ok(tape.value(loss).item())
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(LabError::NonDeterministic { first, second });
    }

    let grads = {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, params)?;
        tape.backward(loss)?
    };

    let sizes: Vec<(String, usize)> = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.len()))
        .collect();
    let mut rng = RngStream::root(seed).split("sampling");
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        worst_values: (0.0, 0.0),
    };
    for _ in 0..samples {
        let mut flat = rng.below(total);
        let (name, idx) = sizes
            .iter()
            .find_map(|(n, len)| {
                if flat < *len {
                    Some((n.clone(), flat))
                } else {
                    flat -= len;
                    None
                }
            })
            .expect("flat index within total");
        let analytic = grads.get(&name).map_or(0.0, |g| g.data()[idx]);

        let original = params.require(&name)?.data()[idx];
        let mut at = |offset: f64| -> Result<f64> {
            work.get_mut(&name).expect("cloned layout").data_mut()[idx] = original + offset;
            eval(&work)
        };
        let (p1, m1) = (at(step)?, at(-step)?);
        let (p2, m2) = (at(2.0 * step)?, at(-2.0 * step)?);
        let (p3, m3) = (at(3.0 * step)?, at(-3.0 * step)?);
        work.get_mut(&name).expect("cloned layout").data_mut()[idx] = original;

        let numeric = (45.0 * (p1 - m1) - 9.0 * (p2 - m2) + (p3 - m3)) / (60.0 * step);
        let denom = analytic.abs().max(numeric.abs()).max(1e-12);
        let err = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((name, idx));
            report.worst_values = (analytic, numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic<'p>(tape: &mut Tape<'p, f64>, p: &'p ParamStore<f64>) -> Result<Var> {
        let x = tape.param("x", p.require("x")?);
        let sq = tape.mul(x, x)?;
        let s = tape.sum(sq)?;
        tape.scale(s, 0.5)
    }

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_slice(&[4], &[0.3, -1.2, 2.5, 0.01])).unwrap();
        for step in [1e-3, 1e-4, 1e-5] {
            let r = finite_difference_check(quadratic, &p, 32, step, 1).unwrap();
            assert!(r.max_rel_error < 1e-8, "step {step}: {r:?}");
            assert_eq!(r.checked, 32);
        }
    }

    #[test]
    fn empty_store_is_vacuous_pass() {
        let p = ParamStore::<f64>::new();
        let r = finite_difference_check(
            |tape: &mut Tape<'_, f64>, _p: &ParamStore<f64>| {
                let c = tape.constant(Tensor::scalar(1.0));
                Ok(c)
            },
            &p,
            10,
            1e-5,
            0,
        )
        .unwrap();
        assert!(r.is_vacuous());
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn nondeterministic_loss_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_slice(&[1], &[1.0])).unwrap();
        let err = finite_difference_check(
            |tape: &mut Tape<'_, f64>, p: &ParamStore<f64>| {
                calls.set(calls.get() + 1.0);
                let x = tape.param("x", p.require("x")?);
                tape.scale(x, calls.get())
            },
            &p,
            1,
            1e-5,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, LabError::NonDeterministic { .. }));
    }
}
