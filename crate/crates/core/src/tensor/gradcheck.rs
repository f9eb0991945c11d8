//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it checks.

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::params::{GroupSet, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`; zero when both vanish.
    pub rel_error: f64,
    pub max_abs_error: f64,
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
}

impl GradCheckReport {
    fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        for &(a, n) in pairs {
            diff2 += (a - n) * (a - n);
            a2 += a * a;
            n2 += n * n;
            max_abs = max_abs.max((a - n).abs());
        }
        let denom = a2.sqrt().max(n2.sqrt());
        GradCheckReport {
            rel_error: if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom },
            max_abs_error: max_abs,
            checked: pairs.len(),
        }
    }

    /// Combines reports as if all derivatives had been compared at once.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            rel_error: self.rel_error.max(other.rel_error),
            max_abs_error: self.max_abs_error.max(other.max_abs_error),
            checked: self.checked + other.checked,
        }
    }
}

/// Checks gradients of the scalar `f(inputs)` with respect to every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'static>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut work = inputs.to_vec();
    let mut pairs = Vec::new();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + step;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - step;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            pairs.push((analytic[i][j], (fp - fm) / (2.0 * step)));
        }
    }
    Ok(GradCheckReport::from_pairs(&pairs))
}

/// Checks gradients of `f` with respect to every parameter in `trainable`.
/// At most `max_per_param` evenly spaced entries of each parameter are
/// perturbed (`None` checks all of them).
pub fn gradcheck_params<F>(
    store: &ParamStore,
    trainable: GroupSet,
    f: F,
    step: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store, trainable);
    let loss = f(&mut tape)?;
    tape.backward(loss)?;
    let grads: std::collections::HashMap<_, Vec<f64>> = tape
        .param_grads()
        .into_iter()
        .map(|(id, g)| (id, g.to_vec()))
        .collect();
    drop(tape);

    let mut work = store.clone();
    let mut pairs = Vec::new();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| trainable.contains(p.group))
        .map(|(id, p)| (id, p.value.numel()))
        .collect();
    for (id, n) in ids {
        let picks: Vec<usize> = match max_per_param {
            Some(k) if k < n => (0..k).map(|t| t * n / k).collect(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let x0 = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = x0 + step;
            let fp = eval_store(&work, &f)?;
            work.get_mut(id).data_mut()[j] = x0 - step;
            let fm = eval_store(&work, &f)?;
            work.get_mut(id).data_mut()[j] = x0;
            let a = grads.get(&id).map_or(0.0, |g| g[j]);
            pairs.push((a, (fp - fm) / (2.0 * step)));
        }
    }
    Ok(GradCheckReport::from_pairs(&pairs))
}

fn eval_store<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store, GroupSet::NONE);
    let loss = f(&mut tape)?;
    tape.value(loss).item()
}
