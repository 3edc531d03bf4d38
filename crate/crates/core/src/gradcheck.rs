//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates forward values, so it stays independent
//! of the reverse pass it is used to verify.

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Per input: `‖numeric − analytic‖₂ / max(‖numeric‖₂, ‖analytic‖₂)`.
    pub rel_errors: Vec<f64>,
    pub numeric: Vec<Vec<f64>>,
    pub analytic: Vec<Vec<f64>>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences with the given step. Runs in 64-bit.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * step);
        }
        numeric.push(g);
    }

    let rel_errors = numeric
        .iter()
        .zip(&analytic)
        .map(|(n, a)| rel_error(n, a))
        .collect();
    Ok(GradReport {
        rel_errors,
        numeric,
        analytic,
    })
}

/// Norm-wise relative error; two all-zero vectors compare equal.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Finite-difference check over parameters held in a [`ParamStore`]: the
/// analytic side binds them with [`Tape::param`], the numeric side perturbs
/// the stored values in place. Returns one relative error per id.
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    let mut grads = store.clone();
    grads.zero_grad();
    grads.accumulate_from(&tape, 1.0);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| {
            grads
                .get(*id)
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; store.get(*id).numel()])
        })
        .collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        Ok(tape.scalar(out))
    };
    let mut numeric = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(*id).numel();
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = store.get(*id).data()[i];
            store.get_mut(*id).data_mut()[i] = orig + step;
            let plus = eval(store)?;
            store.get_mut(*id).data_mut()[i] = orig - step;
            let minus = eval(store)?;
            store.get_mut(*id).data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * step);
        }
        numeric.push(g);
    }
    let rel_errors = numeric.iter().zip(&analytic).map(|(n, a)| rel_error(n, a)).collect();
    Ok(GradReport {
        rel_errors,
        numeric,
        analytic,
    })
}
