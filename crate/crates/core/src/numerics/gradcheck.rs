//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only ever runs the forward closure; it never reads a gradient
//! produced by the tape, so it stays independent of every backward rule.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `f` with respect to every input against
/// central differences with step `eps`. `f` must build a scalar.
pub fn check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new().no_grad();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            out.max_rel_err = out.max_rel_err.max(rel_err(a, numeric));
            out.max_abs_err = out.max_abs_err.max((a - numeric).abs());
            out.checked += 1;
        }
    }
    Ok(out)
}

/// Finite-difference check of parameter gradients. `f` builds a scalar loss
/// on a tape bound to the given store. At most `per_param` entries of each
/// parameter are probed (evenly strided) to bound the cost on larger models.
pub fn check_params<F>(store: &ParamStore, eps: f64, per_param: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    check_params_where(store, eps, per_param, |_| true, f)
}

/// As [`check_params`], probing only parameters whose name passes `probe`.
/// Needed where a stop-gradient makes the loss depend on parameters that
/// deliberately receive no gradient.
pub fn check_params_where<P, F>(store: &ParamStore, eps: f64, per_param: usize, probe: P, f: F) -> Result<GradCheck>
where
    P: Fn(&str) -> bool,
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let loss = f(&mut tape)?;
    tape.backward(loss)?;
    let analytic: std::collections::HashMap<ParamId, Vec<f64>> = tape
        .param_grads()
        .into_iter()
        .map(|(id, g)| (id, g.to_vec()))
        .collect();
    drop(tape);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::with_params(s).no_grad();
        let l = f(&mut t)?;
        Ok(t.value(l).item())
    };

    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work = store.clone();
    for id in store.ids().filter(|id| probe(store.name(*id))) {
        let len = store.get(id).len();
        let stride = (len / per_param.max(1)).max(1);
        for j in (0..len).step_by(stride).take(per_param) {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(&id).map_or(0.0, |g| g[j]);
            out.max_rel_err = out.max_rel_err.max(rel_err(a, numeric));
            out.max_abs_err = out.max_abs_err.max((a - numeric).abs());
            out.checked += 1;
        }
    }
    Ok(out)
}
