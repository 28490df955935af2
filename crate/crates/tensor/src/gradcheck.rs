//! Central finite-difference checks against tape gradients.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tape::{Tape, Tensor};

/// Below this magnitude, errors are measured in absolute rather than
/// relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn build(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> Self {
        let (worst_index, max_rel_error) = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(*a, *n))
            .enumerate()
            .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
        GradCheckReport {
            passed: max_rel_error < tol,
            analytic,
            numeric,
            max_rel_error,
            worst_index,
            tol,
        }
    }
}

fn eval_scalar(out: &Tensor) -> Result<f64> {
    if out.numel() != 1 {
        return Err(TensorError::NotScalar(out.shape()));
    }
    let v = out.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite("grad_check objective"));
    }
    Ok(v)
}

/// Compares the tape gradient of the scalar `f(x)` with central differences
/// `(f(x + h eᵢ) - f(x - h eᵢ)) / 2h` for every element of `x`.
pub fn grad_check<F>(f: F, x: &[f64], shape: &[usize], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.to_vec(), shape)?;
    let out = f(&leaf)?;
    eval_scalar(&out)?;
    out.backward()?;
    let analytic = leaf.grad_or_zeros();

    let eval_at = |xs: Vec<f64>| -> Result<f64> {
        let tape = Tape::new();
        let leaf = tape.leaf(xs, shape)?;
        eval_scalar(&f(&leaf)?)
    };
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        numeric.push((eval_at(plus)? - eval_at(minus)?) / (2.0 * h));
    }
    Ok(GradCheckReport::build(analytic, numeric, tol))
}

/// Same check over every scalar in a parameter store. `f` builds the loss
/// on the given tape, binding parameters from the store. When `stride > 1`
/// only every `stride`-th scalar is perturbed.
pub fn grad_check_params<F>(store: &mut ParamStore, f: F, h: f64, tol: f64, stride: usize) -> Result<GradCheckReport>
where
    F: Fn(&Rc<Tape>, &ParamStore) -> Result<Tensor>,
{
    store.zero_grad();
    let tape = Tape::new();
    let out = f(&tape, store)?;
    eval_scalar(&out)?;
    out.backward()?;
    tape.accumulate_param_grads(store, 1.0);

    let ids: Vec<_> = store.ids().collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut flat = 0usize;
    for id in ids {
        for j in 0..store.get(id).value.len() {
            flat += 1;
            if (flat - 1) % stride.max(1) != 0 {
                continue;
            }
            let orig = store.get(id).value[j];
            store.get_mut(id).value[j] = orig + h;
            let fp = eval_scalar(&f(&Tape::new(), store)?)?;
            store.get_mut(id).value[j] = orig - h;
            let fm = eval_scalar(&f(&Tape::new(), store)?)?;
            store.get_mut(id).value[j] = orig;
            analytic.push(store.get(id).grad[j]);
            numeric.push((fp - fm) / (2.0 * h));
        }
    }
    store.zero_grad();
    Ok(GradCheckReport::build(analytic, numeric, tol))
}
