//! Finite-difference validation of tape gradients.

use std::collections::BTreeMap;

use crate::error::{CdsmError, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tape::{Tape, Var};

/// A scalar-valued computation over named parameters, rebuilt on every call.
pub trait ScalarFn {
    fn eval(&self, tape: &Tape, params: &BTreeMap<String, Var>) -> Result<Var>;
}

impl<F> ScalarFn for F
where
    F: Fn(&Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    fn eval(&self, tape: &Tape, params: &BTreeMap<String, Var>) -> Result<Var> {
        self(tape, params)
    }
}

/// Compare the tape gradient of `f` against central finite differences
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every parameter coordinate.
/// Returns the worst relative error, with the error at each coordinate
/// normalized by `max(1, |analytic|, |numeric|)`.
pub fn grad_check<F: ScalarFn>(f: &F, store: &ParamStore, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(CdsmError::Numeric("grad_check eps must be > 0".into()));
    }
    let tape = Tape::new();
    let leaves = store.leaves(&tape);
    let loss = f.eval(&tape, &leaves)?;
    if !tape.value(loss).is_finite() {
        return Err(CdsmError::Numeric("non-finite loss in grad_check".into()));
    }
    let grads = tape.backward(loss)?;

    let eval_at = |perturbed: &ParamStore| -> Result<f64> {
        let t = Tape::inference();
        let leaves = perturbed.leaves(&t);
        let v = f.eval(&t, &leaves)?;
        let out = t.item(v);
        if !out.is_finite() {
            return Err(CdsmError::Numeric("non-finite value in grad_check".into()));
        }
        Ok(out)
    };

    let mut worst: f64 = 0.0;
    let mut perturbed = store.clone();
    let names: Vec<String> = store.names().cloned().collect();
    for name in &names {
        let n = store.get(name)?.len();
        let analytic =
            grads.get_or_zeros(*leaves.get(name).unwrap(), &store.get(name)?.shape);
        for i in 0..n {
            let orig = store.get(name)?.data[i];
            perturbed.get_mut(name)?.data[i] = orig + eps;
            let plus = eval_at(&perturbed)?;
            perturbed.get_mut(name)?.data[i] = orig - eps;
            let minus = eval_at(&perturbed)?;
            perturbed.get_mut(name)?.data[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data[i];
            let err = (a - numeric).abs() / f64::max(1.0, f64::max(a.abs(), numeric.abs()));
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn square_at_three() {
        // f(x) = x·x at x=3: analytic 6, central differences exact for
        // polynomials up to rounding.
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![3.0]));
        let f = |tape: &Tape, p: &BTreeMap<String, Var>| tape.dot(p["x"], p["x"]);
        let err = grad_check(&f, &store, 1e-5).unwrap();
        assert!(err < 1e-8, "err = {}", err);
    }

    #[test]
    fn dot_with_self() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::vector(vec![1.0, 2.0]));
        let f = |tape: &Tape, p: &BTreeMap<String, Var>| tape.dot(p["a"], p["a"]);
        // also confirm the analytic gradient is [2, 4]
        let tape = Tape::new();
        let leaves = store.leaves(&tape);
        let loss = f(&tape, &leaves).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(leaves["a"]).unwrap().data, vec![2.0, 4.0]);
        let err = grad_check(&f, &store, 1e-5).unwrap();
        assert!(err < 1e-8, "err = {}", err);
    }

    #[test]
    fn rejects_bad_eps() {
        let store = ParamStore::new();
        let f = |tape: &Tape, _: &BTreeMap<String, Var>| {
            Ok(tape.leaf(Tensor::scalar(0.0)))
        };
        assert!(grad_check(&f, &store, 0.0).is_err());
    }
}
