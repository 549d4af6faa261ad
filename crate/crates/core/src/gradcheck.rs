//! Central finite-difference gradient checks.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::c(1e-8));
    (analytic - numeric).abs() / denom
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, y: Var) -> Result<T> {
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Maximum relative error between the tape gradient of `f` at `point` and
/// central differences with step `eps`.
pub fn finite_difference_check<T, F>(f: F, point: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    gradient_check(|tape, xs| f(tape, xs[0]), core::slice::from_ref(point), eps)
}

/// Multi-input form of [`finite_difference_check`]: every input is perturbed
/// coordinate by coordinate.
pub fn gradient_check<T, F>(f: F, inputs: &[Tensor<T>], eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if eps <= T::zero() {
        return Err(Error::Invalid(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;

    let eval = |pert: &[Tensor<T>]| -> Result<T> {
        let mut t = Tape::new();
        let vs: Vec<Var> = pert.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        scalar_of(&t, out)
    };

    let mut worst = T::zero();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*v).unwrap_or(&zeros).clone();
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (eps + eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Checks gradients with respect to every scalar of a parameter store. `f`
/// receives a tape on which the (possibly perturbed) store is already bound.
pub fn param_gradient_check<T, F>(store: &ParamStore<T>, f: F, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.bind(store, true);
    let y = f(&mut tape)?;
    scalar_of(&tape, y)?;
    let mut grads = tape.backward(y)?;
    let analytic = grads.param_grads(store);

    let eval = |s: &ParamStore<T>| -> Result<T> {
        let mut t = Tape::new();
        t.bind(s, false);
        let out = f(&mut t)?;
        scalar_of(&t, out)
    };

    let mut work = store.clone();
    let mut worst = T::zero();
    for id in store.ids() {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (eps + eps);
            worst = worst.max(relative_error(analytic[id.index()].data()[i], numeric));
        }
    }
    Ok(worst)
}
