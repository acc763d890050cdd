use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn eval<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = f(&mut tape, xv)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::invalid("grad_check", "function must be scalar-valued"));
    }
    let y = tape.value(out).item();
    if !y.is_finite() {
        return Err(Error::NonFinite("grad_check evaluation".into()));
    }
    Ok(y)
}

/// Compares the tape gradient of a scalar function with central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// over all elements of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape.grad(xv).to_vec();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("grad_check gradient".into()));
    }

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.values_mut()[i] += step;
        let mut minus = x.clone();
        minus.values_mut()[i] -= step;
        let numeric = (eval(&f, plus)? - eval(&f, minus)?) / (2.0 * step);
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
