//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences at every coordinate of `x`.
///
/// `f` receives a fresh tape and the leaf for `x` and returns the scalar
/// output. The result is
/// `max_i |analytic_i − (f(x+h·e_i) − f(x−h·e_i)) / 2h| / max(1, |analytic_i|)`.
/// The denominator uses the step actually representable in `f32`, and the
/// difference is formed in `f64`.
pub fn finite_difference_check<F>(mut f: F, x: &Tensor, h: f32) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let mut leaf = x.clone();
    leaf.set_requires_grad(true);
    let xv = tape.leaf(leaf);
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let o = f(&mut t, v)?;
        t.item_f64(o)
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let step = plus.data()[i] as f64 - minus.data()[i] as f64;
        let fp = eval(plus)?;
        let fm = eval(minus)?;
        let numeric = (fp - fm) / step;
        let err = (a as f64 - numeric).abs() / (a as f64).abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
