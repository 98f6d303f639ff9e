use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Maximum over coordinates of `|analytic − numeric| / max(1, |analytic|)`,
/// using central differences with the given step.
///
/// `f` builds a scalar from the input on whatever tape it is handed.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let loss = f(&mut tape, xv)?;
    let analytic = tape.backward(loss)?.take(xv);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::inference();
        let v = tape.constant(t)?;
        let out = f(&mut tape, v)?;
        let y = tape.value(out).item();
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation"));
        }
        Ok(y)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
