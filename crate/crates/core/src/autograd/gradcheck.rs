use super::{AutogradError, Tape, Tensor, Var};

/// Compares the tape gradient of a scalar function against central
/// differences.
///
/// `f` builds the function on a fresh tape from the recorded input. Returns
/// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64, AutogradError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutogradError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone())?;
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.wrt(x)?;

    let eval = |p: Tensor| -> Result<f64, AutogradError> {
        let mut t = Tape::new();
        let v = t.constant(p)?;
        let out = f(&mut t, v)?;
        let val = t.value(out).item();
        if !val.is_finite() {
            return Err(AutogradError::NonFinite { op: "grad_check" });
        }
        Ok(val)
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
