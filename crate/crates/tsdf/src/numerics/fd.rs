//! Central-difference gradients in f64, used to cross-check the tape.
//! Deliberately knows nothing about [`super::Tape`].

use super::NumericsError;

/// Central finite-difference gradient of a scalar function at `point`.
/// The function is evaluated in f64; `step` is the half-width h in
/// (f(x+h) - f(x-h)) / 2h.
pub fn finite_difference_gradient<F>(
    mut f: F,
    point: &[f64],
    step: f64,
) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(&[f64]) -> Result<f64, NumericsError>,
{
    if !(step > 0.0) {
        return Err(NumericsError::InvalidArg {
            op: "finite_difference_gradient",
            what: format!("step must be > 0, got {step}"),
        });
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let hi = f(&x)?;
        x[i] = orig - step;
        let lo = f(&x)?;
        x[i] = orig;
        let d = (hi - lo) / (2.0 * step);
        if !d.is_finite() {
            return Err(NumericsError::NonFinite {
                op: "finite_difference_gradient",
                node: i,
            });
        }
        grad.push(d);
    }
    Ok(grad)
}
