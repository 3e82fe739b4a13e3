//! Central-difference verification of tape gradients.

use super::tape::{AutodiffError, Result, Tape};
use super::tensor::Tensor;

/// Builds a fresh scalar graph from `x` and compares the tape gradient with
/// central finite differences, returning the worst relative error
/// `|analytic − numeric| / max(1, |analytic|)` over all coordinates.
///
/// `f` must be deterministic; a non-finite forward value is rejected.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    assert!(eps > 0.0, "eps must be positive");
    let probe = x.detached().with_grad();
    let mut tape = Tape::new();
    let leaf = tape.lease(&probe);
    let y = f(&mut tape, &leaf)?;
    if !y.item().is_finite() {
        return Err(AutodiffError::NonFinite {
            op: "finite_diff_check",
        });
    }
    let analytic = tape
        .backward(&y)?
        .get(&leaf)
        .expect("leaf requires grad");

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.lease(t);
        let y = f(&mut tape, &leaf)?;
        if !y.item().is_finite() {
            return Err(AutodiffError::NonFinite {
                op: "finite_diff_check",
            });
        }
        Ok(y.item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let v = x.data()[i];
        let up = eval(&probe.with_value_at(i, v + eps))?;
        let down = eval(&probe.with_value_at(i, v - eps))?;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
