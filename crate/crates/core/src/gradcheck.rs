//! Central finite-difference gradient checks.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradient entries smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, REL_FLOOR)`
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

/// Relative discrepancy with an absolute floor for near-zero entries.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of a scalar function `f` at `x` with central
/// differences of step `step`.
///
/// `f` receives a fresh tape and the leaf for `x` and must return a scalar.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    check(f, x, step, tol, false)
}

/// Like [`finite_difference_check`], but the numeric side is the Richardson
/// combination `(4 D(h/2) - D(h)) / 3` of two central differences, which
/// cancels the `h^2` truncation term.
///
/// Use it where the function has large third derivatives at the probe point,
/// e.g. a selectivity ratio over a nearly silent unit.
pub fn extrapolated_difference_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    check(f, x, step, tol, true)
}

fn check<F>(mut f: F, x: &Tensor, step: f64, tol: f64, extrapolate: bool) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut eval = |point: &Tensor, with_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(point.clone(), with_grad);
        let out = f(&mut tape, xv)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_difference_check".into()));
        }
        if !with_grad {
            return Ok((v, None));
        }
        tape.backward(out)?;
        let g = tape.grad(xv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; point.len()]);
        Ok((v, Some(g)))
    };
    let (_, analytic) = eval(x, true)?;
    let analytic = analytic.expect("requested");
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut central = |h: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + h;
            let (fp, _) = eval(&probe, false)?;
            probe.data_mut()[i] = orig - h;
            let (fm, _) = eval(&probe, false)?;
            probe.data_mut()[i] = orig;
            Ok((fp - fm) / (2.0 * h))
        };
        let d = central(step)?;
        numeric.push(if extrapolate { (4.0 * central(step / 2.0)? - d) / 3.0 } else { d });
    }
    let mut max_rel_error: f64 = 0.0;
    let mut max_abs_error: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        max_rel_error = max_rel_error.max(relative_error(*a, *n));
        max_abs_error = max_abs_error.max((a - n).abs());
    }
    Ok(GradCheckReport { analytic, numeric, max_rel_error, max_abs_error, passed: max_rel_error <= tol })
}
