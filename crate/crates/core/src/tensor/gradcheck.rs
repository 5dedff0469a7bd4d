//! Central-difference gradient checking against the tape.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Checks every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Matrix], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, params, h, usize::MAX).map(|r| r.max_rel_error)
}

/// Like [`grad_check`] but visits at most `per_param` evenly strided
/// coordinates of each parameter. Error per coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check_sampled<F>(f: F, params: &[Matrix], h: f64, per_param: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let eval = |ps: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vars)?;
        let v = t.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value {v} is not finite")));
        }
        Ok(v)
    };

    let mut t = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| t.param(p.clone())).collect();
    let out = f(&mut t, &vars)?;
    if !t.value(out).item().is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    t.backward(out)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| t.grad(v)).collect();

    let mut work = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    for (pi, p) in params.iter().enumerate() {
        let len = p.len();
        let stride = if per_param >= len { 1 } else { len.div_ceil(per_param) };
        for idx in (0..len).step_by(stride.max(1)) {
            let orig = p.data()[idx];
            work[pi].data_mut()[idx] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[idx] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[idx];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, idx);
            }
        }
    }
    Ok(report)
}
