//! Central-difference gradient checking.

use super::{NumArray, NumericsError, Tape, Var};

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, flat coordinate)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`, over every coordinate of every parameter.
///
/// `f` builds the function on the given tape from one leaf per parameter.
pub fn grad_check<F, E>(f: F, params: &[NumArray], eps: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<NumArray> = vars.iter().zip(params).map(|(&v, p)| grads.wrt(v, p)).collect();

    let eval = |values: &[NumArray]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<NumArray> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for k in 0..param.numel() {
            let orig = param.values()[k];
            work[pi].values_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[pi].values_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[pi].values_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].values()[k];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((pi, k));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
