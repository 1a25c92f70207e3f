//! Central finite-difference oracle for tape gradients.

use crate::array::Array;
use crate::error::{DiffError, Result};
use crate::tape::{Tape, Var};

/// Where the worst disagreement between analytic and numeric gradients was.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter index, flat element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

/// Relative error with the fixed `1e-8` floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Array]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    value
        .item()
        .ok_or_else(|| DiffError::NonScalarRoot(value.shape().to_vec()))
}

/// Checks every element of every parameter. See [`finite_difference_check_subset`].
pub fn finite_difference_check<F>(f: F, params: &[Array], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    run(&f, params, h, |_, n| (0..n).collect())
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(p+h) - f(p-h)) / 2h`, probing at most
/// `probes_per_param` evenly spaced elements of each parameter.
///
/// `f` receives the parameters already registered on a fresh tape. It must be
/// deterministic: the unperturbed point is evaluated twice and any difference
/// is reported as [`DiffError::NonDeterministic`].
pub fn finite_difference_check_subset<F>(
    f: F,
    params: &[Array],
    h: f64,
    probes_per_param: usize,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    run(&f, params, h, |_, n| {
        if n <= probes_per_param {
            (0..n).collect()
        } else {
            let stride = n as f64 / probes_per_param as f64;
            (0..probes_per_param)
                .map(|i| ((i as f64 + 0.5) * stride) as usize)
                .collect()
        }
    })
}

fn run<F>(
    f: &F,
    params: &[Array],
    h: f64,
    select: impl Fn(usize, usize) -> Vec<usize>,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(DiffError::InvalidArgument(format!(
            "step h = {h} must be positive"
        )));
    }
    let first = evaluate(f, params)?;
    let second = evaluate(f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(DiffError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        probes: 0,
    };
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("gradient for every parameter");
        for ei in select(pi, params[pi].len()) {
            let orig = params[pi].data()[ei];
            probe[pi].data_mut()[ei] = orig + h;
            let plus = evaluate(f, &probe)?;
            probe[pi].data_mut()[ei] = orig - h;
            let minus = evaluate(f, &probe)?;
            probe[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[ei];
            let err = relative_error(a, numeric);
            report.probes += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, ei));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
