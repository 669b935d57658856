use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Offender>,
    pub tol: f64,
    pub passed: bool,
    pub checked: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Offender {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Single-input convenience wrapper around [`grad_check_inputs`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_inputs(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps, tol)
}

/// Checks `∂f/∂inputs` for a scalar-valued `f` against central finite
/// differences with step `eps`.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let base = eval(inputs)?;
    if base.to_bits() != eval(inputs)?.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().requiring_grad()))
        .collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst: None,
        tol,
        passed: true,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let n = inputs[input].numel();
        let analytic = g.grad(*var).map(<[f64]>::to_vec).unwrap_or(vec![0.0; n]);
        for index in 0..n {
            let orig = inputs[input].data()[index];
            probe[input].data_mut()[index] = orig + eps;
            let fp = eval(&probe)?;
            probe[input].data_mut()[index] = orig - eps;
            let fm = eval(&probe)?;
            probe[input].data_mut()[index] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = relative_error(analytic[index], numeric);
            report.checked += 1;
            if !(err <= report.max_rel_err) || report.worst.is_none() {
                report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some(Offender {
                    input,
                    index,
                    analytic: analytic[index],
                    numeric,
                });
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}
