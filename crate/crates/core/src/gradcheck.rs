//! Central finite-difference gradient checks.
//!
//! The numerical side only ever evaluates forward passes, so it stays
//! independent of the reverse-mode code it is checking.

use crate::error::Result;
use crate::tensor::{Graph, ParameterSet, Tensor, Var};

pub const STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so that gradients that are
/// zero on both sides compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Report {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl Report {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_err = self.max_rel_err.max(relative_error(analytic, numeric));
        self.checked += 1;
    }
}

/// Checks `d f / d inputs` for a scalar-valued `f`.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<Report>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new().with_finite_checks(true);
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = Report::default();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].numel()];
        let analytic = grads.wrt(*v).unwrap_or(&zeros).to_vec();
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + STEP;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - STEP;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            report.record(analytic[i], (plus - minus) / (2.0 * STEP));
        }
    }
    Ok(report)
}

/// Checks `d f / d params` for every element of every parameter.
pub fn check_params<F>(params: &ParameterSet, f: F) -> Result<Report>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let mut g = Graph::new().with_finite_checks(true);
    let out = f(&mut g, params)?;
    let grads = g.backward(out)?;

    let mut report = Report::default();
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, Tensor::numel);
        let zeros = vec![0.0; n];
        let analytic = grads.param(&name).unwrap_or(&zeros).to_vec();
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                work.get_mut(&name).unwrap().data_mut()[i] = x;
                let mut g = Graph::inference().with_finite_checks(true);
                let out = f(&mut g, &work)?;
                Ok(g.value(out).item())
            };
            let plus = eval(orig + STEP)?;
            let minus = eval(orig - STEP)?;
            eval(orig)?;
            report.record(analytic[i], (plus - minus) / (2.0 * STEP));
        }
    }
    Ok(report)
}
