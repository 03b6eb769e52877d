//! Central finite-difference oracle for the tape.
//!
//! Only the forward pass of the function under test is evaluated here; the
//! reference gradient never touches `Graph::backward`.

use super::graph::{Graph, Var};
use super::value::Tensor;
use super::TensorError;

/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// Absolute discrepancies below this count as exact agreement.
pub const ABS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Compares analytic input gradients against central differences with step
/// `h`. `f` must build a scalar from the given input vars.
pub fn check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt_or_zero(v, t.shape()))
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let orig = t.data()[k];
            work[ti].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti].data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(if abs < ABS_TOL { 0.0 } else { rel });
            report.checked += 1;
        }
    }
    Ok(report)
}
