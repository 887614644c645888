use crate::error::Result;

use super::{Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar `f(params)` with central finite
/// differences and returns the largest relative error over all entries.
///
/// `f` receives a fresh tape and one leaf per parameter tensor.
pub fn gradient_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (p, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, params[p].shape());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
