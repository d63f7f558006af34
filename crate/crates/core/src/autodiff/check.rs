//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the analytic gradient of a scalar function `f` at `x` against
/// central differences with step `h`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), h)
}

/// Multi-input variant of [`finite_diff_check`]; the error is the maximum
/// over every coordinate of every input.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = xs.to_vec();
    for (j, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(v, xs[j].numel());
        for i in 0..xs[j].numel() {
            let orig = xs[j].data()[i];
            work[j].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[j].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[j].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
