use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Compares tape gradients of a scalar function with central finite
/// differences. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over all coordinates.
///
/// `f` receives a fresh graph and the leaf for `at`, and must return a scalar
/// node. It has to be deterministic.
pub fn grad_check<F>(f: F, at: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(at), eps)
}

/// Multi-input form of [`grad_check`]: every tensor in `at` becomes a leaf.
pub fn grad_check_many<F>(f: F, at: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = at.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_or_zero(v)).collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = at.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe[t].data()[i];
            probe[t].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[t].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
