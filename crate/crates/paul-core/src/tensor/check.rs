//! Central finite-difference gradient checking.

use super::{Graph, Tensor, TensorError, Var};

/// Compares analytic gradients of a scalar-valued tensor function against
/// central finite differences. Returns the max over coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let out = f(&mut g, leaf)?;
    if !g.value(out).is_scalar() {
        return Err(TensorError::Contract("grad_check requires a scalar-valued function".into()));
    }
    g.backward(out)?;
    let analytic = g.grad(leaf).ok_or_else(|| {
        TensorError::Contract("function output does not depend on the input".into())
    })?;
    let analytic = analytic.to_vec();

    let eval = |data: Vec<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let leaf = g.leaf(Tensor::new(x.shape().to_vec(), data)?, false);
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1e-8f64.max(a.abs() + numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
