use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` at `x` against central differences.
///
/// Returns the largest elementwise relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }

    let g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&g, xv)?;
    if out.shape().iter().product::<usize>() != 1 {
        return Err(Error::invalid(format!(
            "grad_check: function returned shape {:?}, expected a scalar",
            out.shape()
        )));
    }
    let analytic = if out.is_tracked() {
        g.backward(out)?
            .get(&xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()))
    } else {
        // f does not depend on x at all
        Tensor::zeros(x.shape())
    };

    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = g.constant(t);
        Ok(f(&g, v)?.item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
