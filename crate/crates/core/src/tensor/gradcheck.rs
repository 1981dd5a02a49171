//! Central finite-difference gradient checks (64-bit only).

use super::Tensor;
use crate::error::{PalError, Result};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Largest relative error between the analytic gradient of scalar `f` with
/// respect to `x` and its central difference with step `eps`.
pub fn grad_check(
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<f64> {
    if !x.is_leaf() {
        return Err(PalError::Contract("grad_check needs a leaf input".into()));
    }
    let was = x.requires_grad();
    x.set_requires_grad(true);
    x.zero_grad();
    let y = f(x)?;
    if y.numel() != 1 {
        return Err(PalError::Contract(format!("grad_check: f returned shape {:?}", y.shape())));
    }
    y.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    x.zero_grad();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let up = f(x)?.item();
        x.data_mut()[i] = orig - eps;
        let down = f(x)?.item();
        x.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * eps)));
    }
    x.set_requires_grad(was);
    Ok(worst)
}

/// [`grad_check`] over several leaves at once; `f` closes over them. Returns
/// the worst relative error and the index of the tensor where it occurred.
pub fn grad_check_many(
    f: impl Fn() -> Result<Tensor<f64>>,
    params: &[Tensor<f64>],
    eps: f64,
) -> Result<(f64, usize)> {
    for p in params {
        p.zero_grad();
    }
    let y = f()?;
    y.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let mut worst = (0.0f64, 0usize);
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + eps;
            let up = f()?.item();
            p.data_mut()[i] = orig - eps;
            let down = f()?.item();
            p.data_mut()[i] = orig;
            let e = rel_err(analytic[pi][i], (up - down) / (2.0 * eps));
            if e > worst.0 {
                worst = (e, pi);
            }
        }
        p.zero_grad();
    }
    Ok(worst)
}
