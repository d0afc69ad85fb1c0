//! Central finite differences, the reference every analytic gradient is
//! checked against.

use super::layer::Mode;
use super::loss::Targets;
use super::model::Model;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// `(f(θ+εe_i) − f(θ−εe_i)) / 2ε` for every coordinate `i`.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        bail!(Config, "finite difference epsilon must be positive, got {epsilon}");
    }
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        x[i] = theta[i] + epsilon;
        let plus = f(&x)?;
        x[i] = theta[i] - epsilon;
        let minus = f(&x)?;
        x[i] = theta[i];
        out.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(out)
}

/// Finite-difference gradient of the mini-batch mean loss with respect to
/// every model parameter, shaped like [`Model::params`]. The model is not
/// modified.
pub fn finite_diff_grad(
    model: &Model,
    batch: &Tensor,
    targets: &Targets,
    epsilon: f64,
    mode: Mode,
) -> Result<Vec<Tensor>> {
    let mut probe = model.clone();
    let theta = model.flat_params();
    let flat = central_difference(
        |p| {
            probe.set_flat_params(p)?;
            probe.loss_value(batch, targets, mode)
        },
        &theta,
        epsilon,
    )?;
    let mut out = Vec::new();
    let mut off = 0;
    for p in model.params() {
        let n = p.len();
        out.push(Tensor::from_parts(p.shape().to_vec(), flat[off..off + n].to_vec())?);
        off += n;
    }
    Ok(out)
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over matching entries.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&p, &q)| (p - q).abs() / p.abs().max(q.abs()).max(floor))
        .fold(0.0, f64::max)
}
