//! Central finite differences, used as the gradient oracle in tests.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Result, StoaError};

/// `(f(θ + eps·e_i) − f(θ − eps·e_i)) / (2 eps)` for every coordinate of
/// every tensor in `params`.
pub fn finite_difference_grad<F>(mut loss_fn: F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> f64,
{
    if eps <= 0.0 {
        return Err(StoaError::Config(format!("eps must be positive, got {eps}")));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let (r, c) = params[p].shape();
        let mut grad = Tensor::zeros(r, c);
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = loss_fn(&work);
            work[p].data_mut()[i] = orig - eps;
            let minus = loss_fn(&work);
            work[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(StoaError::Numeric(format!(
                    "non-finite loss while differencing tensor {p} entry {i}"
                )));
            }
            grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Finite differences of a store-level loss at selected `(param, flat index)`
/// coordinates.
pub fn finite_difference_at<F>(
    mut loss_fn: F,
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    eps: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(StoaError::Config(format!("eps must be positive, got {eps}")));
    }
    let mut work = store.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &(id, i) in coords {
        let orig = store.get(id).data()[i];
        work.value_mut(id).data_mut()[i] = orig + eps;
        let plus = loss_fn(&work)?;
        work.value_mut(id).data_mut()[i] = orig - eps;
        let minus = loss_fn(&work)?;
        work.value_mut(id).data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(StoaError::Numeric(format!(
                "non-finite loss while differencing {}[{i}]",
                store.name(id)
            )));
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
