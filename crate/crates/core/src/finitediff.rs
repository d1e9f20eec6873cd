//! Central finite-difference gradients.
//!
//! This is the independent reference the analytic backward pass is checked
//! against. It knows nothing about networks: it perturbs one coordinate of
//! a parameter vector at a time and evaluates a caller-supplied loss.

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::tensor::Scalar;

/// Central-difference gradient of `loss_fn` at `params`:
/// `g_i = (f(p + eps e_i) - f(p - eps e_i)) / (2 eps)`.
///
/// Cost is two loss evaluations per parameter; intended for small test
/// networks, not training.
pub fn finite_diff_grad<T, F>(loss_fn: F, params: &ParamVector<T>, eps: f64) -> Result<ParamVector<T>>
where
    T: Scalar,
    F: Fn(&ParamVector<T>) -> Result<T>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let step = T::from_f64(eps);
    let mut grad = params.zeros_like();
    let mut work = params.clone();
    for si in 0..params.segments().len() {
        for vi in 0..params.segments()[si].values.len() {
            let orig = work.segments()[si].values[vi];

            set(&mut work, si, vi, orig + step);
            let up = loss_fn(&work)?;
            set(&mut work, si, vi, orig - step);
            let down = loss_fn(&work)?;
            set(&mut work, si, vi, orig);

            let g = (up.as_f64() - down.as_f64()) / (2.0 * eps);
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "finite difference produced non-finite gradient in segment '{}' index {vi}",
                    params.segments()[si].name
                )));
            }
            set(&mut grad, si, vi, T::from_f64(g));
        }
    }
    Ok(grad)
}

fn set<T: Scalar>(pv: &mut ParamVector<T>, seg: usize, idx: usize, v: T) {
    // Direct slot write; layout is never changed here.
    let seg = &mut pv.segments_mut()[seg];
    seg.values[idx] = v;
}

/// Largest element-wise relative error between two gradients, with a floor
/// on the denominator so near-zero coordinates compare absolutely:
/// `max_i |a_i - b_i| / max(floor, |a_i|, |b_i|)`.
pub fn max_rel_error<T: Scalar>(
    a: &ParamVector<T>,
    b: &ParamVector<T>,
    floor: f64,
) -> Result<f64> {
    a.check_same_layout(b)?;
    let mut worst = 0.0f64;
    for (x, y) in a.iter_values().zip(b.iter_values()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        let denom = floor.max(x.abs()).max(y.abs());
        worst = worst.max((x - y).abs() / denom);
    }
    Ok(worst)
}
