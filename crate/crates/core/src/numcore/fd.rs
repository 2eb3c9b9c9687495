use super::{ParamSet, Scalar};
use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Central-difference gradient of `f` at `params`, one scalar at a time.
///
/// `f` receives the perturbed parameter set; every perturbation is undone
/// before the next evaluation.
pub fn finite_difference_gradient<T, F>(f: F, params: &ParamSet<T>, eps: T) -> Result<ParamSet<T>>
where
    T: Scalar,
    F: FnMut(&ParamSet<T>) -> Result<T>,
{
    stencil_gradient(f, params, eps, &[(1.0, 1.0), (-1.0, -1.0)], 2.0)
}

/// Five-point central difference, `(−f₂ + 8f₁ − 8f₋₁ + f₋₂) / 12h`.
/// Truncation error is `O(h⁴)` instead of `O(h²)`.
pub fn finite_difference_gradient_o4<T, F>(f: F, params: &ParamSet<T>, eps: T) -> Result<ParamSet<T>>
where
    T: Scalar,
    F: FnMut(&ParamSet<T>) -> Result<T>,
{
    stencil_gradient(
        f,
        params,
        eps,
        &[(2.0, -1.0), (1.0, 8.0), (-1.0, -8.0), (-2.0, 1.0)],
        12.0,
    )
}

/// `Σ c·f(x + k·h) / (denom·h)` over the `(k, c)` taps.
fn stencil_gradient<T, F>(
    mut f: F,
    params: &ParamSet<T>,
    eps: T,
    taps: &[(f64, f64)],
    denom: f64,
) -> Result<ParamSet<T>>
where
    T: Scalar,
    F: FnMut(&ParamSet<T>) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut probe = params.clone();
    let mut grads = params.zeros_like();
    let scale = T::lit(denom) * eps;
    for p in 0..params.len() {
        for k in 0..params.at(p).len() {
            let original = params.at(p).as_slice()[k];
            let mut acc = T::zero();
            for &(offset, coeff) in taps {
                probe.at_mut(p).as_mut_slice()[k] = original + T::lit(offset) * eps;
                let v = f(&probe)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        name: params.name(p).to_string(),
                        index: k,
                    });
                }
                acc += T::lit(coeff) * v;
            }
            probe.at_mut(p).as_mut_slice()[k] = original;
            grads.at_mut(p).as_mut_slice()[k] = acc / scale;
        }
    }
    Ok(grads)
}

/// `|a − b| / max(|a|, |b|, floor)`
#[inline]
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Element-wise maximum of [`relative_error`] across two mirrored parameter sets.
pub fn max_relative_error<T: Scalar>(a: &ParamSet<T>, b: &ParamSet<T>, floor: f64) -> Result<f64> {
    a.ensure_mirrors(b, "max_relative_error")?;
    let mut worst = 0.0f64;
    for (x, y) in a.values().iter().zip(b.values()) {
        for (&u, &v) in x.as_slice().iter().zip(y.as_slice()) {
            worst = worst.max(relative_error(u.as_f64(), v.as_f64(), floor));
        }
    }
    Ok(worst)
}
