//! Dense matrices, parameter sets, optimizers and the finite-difference oracle.

mod fd;
mod matrix;
mod ops;
mod optim;
mod params;
mod scalar;

pub use fd::{
    finite_difference_gradient, finite_difference_gradient_o4, max_relative_error, relative_error, DEFAULT_FD_EPS,
};
pub use matrix::{dot, l2_norm, matmul, Matrix};
pub use ops::{log_sum_exp, row_cosine_similarity, softmax_with_temperature, NORM_FLOOR};
pub(crate) use ops::{normalize_rows, normalize_rows_backward};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState};
pub use params::ParamSet;
pub use scalar::Scalar;

/// `x · W + b` for a single row vector, where `W` is `in × out` and `b` is `1 × out`.
pub(crate) fn affine<T: Scalar>(x: &[T], weight: &Matrix<T>, bias: &Matrix<T>) -> Vec<T> {
    let mut out = bias.as_slice().to_vec();
    for (k, &a) in x.iter().enumerate() {
        if a == T::zero() {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(weight.row(k)) {
            *o += a * w;
        }
    }
    out
}

/// Accumulates `xᵀ · g` into `grad_weight` and `g` into `grad_bias`, then returns `g · Wᵀ`.
pub(crate) fn affine_backward<T: Scalar>(
    x: &[T],
    weight: &Matrix<T>,
    upstream: &[T],
    grad_weight: &mut Matrix<T>,
    grad_bias: &mut Matrix<T>,
) -> Vec<T> {
    for (k, &a) in x.iter().enumerate() {
        if a == T::zero() {
            continue;
        }
        for (gw, &u) in grad_weight.row_mut(k).iter_mut().zip(upstream) {
            *gw += a * u;
        }
    }
    for (gb, &u) in grad_bias.as_mut_slice().iter_mut().zip(upstream) {
        *gb += u;
    }
    (0..weight.rows()).map(|k| dot(weight.row(k), upstream)).collect()
}
