use super::{dot, l2_norm, Matrix, Scalar};
use crate::error::{Error, Result};

/// Rows with a norm at or below this are treated as degenerate.
pub const NORM_FLOOR: f64 = 1e-12;

/// Row-normalized copy of `m` plus the original row norms.
pub(crate) fn normalize_rows<T: Scalar>(m: &Matrix<T>, what: &'static str) -> Result<(Matrix<T>, Vec<T>)> {
    let floor = T::lit(NORM_FLOOR);
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let n = l2_norm(m.row(r));
        if !(n > floor) {
            return Err(Error::Degenerate {
                what,
                index: r.to_string(),
            });
        }
        for v in out.row_mut(r) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// Backpropagates through `unit = x / ‖x‖` row by row.
pub(crate) fn normalize_rows_backward<T: Scalar>(unit: &Matrix<T>, norms: &[T], grad_unit: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(unit.rows(), unit.cols());
    for r in 0..unit.rows() {
        let u = unit.row(r);
        let g = grad_unit.row(r);
        let proj = dot(u, g);
        for ((o, &ui), &gi) in out.row_mut(r).iter_mut().zip(u).zip(g) {
            *o = (gi - ui * proj) / norms[r];
        }
    }
    out
}

/// Cosine similarity of every row of `x` against every row of `t`.
pub fn row_cosine_similarity<T: Scalar>(x: &Matrix<T>, t: &Matrix<T>) -> Result<Matrix<T>> {
    if x.cols() != t.cols() {
        return Err(Error::Dimension {
            op: "row_cosine_similarity",
            left: x.shape(),
            right: t.shape(),
        });
    }
    let (xu, _) = normalize_rows(x, "row of x")?;
    let (tu, _) = normalize_rows(t, "row of t")?;
    xu.matmul_t(&tu)
}

/// Overflow-safe softmax of `v / tau`.
pub fn softmax_with_temperature<T: Scalar>(v: &[T], tau: T) -> Result<Vec<T>> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    if v.is_empty() {
        return Err(Error::InvalidParameter("softmax of an empty vector".into()));
    }
    let scaled: Vec<T> = v.iter().map(|&x| x / tau).collect();
    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `ln Σ exp(v)` with max subtraction.
pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let total: T = v.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}
