use super::{Matrix, Scalar};
use crate::error::{Error, Result};

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T = f64> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix<T>) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    #[inline]
    pub fn at(&self, idx: usize) -> &Matrix<T> {
        &self.values[idx]
    }

    #[inline]
    pub fn at_mut(&mut self, idx: usize) -> &mut Matrix<T> {
        &mut self.values[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> + '_ {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Matrix<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.values
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Same names and shapes, in the same order.
    pub fn mirrors(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.same_shape(b))
    }

    pub(crate) fn ensure_mirrors(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Dimension {
                op,
                left: (self.len(), 0),
                right: (other.len(), 0),
            });
        }
        for (a, b) in self.values.iter().zip(&other.values) {
            if !a.same_shape(b) {
                return Err(Error::Dimension {
                    op,
                    left: a.shape(),
                    right: b.shape(),
                });
            }
        }
        if self.names != other.names {
            return Err(Error::contract(format!("{op}: parameter names differ")));
        }
        Ok(())
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.ensure_mirrors(other, "paramset axpy")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.values {
            v.scale(s);
        }
    }

    /// L2 norm over every scalar of every tensor.
    pub fn l2_norm(&self) -> T {
        self.values
            .iter()
            .map(Matrix::sum_squares)
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    /// Appends all of `other`'s tensors, prefixing their names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Self) -> Result<()> {
        for (name, value) in other.iter() {
            self.push(format!("{prefix}{name}"), value.clone())?;
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        let mut out = Self::new();
        for (name, value) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.names.push(rest.to_string());
                out.values.push(value.clone());
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
        }
    }
}
