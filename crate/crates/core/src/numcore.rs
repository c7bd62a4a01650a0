//! Small, stable vector numerics: dot products, cosine similarity,
//! normalization and log-softmax.
//!
//! Functions take slices so they work on [`Vector`], `Vec` and matrix rows
//! alike. [`Vector`] and [`Matrix`] are the validated owned forms.

use std::ops::{Deref, Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A finite real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector<T>(Vec<T>);

impl<T: Scalar> Vector<T> {
    /// Rejects NaN and infinite entries.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Vector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![T::zero(); dim])
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> AsRef<[T]> for Vector<T> {
    fn as_ref(&self) -> &[T] {
        &self.0
    }
}

impl<T: Scalar> TryFrom<Vec<T>> for Vector<T> {
    type Error = Error;

    fn try_from(values: Vec<T>) -> Result<Self> {
        Vector::new(values)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("matrix"));
        }
        if rows * cols != values.len() {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: values.len(),
            });
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).ok_or(Error::Empty("matrix"))?;
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Matrix::new(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.cols)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        self.map(|v| U::of(v.as_f64()))
    }

    /// Column-wise mean over rows.
    pub fn mean_rows(&self) -> Vec<T> {
        let mut acc = vec![T::zero(); self.cols];
        for row in self.iter_rows() {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = T::of(self.rows as f64);
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.values[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.values[r * self.cols + c]
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            actual: b,
        });
    }
    Ok(())
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    check_dims(a.len(), b.len())?;
    let na2 = dot(a, a);
    let nb2 = dot(b, b);
    if na2 <= T::zero() || nb2 <= T::zero() {
        return Err(Error::ZeroNorm("cosine"));
    }
    let c = dot(a, b) / (na2 * nb2).sqrt();
    Ok(c.max(-T::one()).min(T::one()))
}

pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = norm(v);
    if n <= T::zero() || !n.is_finite() {
        return Err(Error::ZeroNorm("l2_normalize"));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Max-shifted log-sum-exp.
pub fn log_sum_exp<T: Scalar>(v: &[T]) -> Result<T> {
    let max = v
        .iter()
        .copied()
        .fold(None, |m: Option<T>, x| Some(m.map_or(x, |m| m.max(x))))
        .ok_or(Error::Empty("log_sum_exp"))?;
    let s: T = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    let lse = log_sum_exp(logits)?;
    Ok(logits.iter().map(|&x| x - lse).collect())
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    Ok(log_softmax(logits)?.into_iter().map(T::exp).collect())
}

/// `-log_softmax(logits)[target]`, accurate when the loss is tiny.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<T> {
    let anchor = *logits.get(target).ok_or(Error::InvalidArgument(format!(
        "target {target} out of range for {} logits",
        logits.len()
    )))?;
    let shift = logits
        .iter()
        .fold(T::zero(), |m, &x| m.max(x - anchor));
    let rest: T = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != target)
        .map(|(_, &x)| (x - anchor - shift).exp())
        .sum();
    if shift == T::zero() {
        Ok(rest.ln_1p())
    } else {
        Ok(shift + ((-shift).exp() + rest).ln())
    }
}

/// Component-wise arithmetic mean.
pub fn mean<T: Scalar, V: AsRef<[T]>>(vectors: &[V]) -> Result<Vec<T>> {
    let first = vectors.first().ok_or(Error::Empty("mean"))?.as_ref();
    let mut acc = first.to_vec();
    for v in &vectors[1..] {
        let v = v.as_ref();
        check_dims(acc.len(), v.len())?;
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = T::of(vectors.len() as f64);
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[2.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!((cosine(&[3.0f64, 4.0], &[4.0, 3.0]).unwrap() - 0.96).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine(&[1.0, 0.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn log_softmax_examples() {
        let ln2 = std::f64::consts::LN_2;
        let out = log_softmax(&[0.0, 0.0]).unwrap();
        assert!((out[0] + ln2).abs() < 1e-15 && (out[1] + ln2).abs() < 1e-15);

        let out = log_softmax(&[1000.0f64, 0.0]).unwrap();
        assert!(out[0].abs() < 1e-12);
        assert!((out[1] + 1000.0).abs() < 1e-9);

        assert!(matches!(
            log_softmax::<f64>(&[]),
            Err(Error::Empty(_))
        ));
    }

    // Oracle: log-softmax of [1,2,3] evaluated at 50 significant digits
    // (mpmath), frozen here.
    #[test]
    fn log_softmax_matches_extended_precision() {
        let expected = [
            -2.407_605_964_444_380_0,
            -1.407_605_964_444_380_0,
            -0.407_605_964_444_380_0,
        ];
        let out = log_softmax(&[1.0f64, 2.0, 3.0]).unwrap();
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let v = [0.3f64, -1.2, 2.5, 0.0];
        let ls = log_softmax(&v).unwrap();
        for t in 0..4 {
            assert!((cross_entropy(&v, t).unwrap() + ls[t]).abs() < 1e-14);
        }
        // tiny losses keep full relative precision
        let ce = cross_entropy(&[40.0f64, 0.0], 0).unwrap();
        assert!((ce / (-40f64).exp() - 1.0).abs() < 1e-14);
        assert!(cross_entropy(&[1.0f64], 1).is_err());
    }

    #[test]
    fn l2_normalize_examples() {
        let v = l2_normalize(&[3.0f64, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(l2_normalize(&[-2.0, 0.0]).unwrap(), vec![-1.0, 0.0]);
        assert!(l2_normalize(&[0.0f64, 0.0]).is_err());
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
        assert_eq!(Vector::new(vec![1.0f32, 2.0]).unwrap().len(), 2);
    }

    #[test]
    fn matrix_shape_checked() {
        assert!(Matrix::new(2, 2, vec![1.0f64; 3]).is_err());
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m[(1, 0)], 3.0);
        assert_eq!(m.mean_rows(), vec![2.0, 3.0]);
    }

    #[test]
    fn works_in_single_precision() {
        let c = cosine(&[3.0f32, 4.0], &[4.0, 3.0]).unwrap();
        assert!((c - 0.96).abs() < 1e-6);
        let s: f32 = softmax(&[0.5f32, 1.5, -2.0]).unwrap().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e3..1e3f64, len)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_free(
            (a, b) in (1usize..12).prop_flat_map(|n| (finite_vec(n), finite_vec(n))),
            s in 1e-3..1e3f64,
        ) {
            prop_assume!(norm(&a) > 1e-6 && norm(&b) > 1e-6);
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
            let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
            prop_assert!((cosine(&a, &scaled).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn log_softmax_normalizes_and_is_shift_invariant(
            v in prop::collection::vec(-1e3..1e3f64, 1..20),
            c in -1e3..1e3f64,
        ) {
            let out = log_softmax(&v).unwrap();
            let total: f64 = out.iter().map(|x| x.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let out2 = log_softmax(&shifted).unwrap();
            for (a, b) in out.iter().zip(&out2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn l2_normalize_unit_norm(v in finite_vec(6)) {
            prop_assume!(norm(&v) > 1e-6);
            let u = l2_normalize(&v).unwrap();
            prop_assert!((norm(&u) - 1.0).abs() < 1e-12);
            prop_assert!((cosine(&u, &v).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
