use std::fmt;

use super::alloc::{self, Lease};
use super::real::{DType, Real};
use crate::{Error, Result};

/// Dense row-major matrix. Buffers created while an
/// [`AllocMeter`](super::AllocMeter) is active are counted against it.
pub struct Matrix<T: Real> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    _lease: Option<Lease>,
}

impl<T: Real> Matrix<T> {
    fn wrap(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        let lease = alloc::lease(data.len());
        Self {
            rows,
            cols,
            data,
            _lease: lease,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::one())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self::wrap(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self::wrap(rows, cols, data))
    }

    /// Builds a matrix from row slices; panics on ragged input, so it is
    /// meant for literals in tests and examples.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::wrap(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::wrap(rows, cols, data)
    }

    /// Column vector from a slice.
    pub fn column(values: &[T]) -> Self {
        Self::wrap(values.len(), 1, values.to_vec())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn col(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self::wrap(self.cols, self.rows, data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::wrap(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }

    /// Applies `f(self[i], other[i])` in place; shapes must match.
    pub fn zip_inplace(&mut self, other: &Matrix<T>, f: impl Fn(T, T) -> T) -> Result<()> {
        self.expect_same_shape("zip_inplace", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = f(*a, b);
        }
        Ok(())
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|x| x.is_nan())
    }

    /// Largest absolute entrywise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Matrix<T>) -> Option<T> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(T::zero(), |m, (&a, &b)| {
                    if a == b {
                        m
                    } else {
                        m.max((a - b).abs())
                    }
                }),
        )
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix::wrap(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| U::of(x.to_f64_lossy())).collect(),
        )
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::dim("vstack", "column counts differ"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Self::wrap(rows, cols, data))
    }

    /// Places matrices with equal row counts side by side.
    pub fn hstack(parts: &[&Matrix<T>]) -> Result<Self> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(Error::dim("hstack", "row counts differ"));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Self::wrap(rows, cols, data))
    }

    /// Row block `[start, start + count)`.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.rows {
            return Err(Error::dim("slice_rows", "range out of bounds"));
        }
        Ok(Self::wrap(
            count,
            self.cols,
            self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        ))
    }

    /// Columns picked by index, in order.
    pub fn select_cols(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&c| c >= self.cols) {
            return Err(Error::dim(
                "select_cols",
                format!("column {bad} of {}", self.cols),
            ));
        }
        Ok(Self::from_fn(self.rows, idx.len(), |r, c| self.get(r, idx[c])))
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Matrix<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(())
    }
}

impl<T: Real> Clone for Matrix<T> {
    fn clone(&self) -> Self {
        Self::wrap(self.rows, self.cols, self.data.clone())
    }
}

impl<T: Real> PartialEq for Matrix<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape() == other.shape() && self.data == other.data
    }
}

impl<T: Real> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix<{}> {}x{} [", T::DTYPE, self.rows, self.cols)?;
        for r in 0..self.rows.min(12) {
            write!(f, "  ")?;
            for v in self.row(r).iter().take(12) {
                write!(f, "{v:>12.6} ")?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Matrix::<f64>::from_vec(2, 3, vec![0.0; 5]).is_err());
        let m = Matrix::<f64>::from_vec(2, 3, (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(m.get(1, 2), 5.0);
        assert_eq!(m.len(), m.rows() * m.cols());
    }

    #[test]
    fn transpose_swaps_indices() {
        let m = Matrix::<f64>::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let t = m.transpose();
        assert_eq!(t.shape(), (3, 2));
        assert_eq!(t.get(2, 1), 6.0);
        assert_eq!(t.transpose(), m);
    }

    #[test]
    fn stacking() {
        let a = Matrix::<f64>::from_rows(&[&[1.0, 2.0]]);
        let b = Matrix::<f64>::from_rows(&[&[3.0, 4.0]]);
        let v = Matrix::vstack(&[&a, &b]).unwrap();
        assert_eq!(v, Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let h = Matrix::hstack(&[&a, &b]).unwrap();
        assert_eq!(h, Matrix::from_rows(&[&[1.0, 2.0, 3.0, 4.0]]));
        assert!(Matrix::hstack(&[&a, &v]).is_err());
        assert_eq!(v.slice_rows(1, 1).unwrap(), b);
    }

    #[test]
    fn select_cols_rejects_out_of_range() {
        let m = Matrix::<f64>::identity(3);
        assert!(m.select_cols(&[0, 3]).is_err());
        let s = m.select_cols(&[2, 0]).unwrap();
        assert_eq!(s.get(2, 0), 1.0);
        assert_eq!(s.get(0, 1), 1.0);
    }
}
