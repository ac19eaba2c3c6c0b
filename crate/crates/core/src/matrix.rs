use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{KstError, Result};
use crate::scalar::{Arith, Mode, Scalar};

/// Dense row-major matrix. Serialized as nested row arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone> Matrix<T> {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(KstError::ShapeMismatch("ragged matrix rows".into()));
        }
        Ok(Matrix { rows: n_rows, cols: n_cols, data: rows.into_iter().flatten().collect() })
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

    pub fn get(&self, r: usize, c: usize) -> &T {
        &self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c).clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.data.iter()
    }

    pub fn map<U: Clone>(&self, f: impl FnMut(&T) -> U) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(f).collect() }
    }

    pub fn try_map<U: Clone>(&self, f: impl FnMut(&T) -> Result<U>) -> Result<Matrix<U>> {
        let data = self.data.iter().map(f).collect::<Result<Vec<_>>>()?;
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// Stacks `self` on top of `below`.
    pub fn vstack(&self, below: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != below.cols && self.rows > 0 && below.rows > 0 {
            return Err(KstError::ShapeMismatch(format!(
                "vstack of {}x{} and {}x{}",
                self.rows, self.cols, below.rows, below.cols
            )));
        }
        let cols = if self.rows > 0 { self.cols } else { below.cols };
        let mut data = self.data.clone();
        data.extend(below.data.iter().cloned());
        Ok(Matrix { rows: self.rows + below.rows, cols, data })
    }
}

impl<T: Arith> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::filled(rows, cols, T::zero_value())
    }

    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != rhs.rows {
            return Err(KstError::ShapeMismatch(format!(
                "product of {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out: Matrix<T> = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a.is_zero_value() {
                    continue;
                }
                for j in 0..rhs.cols {
                    let b = rhs.get(k, j);
                    if b.is_zero_value() {
                        continue;
                    }
                    let idx = i * rhs.cols + j;
                    out.data[idx] = out.data[idx].add(&a.mul(b));
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.shape() != rhs.shape() {
            return Err(KstError::ShapeMismatch(format!(
                "sum of {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a.add(b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn transpose(&self) -> Matrix<T> {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r).clone())
    }
}

impl Matrix<Scalar> {
    /// Exact identity matrix.
    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| Scalar::int(i64::from(r == c)))
    }

    pub fn exact_zeros(rows: usize, cols: usize) -> Self {
        Matrix::filled(rows, cols, Scalar::int(0))
    }

    pub fn from_f64(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(KstError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        Ok(Matrix { rows, cols, data: values.iter().map(|&v| Scalar::Float(v)).collect() })
    }

    /// Mode shared by every entry, or `None` when the matrix mixes modes.
    pub fn mode(&self) -> Option<Mode> {
        let first = self.data.first()?.mode();
        self.data.iter().all(|s| s.mode() == first).then_some(first)
    }

    pub fn convert(&self, mode: Mode) -> Result<Matrix<Scalar>> {
        self.try_map(|s| s.convert(mode))
    }

    pub fn lower<T: Arith>(&self) -> Result<Matrix<T>> {
        self.try_map(T::lower)
    }

    pub fn read<T: Arith>(&self) -> Result<Matrix<T>> {
        self.try_map(T::read)
    }

    pub fn to_f64(&self) -> Matrix<f64> {
        self.map(Scalar::to_f64)
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|s| match s {
            Scalar::Exact(r) => num_traits::Zero::is_zero(r),
            Scalar::Float(v) => *v == 0.0,
        })
    }
}

impl<T: Arith> Matrix<T> {
    pub fn into_scalars(self) -> Matrix<Scalar> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.into_iter().map(T::into_scalar).collect(),
        }
    }
}

impl<T: Serialize + Clone> Serialize for Matrix<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a, T> {
            rows: usize,
            cols: usize,
            data: Vec<&'a [T]>,
        }
        Repr {
            rows: self.rows,
            cols: self.cols,
            data: (0..self.rows).map(|r| self.row(r)).collect(),
        }
        .serialize(serializer)
    }
}

impl<'de, T: Deserialize<'de> + Clone> Deserialize<'de> for Matrix<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr<T> {
            rows: usize,
            cols: usize,
            data: Vec<Vec<T>>,
        }
        let repr = Repr::<T>::deserialize(deserializer)?;
        if repr.data.len() != repr.rows || repr.data.iter().any(|r| r.len() != repr.cols) {
            return Err(serde::de::Error::custom("matrix data does not match its declared shape"));
        }
        Ok(Matrix { rows: repr.rows, cols: repr.cols, data: repr.data.into_iter().flatten().collect() })
    }
}
