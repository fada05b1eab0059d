//! Dense row-major matrices and vectors over `f64`.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use super::NumError;

/// A dense vector. Dereferences to `[f64]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &[f64]) -> Result<f64, NumError> {
        dot(&self.0, other)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Concatenates `self` and `other` into a new vector, `self` first.
    pub fn concat(&self, other: &[f64]) -> Vector {
        let mut out = Vec::with_capacity(self.len() + other.len());
        out.extend_from_slice(&self.0);
        out.extend_from_slice(other);
        Vector(out)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64, NumError> {
    if a.len() != b.len() {
        return Err(NumError::Shape {
            op: "dot",
            expected: format!("length {}", a.len()),
            found: format!("length {}", b.len()),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// A dense `rows x cols` matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::Shape {
                op: "Matrix::from_vec",
                expected: format!("{} entries ({rows}x{cols})", rows * cols),
                found: format!("{} entries", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Column vector (`n x 1`), the storage used for biases.
    pub fn column(data: Vec<f64>) -> Self {
        Matrix { rows: data.len(), cols: 1, data }
    }

    /// Row vector (`1 x n`), the storage used for scalar heads.
    pub fn row(data: Vec<f64>) -> Self {
        Matrix { rows: 1, cols: data.len(), data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<(), NumError> {
        self.check_same_shape("add_scaled", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// `m * v`, accumulated left to right along each row.
    pub fn matvec(&self, v: &[f64]) -> Result<Vector, NumError> {
        if v.len() != self.cols {
            return Err(NumError::Shape {
                op: "matvec",
                expected: format!("vector of length {} for a {}x{} matrix", self.cols, self.rows, self.cols),
                found: format!("length {}", v.len()),
            });
        }
        Ok((0..self.rows)
            .map(|r| {
                let mut acc = 0.0;
                for (a, b) in self.row_slice(r).iter().zip(v) {
                    acc += a * b;
                }
                acc
            })
            .collect())
    }

    /// `m^T * v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vector, NumError> {
        if v.len() != self.rows {
            return Err(NumError::Shape {
                op: "matvec_t",
                expected: format!("vector of length {} for a {}x{} matrix", self.rows, self.rows, self.cols),
                found: format!("length {}", v.len()),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row_slice(r)) {
                *o += a * vr;
            }
        }
        Ok(Vector::from(out))
    }

    /// `self += s * (u v^T)`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], s: f64) -> Result<(), NumError> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(NumError::Shape {
                op: "add_outer",
                expected: format!("{}x{}", self.rows, self.cols),
                found: format!("{}x{}", u.len(), v.len()),
            });
        }
        for (r, &ur) in u.iter().enumerate() {
            let f = s * ur;
            if f == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (x, &vc) in row.iter_mut().zip(v) {
                *x += f * vc;
            }
        }
        Ok(())
    }

    /// `self[:, 0] += s * v` for column-shaped storage, or the row equivalent.
    pub fn add_vec(&mut self, v: &[f64], s: f64) -> Result<(), NumError> {
        if v.len() != self.data.len() {
            return Err(NumError::Shape {
                op: "add_vec",
                expected: format!("{} entries", self.data.len()),
                found: format!("{} entries", v.len()),
            });
        }
        for (x, &y) in self.data.iter_mut().zip(v) {
            *x += s * y;
        }
        Ok(())
    }

    fn check_same_shape(&self, op: &'static str, other: &Matrix) -> Result<(), NumError> {
        if self.shape() != other.shape() {
            return Err(NumError::Shape {
                op,
                expected: format!("{}x{}", self.rows, self.cols),
                found: format!("{}x{}", other.rows, other.cols),
            });
        }
        Ok(())
    }
}
