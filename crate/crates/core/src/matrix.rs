//! Small dense row-major matrices and the handful of symmetric
//! positive-definite routines that IRLS and the variance estimators need.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check on SPD inputs.
const SYMMETRY_TOL: f64 = 1e-10;
/// A Cholesky pivot at or below this fraction of the largest diagonal entry
/// marks the corresponding column as linearly dependent.
const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Builds a matrix whose `j`-th column is `columns[j]`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        let cols = columns.len();
        if let Some(bad) = columns.iter().position(|c| c.len() != rows) {
            return Err(Error::Dimension(format!(
                "column {bad} has {} entries, expected {rows}",
                columns[bad].len()
            )));
        }
        let mut m = Self::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, value: f64) {
        for i in 0..self.rows {
            self[(i, j)] = value;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Computes `A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} matrix by vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    /// Computes `vᵀ A v`.
    pub fn quadratic_form(&self, v: &[f64]) -> Result<f64> {
        let av = self.mul_vec(v)?;
        if v.len() != self.rows {
            return Err(Error::Dimension(
                "quadratic form needs a square matrix".into(),
            ));
        }
        Ok(dot(v, &av))
    }

    /// Largest absolute difference between `A[i][j]` and `A[j][i]`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    fn check_symmetric(&self) -> Result<()> {
        if self.rows != self.cols {
            return Err(Error::Dimension(format!(
                "expected a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let asymmetry = self.asymmetry();
        if asymmetry > SYMMETRY_TOL * (1.0 + self.max_abs()) {
            return Err(Error::NotSymmetric { asymmetry });
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Computes `XᵀWX` for diagonal `W = diag(w)`.
///
/// Only the upper triangle is accumulated; the lower triangle is a copy, so
/// the result is exactly symmetric.
pub fn weighted_cross_product(x: &Matrix, w: &[f64]) -> Result<Matrix> {
    if w.len() != x.rows() {
        return Err(Error::Dimension(format!(
            "weight vector has length {}, design has {} rows",
            w.len(),
            x.rows()
        )));
    }
    if let Some(i) = w.iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "weight {} at position {i} is negative or NaN",
            w[i]
        )));
    }
    let p = x.cols();
    let mut out = Matrix::zeros(p, p);
    for (i, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        let row = x.row(i);
        for a in 0..p {
            let ra = wi * row[a];
            for b in a..p {
                out[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            out[(a, b)] = out[(b, a)];
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn new(a: &Matrix) -> Result<Self> {
        a.check_symmetric()?;
        let n = a.rows();
        let max_diag = (0..n).fold(0.0_f64, |m, i| m.max(a[(i, i)].abs()));
        let floor = PIVOT_TOL * max_diag;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut pivot = a[(j, j)];
            for k in 0..j {
                pivot -= l[(j, k)] * l[(j, k)];
            }
            if !(pivot > floor) {
                return Err(Error::RankDeficient { column: j });
            }
            let ljj = pivot.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &Matrix {
        &self.l
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.l.rows();
        if b.len() != n {
            return Err(Error::Dimension(format!(
                "right-hand side has length {}, matrix is {n}x{n}",
                b.len()
            )));
        }
        // forward: L y = b
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for (k, yk) in y.iter().enumerate().take(i) {
                s -= self.l[(i, k)] * yk;
            }
            y[i] = s / self.l[(i, i)];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for (k, yk) in y.iter().enumerate().skip(i + 1) {
                s -= self.l[(k, i)] * yk;
            }
            y[i] = s / self.l[(i, i)];
        }
        Ok(y)
    }

    pub fn inverse(&self) -> Result<Matrix> {
        let n = self.l.rows();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e)?;
            for (i, v) in col.into_iter().enumerate() {
                inv[(i, j)] = v;
            }
        }
        symmetrize(&mut inv);
        Ok(inv)
    }
}

/// Solves `A x = b` for symmetric positive-definite `A`.
pub fn spd_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.rows() {
        return Err(Error::Dimension(format!(
            "right-hand side has length {}, matrix has {} rows",
            b.len(),
            a.rows()
        )));
    }
    Cholesky::new(a)?.solve(b)
}

pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    Cholesky::new(a)?.inverse()
}

/// Averages `A` with its transpose in place.
pub fn symmetrize(a: &mut Matrix) {
    let n = a.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}
