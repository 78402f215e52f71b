//! Small dense vectors and matrices.
//!
//! Every reduction accumulates in a fixed order (row-major, left to right) so
//! results are bit-reproducible for a given input. Nothing here is tuned for
//! large dimensions; the networks in this crate live at n <= 64.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{check_dim, Error, Result};

/// Dense real vector.
#[derive(Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting NaN and infinite entries.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().all(|x| x.is_finite()) {
            Ok(Vector(data))
        } else {
            Err(Error::NonFinite("vector"))
        }
    }

    pub(crate) fn from_vec(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Vector(vec![value; n])
    }

    /// The `i`-th standard basis vector of length `n`.
    pub fn basis(n: usize, i: usize) -> Self {
        let mut v = Vector::zeros(n);
        v.0[i] = 1.0;
        v
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        let mut acc = 0.0;
        for (a, b) in self.0.iter().zip(&other.0) {
            acc += a * b;
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn norm1(&self) -> f64 {
        self.0.iter().map(|x| x.abs()).sum()
    }

    pub fn add(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|a| a * s).collect())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Vector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    pub fn hadamard(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector(self.0.iter().map(|&x| f(x)).collect())
    }

    pub fn concat(&self, other: &Vector) -> Vector {
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.0);
        data.extend_from_slice(&other.0);
        Vector(data)
    }

    pub fn segment(&self, start: usize, len: usize) -> Vector {
        Vector(self.0[start..start + len].to_vec())
    }

    pub fn max_abs_diff(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("matrix data", rows * cols, data.len())?;
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            check_dim("matrix row", c, row.len())?;
            data.extend_from_slice(row);
        }
        Matrix::new(r, c, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(n: usize, s: f64) -> Self {
        Matrix::identity(n).scale(s)
    }

    pub fn diag(d: &Vector) -> Self {
        let n = d.len();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = d[i];
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> Vector {
        Vector(self.data[i * self.cols..(i + 1) * self.cols].to_vec())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).0).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `M v`, checked.
    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        check_dim("matvec", self.cols, v.len())?;
        Ok(self.mul_vec(v))
    }

    /// `M v` without the dimension check (debug-asserted).
    pub fn mul_vec(&self, v: &Vector) -> Vector {
        debug_assert_eq!(self.cols, v.len());
        let mut out = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(&v.0) {
                acc += a * b;
            }
            out.push(acc);
        }
        Vector(out)
    }

    /// `M^T v`.
    pub fn tr_mul_vec(&self, v: &Vector) -> Vector {
        debug_assert_eq!(self.rows, v.len());
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let vi = v[i];
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        Vector(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dim("matmul", self.cols, other.rows)?;
        Ok(self.mul(other))
    }

    pub fn mul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * other.data[k * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// `self += s * u v^T`
    pub fn add_outer(&mut self, s: f64, u: &Vector, v: &Vector) {
        debug_assert_eq!((self.rows, self.cols), (u.len(), v.len()));
        for i in 0..self.rows {
            let su = s * u[i];
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (a, b) in row.iter_mut().zip(&v.0) {
                *a += su * b;
            }
        }
    }

    /// Scales row `i` by `d[i]`, i.e. `diag(d) M`.
    pub fn scale_rows(&self, d: &Vector) -> Matrix {
        debug_assert_eq!(self.rows, d.len());
        let mut out = self.clone();
        for i in 0..self.rows {
            for a in &mut out.data[i * self.cols..(i + 1) * self.cols] {
                *a *= d[i];
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `max |M + M^T|`; zero for an exactly skew-symmetric matrix.
    pub fn skew_deviation(&self) -> f64 {
        debug_assert!(self.is_square());
        let n = self.rows;
        let mut dev: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                dev = dev.max((self.get(i, j) + self.get(j, i)).abs());
            }
        }
        dev
    }

    pub fn is_skew_symmetric(&self) -> bool {
        self.is_square() && self.skew_deviation() <= 1e-12
    }

    /// Copies the `r x c` block starting at `(i0, j0)`.
    pub fn block(&self, i0: usize, j0: usize, r: usize, c: usize) -> Matrix {
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                out.data[i * c + j] = self.get(i0 + i, j0 + j);
            }
        }
        out
    }

    pub fn set_block(&mut self, i0: usize, j0: usize, b: &Matrix) {
        for i in 0..b.rows {
            for j in 0..b.cols {
                self.set(i0 + i, j0 + j, b.get(i, j));
            }
        }
    }

    /// Assembles `[[a, b], [c, d]]` from four equally sized square blocks.
    pub fn from_blocks(a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix) -> Matrix {
        let n = a.rows;
        let mut m = Matrix::zeros(2 * n, 2 * n);
        m.set_block(0, 0, a);
        m.set_block(0, n, b);
        m.set_block(n, 0, c);
        m.set_block(n, n, d);
        m
    }

    /// LU factorization with partial pivoting.
    pub fn lu(&self) -> Lu {
        Lu::new(self)
    }

    pub fn det(&self) -> f64 {
        debug_assert!(self.is_square());
        self.lu().det()
    }

    pub fn inverse(&self) -> Result<Matrix> {
        self.lu().inverse()
    }

    pub fn solve(&self, b: &Vector) -> Result<Vector> {
        check_dim("solve", self.rows, b.len())?;
        self.lu().solve(b)
    }

    /// All singular values, descending.
    pub fn singular_values(&self) -> Vec<f64> {
        let m = nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data);
        let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// `(sigma_min, sigma_max)`.
    pub fn svd_extremes(&self) -> (f64, f64) {
        let s = self.singular_values();
        match (s.last(), s.first()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => (0.0, 0.0),
        }
    }

    /// Spectral norm.
    pub fn norm2(&self) -> f64 {
        self.svd_extremes().1
    }

    /// Ratio of extreme singular values; infinite for a singular matrix.
    pub fn condition(&self) -> f64 {
        let (lo, hi) = self.svd_extremes();
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.to_rows()).finish()
    }
}

/// LU factors `P A = L U` packed in one matrix.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
    singular: bool,
}

impl Lu {
    fn new(a: &Matrix) -> Self {
        assert!(a.is_square(), "LU of a non-square matrix");
        let n = a.rows;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let mut singular = false;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in k + 1..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 {
                singular = true;
                continue;
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Lu {
            n,
            lu,
            perm,
            sign,
            singular,
        }
    }

    pub fn det(&self) -> f64 {
        if self.singular {
            return 0.0;
        }
        let mut d = self.sign;
        for i in 0..self.n {
            d *= self.lu[i * self.n + i];
        }
        d
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    pub fn solve(&self, b: &Vector) -> Result<Vector> {
        if self.singular {
            return Err(Error::Singular);
        }
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc / self.lu[i * n + i];
        }
        Ok(Vector(x))
    }

    pub fn inverse(&self) -> Result<Matrix> {
        let n = self.n;
        let mut inv = Matrix::zeros(n, n);
        for j in 0..n {
            let col = self.solve(&Vector::basis(n, j))?;
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
        }
        Ok(inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matvec_examples() {
        let v = Vector::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(Matrix::identity(2).matvec(&v).unwrap(), v);
        assert_eq!(Matrix::zeros(2, 2).matvec(&v).unwrap(), Vector::zeros(2));
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ones = Vector::filled(2, 1.0);
        assert_eq!(a.matvec(&ones).unwrap().as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_rejects_mismatch() {
        let err = Matrix::identity(2).matvec(&Vector::zeros(3)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn constructors_reject_non_finite() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn det_examples() {
        assert_eq!(Matrix::identity(3).det(), 1.0);
        assert_eq!(Matrix::identity(3).svd_extremes(), (1.0, 1.0));
        for c in [-3.5, 0.0, 2.0, 1e6] {
            assert_eq!(m(&[&[1.0, 0.0], &[c, 1.0]]).det(), 1.0);
        }
        let rank_one = m(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(rank_one.det(), 0.0);
        assert!(rank_one.svd_extremes().0 < 1e-15);
    }

    #[test]
    fn solve_and_inverse() {
        let a = m(&[&[0.0, 2.0, 1.0], &[1.0, -1.0, 0.0], &[3.0, 0.5, 2.0]]);
        let b = Vector::new(vec![1.0, 2.0, 3.0]).unwrap();
        let x = a.solve(&b).unwrap();
        assert!(a.mul_vec(&x).max_abs_diff(&b) < 1e-14);
        let inv = a.inverse().unwrap();
        assert!(a.mul(&inv).max_abs_diff(&Matrix::identity(3)) < 1e-14);
        assert!(matches!(
            m(&[&[1.0, 2.0], &[2.0, 4.0]]).inverse(),
            Err(Error::Singular)
        ));
    }

    #[test]
    fn skew_predicate() {
        let j = m(&[&[0.0, -2.0], &[2.0, 0.0]]);
        assert!(j.is_skew_symmetric());
        assert!(!m(&[&[0.0, 1.0], &[1.0, 0.0]]).is_skew_symmetric());
    }

    #[test]
    fn transpose_products() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let v = Vector::new(vec![1.0, -1.0]).unwrap();
        assert_eq!(a.tr_mul_vec(&v), a.transpose().mul_vec(&v));
        let mut o = Matrix::zeros(2, 3);
        o.add_outer(2.0, &v, &Vector::new(vec![1.0, 0.0, 1.0]).unwrap());
        assert_eq!(o.to_rows(), vec![vec![2.0, 0.0, 2.0], vec![-2.0, 0.0, -2.0]]);
    }
}
