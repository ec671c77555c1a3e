//! Dense row-major matrices, symmetric matrices and a cyclic Jacobi
//! eigensolver.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Default convergence threshold for [`sym_eig`].
pub const EIG_TOL: f64 = 1e-12;
/// Sweep budget for [`sym_eig`].
pub const EIG_MAX_SWEEPS: usize = 100;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return shape_err(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows {
            return shape_err(format!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn zip_with(&self, other: &Mat, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Mat) -> Result<f64> {
        if self.shape() != other.shape() {
            return shape_err("dot: shape mismatch");
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Multiplies column `j` by `scales[j]`, i.e. `self · diag(scales)`.
    pub fn scale_columns(&self, scales: &[f64]) -> Result<Mat> {
        if scales.len() != self.cols {
            return shape_err("scale_columns: length mismatch");
        }
        Ok(Mat::from_fn(self.rows, self.cols, |r, c| self[(r, c)] * scales[c]))
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Square matrix that is symmetric up to `1e-12 * (1 + max|A|)`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMat(Mat);

impl fmt::Debug for SymMat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sym{:?}", self.0)
    }
}

impl SymMat {
    pub fn new(m: Mat) -> Result<Self> {
        if !m.is_square() {
            return shape_err(format!("symmetric matrix must be square, got {:?}", m.shape()));
        }
        let tol = 1e-12 * (1.0 + m.max_abs());
        let n = m.rows();
        for i in 0..n {
            for j in i + 1..n {
                if (m[(i, j)] - m[(j, i)]).abs() > tol {
                    return Err(Error::Domain(format!(
                        "matrix is not symmetric at ({i},{j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    /// Wraps `m` after exact symmetrization of its two triangles.
    pub(crate) fn from_mat_symmetrized(mut m: Mat) -> Self {
        let n = m.rows();
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self(m)
    }

    pub fn identity(n: usize) -> Self {
        Self(Mat::identity(n))
    }

    pub fn from_diag(values: &[f64]) -> Self {
        Self(Mat::from_diag(values))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }
}

impl Index<(usize, usize)> for SymMat {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Eigenvectors (as columns of `u`) and eigenvalues sorted in descending
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub u: Mat,
    pub lambda: Vec<f64>,
}

impl EigenPair {
    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    /// `U · diag(f(λ)) · Uᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Mat {
        let scaled: Vec<f64> = self.lambda.iter().map(|&l| f(l)).collect();
        let us = self
            .u
            .scale_columns(&scaled)
            .expect("eigenvector matrix matches eigenvalue count");
        us.matmul(&self.u.transpose()).expect("square factors")
    }
}

/// `½(A + Aᵀ)`.
pub fn sym_part(a: &Mat) -> Result<SymMat> {
    if !a.is_square() {
        return shape_err(format!("sym_part needs a square matrix, got {:?}", a.shape()));
    }
    let n = a.rows();
    Ok(SymMat(Mat::from_fn(n, n, |i, j| {
        0.5 * (a[(i, j)] + a[(j, i)])
    })))
}

/// Keeps the diagonal of `a` and zeroes everything else.
pub fn diag_part(a: &Mat) -> Result<Mat> {
    if !a.is_square() {
        return shape_err(format!("diag_part needs a square matrix, got {:?}", a.shape()));
    }
    Ok(Mat::from_diag(&a.diagonal()))
}

/// `J = (1/N)(I − (1/N)·11ᵀ)`, the scaled centering matrix.
pub fn centering_matrix(n: usize) -> Result<Mat> {
    if n == 0 {
        return Err(Error::Domain("centering matrix needs N >= 1".into()));
    }
    let inv = 1.0 / n as f64;
    Ok(Mat::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        inv * (delta - inv)
    }))
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps visit `(p, q)` pairs in row-major order and stop once the largest
/// off-diagonal magnitude is at most `tol · ‖A‖_F`. Eigenvalues come back in
/// descending order (ties keep their diagonal order) and each eigenvector is
/// signed so its first entry above `1e-10` in magnitude is positive.
pub fn sym_eig(a: &SymMat, tol: f64) -> Result<EigenPair> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("eigensolver tolerance must be > 0, got {tol}")));
    }
    let n = a.dim();
    let mut m = a.as_mat().clone();
    let mut v = Mat::identity(n);
    let threshold = tol * m.frobenius_norm();

    let off_max = |m: &Mat| {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(m[(p, q)].abs());
            }
        }
        off
    };

    let mut converged = false;
    for _ in 0..EIG_MAX_SWEEPS {
        if off_max(&m) <= threshold {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                m[(p, p)] -= t * apq;
                m[(q, q)] += t * apq;
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for r in 0..n {
                    if r != p && r != q {
                        let arp = m[(r, p)];
                        let arq = m[(r, q)];
                        let new_rp = c * arp - s * arq;
                        let new_rq = s * arp + c * arq;
                        m[(r, p)] = new_rp;
                        m[(p, r)] = new_rp;
                        m[(r, q)] = new_rq;
                        m[(q, r)] = new_rq;
                    }
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)];
                    v[(r, p)] = c * vrp - s * vrq;
                    v[(r, q)] = s * vrp + c * vrq;
                }
            }
        }
    }
    if !converged {
        let residual = off_max(&m);
        if residual > threshold {
            return Err(Error::SolverFailure {
                sweeps: EIG_MAX_SWEEPS,
                residual,
            });
        }
    }

    let diag = m.diagonal();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps ties in diagonal order
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).expect("finite eigenvalues"));

    let lambda: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut u = Mat::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let sign = (0..n)
            .map(|r| v[(r, src)])
            .find(|x| x.abs() > 1e-10)
            .map_or(1.0, |x| x.signum());
        for r in 0..n {
            u[(r, col)] = sign * v[(r, src)];
        }
    }
    Ok(EigenPair { u, lambda })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn eig_identity() {
        let e = sym_eig(&SymMat::identity(2), EIG_TOL).unwrap();
        assert_eq!(e.lambda, vec![1.0, 1.0]);
        assert_eq!(e.u, Mat::identity(2));
    }

    #[test]
    fn eig_diagonal_is_sorted() {
        let e = sym_eig(&SymMat::from_diag(&[4.0, 9.0]), EIG_TOL).unwrap();
        assert_eq!(e.lambda, vec![9.0, 4.0]);
        assert_eq!(e.u, Mat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap());

        let e = sym_eig(&SymMat::from_diag(&[9.0, 4.0]), EIG_TOL).unwrap();
        assert_eq!(e.lambda, vec![9.0, 4.0]);
        assert_eq!(e.u, Mat::identity(2));
    }

    #[test]
    fn eig_two_by_two() {
        let a = SymMat::new(Mat::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap()).unwrap();
        let e = sym_eig(&a, EIG_TOL).unwrap();
        assert!(close(e.lambda[0], 3.0, 1e-14));
        assert!(close(e.lambda[1], 1.0, 1e-14));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(e.u[(0, 0)], h, 1e-14) && close(e.u[(1, 0)], h, 1e-14));
        assert!(close(e.u[(0, 1)], h, 1e-14) && close(e.u[(1, 1)], -h, 1e-14));
    }

    #[test]
    fn eig_rejects_bad_tolerance() {
        assert!(matches!(
            sym_eig(&SymMat::identity(2), 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sym_part_examples() {
        let a = Mat::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]).unwrap();
        let s = sym_part(&a).unwrap();
        assert_eq!(s.as_mat(), &Mat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap());

        let sym = Mat::from_rows(&[&[1.0, 5.0], &[5.0, -2.0]]).unwrap();
        assert_eq!(sym_part(&sym).unwrap().as_mat(), &sym);

        let skew = Mat::from_rows(&[&[0.0, 3.0], &[-3.0, 0.0]]).unwrap();
        assert_eq!(sym_part(&skew).unwrap().as_mat(), &Mat::zeros(2, 2));

        assert!(matches!(sym_part(&Mat::zeros(2, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn diag_part_examples() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(
            diag_part(&a).unwrap(),
            Mat::from_rows(&[&[1.0, 0.0], &[0.0, 4.0]]).unwrap()
        );
        let d = Mat::from_diag(&[3.0, -1.0]);
        assert_eq!(diag_part(&d).unwrap(), d);
        assert_eq!(diag_part(&Mat::zeros(3, 3)).unwrap(), Mat::zeros(3, 3));
        assert!(matches!(diag_part(&Mat::zeros(1, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn centering_examples() {
        assert_eq!(centering_matrix(1).unwrap(), Mat::zeros(1, 1));
        assert_eq!(
            centering_matrix(2).unwrap(),
            Mat::from_rows(&[&[0.25, -0.25], &[-0.25, 0.25]]).unwrap()
        );
        for n in 1..20 {
            let j = centering_matrix(n).unwrap();
            for r in 0..n {
                assert!(j.row(r).iter().sum::<f64>().abs() <= 1e-15);
            }
        }
        assert!(matches!(centering_matrix(0), Err(Error::Domain(_))));
    }

    #[test]
    fn mat_constructor_rejects_bad_input() {
        assert!(Mat::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Mat::new(1, 1, vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        let nonsym = Mat::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]).unwrap();
        assert!(SymMat::new(nonsym).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Mat::from_fn(3, 2, |r, c| (r * 2 + c) as f64 - 1.5);
        let b = Mat::from_fn(3, 4, |r, c| (r as f64) * 0.5 - c as f64);
        assert_eq!(a.t_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
        assert!(a.matmul(&b).is_err());
    }
}
