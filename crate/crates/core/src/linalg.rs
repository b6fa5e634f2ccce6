//! Dense row-major matrices and the few factorizations the lab needs.
//!
//! Everything here is `f64` and sized for desk-scale problems (block
//! matrices of a few dozen rows, batches of a few hundred samples).

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetry tolerance accepted by the symmetric routines.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Off-diagonal Frobenius norm at which cyclic Jacobi stops.
pub const JACOBI_TOL: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim("Mat::from_vec", rows * cols, data.len()));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Panics on ragged input; intended for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn diag(entries: &[f64]) -> Self {
        let mut m = Mat::zeros(entries.len(), entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Mat {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Mat::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`; the shape of a dense layer applied to a batch.
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension");
        let mut out = Mat::zeros(self.rows, other.rows);
        let k = self.cols;
        for i in 0..self.rows {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..other.rows {
                let b = &other.data[j * k..(j + 1) * k];
                out.data[i * other.rows + j] = dot(a, b);
            }
        }
        out
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension");
        let mut out = Mat::zeros(self.cols, other.cols);
        let n = other.cols;
        for r in 0..self.rows {
            let a_row = &self.data[r * self.cols..(r + 1) * self.cols];
            let b_row = &other.data[r * n..(r + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mat_vec dimension");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn add(&self, other: &Mat) -> Mat {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        self.zip_with(other, |a, b| a - b)
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

    pub fn zip_with(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.shape(), other.shape(), "elementwise shape");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |M - Mᵀ|`, or infinity for non-square input.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Copy `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Mat) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat {
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out[(i, j)] = self[(r0 + i, c0 + j)];
            }
        }
        out
    }

    pub fn symmetrize(&self) -> Mat {
        self.add(&self.transpose()).scale(0.5)
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn check_symmetric(m: &Mat) -> Result<()> {
    if !m.is_square() {
        return Err(Error::dim("symmetric matrix", "square", format!("{}x{}", m.rows, m.cols)));
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// All eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi.
pub fn sym_eigenvalues(m: &Mat) -> Result<Vec<f64>> {
    check_symmetric(m)?;
    let n = m.rows;
    let mut a = m.symmetrize();
    let scale = a.frobenius().max(1.0);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig = a.diagonal();
    eig.sort_by(|x, y| x.total_cmp(y));
    Ok(eig)
}

/// Largest eigenvalue of a symmetric matrix. Empty matrices have none and
/// report `-inf`, so "λ_max ≤ tol" holds vacuously.
pub fn sym_eig_max(m: &Mat) -> Result<f64> {
    Ok(sym_eigenvalues(m)?.last().copied().unwrap_or(f64::NEG_INFINITY))
}

/// Smallest eigenvalue; `+inf` for an empty matrix.
pub fn sym_eig_min(m: &Mat) -> Result<f64> {
    Ok(sym_eigenvalues(m)?.first().copied().unwrap_or(f64::INFINITY))
}

/// Spectral norm `‖M‖₂ = sqrt(λ_max(MᵀM))`.
pub fn spectral_norm(m: &Mat) -> f64 {
    let gram = m.matmul_tn(m).symmetrize();
    sym_eig_max(&gram).map_or(0.0, |v| v.max(0.0).sqrt())
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn expm(m: &Mat) -> Mat {
    assert!(m.is_square(), "expm needs a square matrix");
    let n = m.rows;
    let norm = m.max_abs() * n as f64;
    let mut squarings = 0u32;
    let mut scaled = m.clone();
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
        scaled = m.scale(0.5f64.powi(squarings as i32));
    }
    let mut result = Mat::identity(n);
    let mut term = Mat::identity(n);
    for k in 1..=20 {
        term = term.matmul(&scaled).scale(1.0 / k as f64);
        result.add_assign(&term);
    }
    for _ in 0..squarings {
        result = result.matmul(&result);
    }
    result
}
