//! Matrix-valued fields on the base slice of the torus structure.
//!
//! Entry `(i, j)` of a homomorphism from a sum of line bundles of degrees
//! `cols` to one of degrees `rows` is a section of twist `rows[i] − cols[j]`
//! in the Landau frame. Endomorphisms and metrics use `rows == cols`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::torus::TorusOps;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Clone, Debug, PartialEq)]
pub struct SliceMat {
    pub rows: Vec<i64>,
    pub cols: Vec<i64>,
    /// Row-major entries, each one value per slice point.
    pub entries: Vec<Vec<Complex64>>,
}

impl SliceMat {
    pub fn zeros(rows: &[i64], cols: &[i64], n: usize) -> Self {
        Self {
            rows: rows.to_vec(),
            cols: cols.to_vec(),
            entries: vec![vec![ZERO; n]; rows.len() * cols.len()],
        }
    }

    pub fn identity(degrees: &[i64], n: usize) -> Self {
        Self::scalar(degrees, n, Complex64::new(1.0, 0.0))
    }

    pub fn scalar(degrees: &[i64], n: usize, c: Complex64) -> Self {
        let mut m = Self::zeros(degrees, degrees, n);
        for i in 0..degrees.len() {
            m.entries[i * degrees.len() + i] = vec![c; n];
        }
        m
    }

    /// Diagonal matrix with per-point diagonal values.
    pub fn diagonal(degrees: &[i64], diag: &[Vec<Complex64>]) -> Self {
        let n = diag[0].len();
        let mut m = Self::zeros(degrees, degrees, n);
        for (i, d) in diag.iter().enumerate() {
            m.entries[i * degrees.len() + i] = d.clone();
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    pub fn npoints(&self) -> usize {
        self.entries.first().map_or(0, |e| e.len())
    }

    pub fn twist(&self, i: usize, j: usize) -> i64 {
        self.rows[i] - self.cols[j]
    }

    pub fn entry(&self, i: usize, j: usize) -> &[Complex64] {
        &self.entries[i * self.ncols() + j]
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut Vec<Complex64> {
        let c = self.ncols();
        &mut self.entries[i * c + j]
    }

    pub fn at(&self, p: usize) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.nrows(), self.ncols(), |i, j| self.entry(i, j)[p])
    }

    pub fn set(&mut self, p: usize, m: &DMatrix<Complex64>) {
        let c = self.ncols();
        for i in 0..self.nrows() {
            for j in 0..c {
                self.entries[i * c + j][p] = m[(i, j)];
            }
        }
    }

    /// Builds a field by evaluating a matrix function at every point.
    pub fn from_points(rows: &[i64], cols: &[i64], n: usize, f: impl Fn(usize) -> DMatrix<Complex64> + Sync + Send) -> Self {
        let mats: Vec<DMatrix<Complex64>> = (0..n).into_par_iter().map(f).collect();
        let mut out = Self::zeros(rows, cols, n);
        for (p, m) in mats.iter().enumerate() {
            out.set(p, m);
        }
        out
    }

    /// Pointwise map of the matrix at each point (same shape and degrees).
    pub fn map_points(&self, f: impl Fn(usize, DMatrix<Complex64>) -> DMatrix<Complex64> + Sync + Send) -> Self {
        Self::from_points(&self.rows, &self.cols, self.npoints(), |p| f(p, self.at(p)))
    }

    pub fn check_shape(&self, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols || self.npoints() != other.npoints() {
            return Err(Error::ShapeMismatch(format!(
                "matrix fields of degrees {:?}x{:?} and {:?}x{:?}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn zip(&self, other: &Self, f: impl Fn(Complex64, Complex64) -> Complex64) -> Self {
        Self {
            rows: self.rows.clone(),
            cols: self.cols.clone(),
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self {
            rows: self.rows.clone(),
            cols: self.cols.clone(),
            entries: self.entries.iter().map(|e| e.iter().map(|&v| v * c).collect()).collect(),
        }
    }

    pub fn scale_re(&self, c: f64) -> Self {
        self.scale(Complex64::new(c, 0.0))
    }

    /// Pointwise product; the inner degrees must agree.
    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "inner degrees differ");
        let (r, k, c) = (self.nrows(), self.ncols(), other.ncols());
        let n = self.npoints();
        let mut out = Self::zeros(&self.rows, &other.cols, n);
        for i in 0..r {
            for j in 0..c {
                let dst = &mut out.entries[i * c + j];
                for l in 0..k {
                    let a = &self.entries[i * k + l];
                    let b = &other.entries[l * c + j];
                    for p in 0..n {
                        dst[p] += a[p] * b[p];
                    }
                }
            }
        }
        out
    }

    /// Pointwise conjugate transpose.
    pub fn adjoint(&self) -> Self {
        let (r, c) = (self.nrows(), self.ncols());
        let mut out = Self::zeros(&self.cols, &self.rows, self.npoints());
        for i in 0..r {
            for j in 0..c {
                out.entries[j * r + i] = self.entries[i * c + j].iter().map(|v| v.conj()).collect();
            }
        }
        out
    }

    /// Pointwise inverse of a square field.
    pub fn inverse(&self) -> Result<Self> {
        let r = self.nrows();
        let n = self.npoints();
        let mut out = Self::zeros(&self.cols, &self.rows, n);
        if r == 1 {
            out.entries[0] = self.entries[0].iter().map(|v| 1.0 / v).collect();
        } else if r == 2 {
            for p in 0..n {
                let (a, b, c, d) = (self.entries[0][p], self.entries[1][p], self.entries[2][p], self.entries[3][p]);
                let det = a * d - b * c;
                out.entries[0][p] = d / det;
                out.entries[1][p] = -b / det;
                out.entries[2][p] = -c / det;
                out.entries[3][p] = a / det;
            }
        } else {
            for p in 0..n {
                let m = self.at(p).try_inverse().ok_or_else(|| Error::NonFinite(format!("singular matrix at point {p}")))?;
                out.set(p, &m);
            }
        }
        if out.entries.iter().flatten().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite("matrix inverse".into()));
        }
        Ok(out)
    }

    pub fn trace(&self) -> Vec<Complex64> {
        let n = self.npoints();
        let mut t = vec![ZERO; n];
        for i in 0..self.nrows().min(self.ncols()) {
            for (tp, v) in t.iter_mut().zip(self.entry(i, i)) {
                *tp += v;
            }
        }
        t
    }

    /// Pointwise determinant.
    pub fn det(&self) -> Vec<Complex64> {
        let n = self.npoints();
        match self.nrows() {
            1 => self.entries[0].clone(),
            2 => (0..n)
                .map(|p| self.entries[0][p] * self.entries[3][p] - self.entries[1][p] * self.entries[2][p])
                .collect(),
            _ => (0..n).map(|p| self.at(p).determinant()).collect(),
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.entries.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().flatten().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// `(∇_z, ∇_z̄)` of every entry with its twist.
    pub fn d_z_zbar(&self, t: &TorusOps) -> (Self, Self) {
        let c = self.ncols();
        let pairs: Vec<(Vec<Complex64>, Vec<Complex64>)> = self
            .entries
            .par_iter()
            .enumerate()
            .map(|(k, e)| t.d_z_zbar(e, self.twist(k / c, k % c)))
            .collect();
        let mut dz = Self::zeros(&self.rows, &self.cols, self.npoints());
        let mut dzb = dz.clone();
        for (k, (a, b)) in pairs.into_iter().enumerate() {
            dz.entries[k] = a;
            dzb.entries[k] = b;
        }
        (dz, dzb)
    }

    pub fn d_z(&self, t: &TorusOps) -> Self {
        self.d_z_zbar(t).0
    }

    pub fn d_zbar(&self, t: &TorusOps) -> Self {
        self.d_z_zbar(t).1
    }

    /// Largest `|A − A†|` entry.
    /// Drops the Nyquist modes of every entry (see [`TorusOps::drop_nyquist`]).
    pub fn drop_nyquist(&self, t: &TorusOps) -> Self {
        let mut out = self.clone();
        for i in 0..self.nrows() {
            for j in 0..self.ncols() {
                let m = self.twist(i, j);
                t.drop_nyquist(out.entry_mut(i, j), m);
            }
        }
        out
    }

    pub fn hermitian_defect(&self) -> f64 {
        self.sub(&self.adjoint()).max_norm()
    }

    /// Makes the field exactly hermitian: `(A + A†)/2`.
    pub fn hermitize(&self) -> Self {
        self.add(&self.adjoint()).scale_re(0.5)
    }
}

/// Eigenvalues (ascending) of an `H`-self-adjoint matrix `M`, i.e. one with
/// `HM` hermitian, via the Cholesky factor `H = LL†`.
pub fn h_selfadjoint_eigenvalues(h: &DMatrix<Complex64>, m: &DMatrix<Complex64>) -> Option<Vec<f64>> {
    let l = h.clone().cholesky()?.l();
    let li = l.clone().try_inverse()?;
    let s = l.adjoint() * m * li.adjoint();
    let s = (&s + s.adjoint()) * Complex64::new(0.5, 0.0);
    let mut e: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(f64::total_cmp);
    Some(e)
}

/// Real eigenvalues (ascending) of the matrix at point `p` when it is known
/// to be similar to a hermitian one; closed form for rank ≤ 2.
pub fn real_eigenvalues_at(m: &SliceMat, h: &SliceMat, p: usize) -> Option<Vec<f64>> {
    match m.nrows() {
        1 => Some(vec![m.entries[0][p].re]),
        2 => {
            let (a, b, c, d) = (m.entries[0][p], m.entries[1][p], m.entries[2][p], m.entries[3][p]);
            let half = 0.5 * (a + d).re;
            let det = (a * d - b * c).re;
            let disc = (half * half - det).max(0.0).sqrt();
            Some(vec![half - disc, half + disc])
        }
        _ => h_selfadjoint_eigenvalues(&h.at(p), &m.at(p)),
    }
}

/// Smallest eigenvalue of a hermitian matrix.
pub fn min_eigenvalue(h: &DMatrix<Complex64>) -> f64 {
    let s = (h + h.adjoint()) * Complex64::new(0.5, 0.0);
    s.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_and_adjoint() {
        let deg = [0i64, 1];
        let m = SliceMat::from_points(&deg, &deg, 4, |p| {
            DMatrix::from_row_slice(
                2,
                2,
                &[
                    Complex64::new(2.0 + p as f64, 0.0),
                    Complex64::new(0.3, 0.1),
                    Complex64::new(0.3, -0.1),
                    Complex64::new(1.0, 0.0),
                ],
            )
        });
        let prod = m.mul(&m.inverse().unwrap());
        assert!(prod.sub(&SliceMat::identity(&deg, 4)).max_norm() < 1e-14);
        assert!(m.hermitian_defect() < 1e-15);
        let e = h_selfadjoint_eigenvalues(&m.at(0), &SliceMat::identity(&deg, 4).at(0)).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-14 && (e[1] - 1.0).abs() < 1e-14);
    }
}
