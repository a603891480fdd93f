//! Sasakian holomorphic vector bundles over the torus-base structure.
//!
//! A bundle is a fixed smooth sum of reference line bundles `O(k_i)` pulled
//! back from the base, each with its constant-curvature Landau connection
//! and identity reference metric. A holomorphic structure is the reference
//! operator plus an End-valued `(0,1)` perturbation `α = Q dz̄`; a hermitian
//! metric is a positive matrix field `H` with `h(s, t) = s†Ht`.
//!
//! Bundle-valued quantities are ξ-invariant and live on the base slice
//! ([`SliceMat`]); only the partial-connection checks work on the full grid.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forms::{self, GeneralForm, TransversalForm, DZ, DZBAR};
use crate::grid::{make_grid, BaseManifold, Direction, Field, GridHandle, GridSpec};
use crate::slicemat::{h_selfadjoint_eigenvalues, min_eigenvalue, SliceMat};
use crate::torus::TorusOps;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Smooth sum of pulled-back line bundles of the given degrees.
#[derive(Clone, Debug)]
pub struct SasakianBundle {
    pub grid: GridHandle,
    pub degrees: Vec<i64>,
}

impl SasakianBundle {
    pub fn new(grid: &GridHandle, degrees: &[i64]) -> Result<Self> {
        grid.require_torus("holomorphic bundles")?;
        if degrees.is_empty() {
            return Err(Error::ShapeMismatch("bundle rank must be at least 1".into()));
        }
        Ok(Self {
            grid: grid.clone(),
            degrees: degrees.to_vec(),
        })
    }

    pub fn rank(&self) -> usize {
        self.degrees.len()
    }

    pub fn torus(&self) -> &TorusOps {
        self.grid.torus().expect("bundle grids are torus grids")
    }

    /// Number of base-slice points.
    pub fn npoints(&self) -> usize {
        self.grid.slice_len()
    }

    pub fn area(&self) -> f64 {
        self.torus().area
    }

    /// `diag(π k_i / A)`, the `K_zz̄` of the reference connection.
    pub fn reference_curvature(&self) -> SliceMat {
        let n = self.npoints();
        let diag: Vec<Vec<Complex64>> = self
            .degrees
            .iter()
            .map(|&k| vec![c(PI * k as f64 / self.area()); n])
            .collect();
        SliceMat::diagonal(&self.degrees, &diag)
    }

    pub fn reference_metric(&self) -> HermitianMetric {
        HermitianMetric {
            h: SliceMat::identity(&self.degrees, self.npoints()),
        }
    }

    /// `vol(X) = ∫ dω∧ω`.
    pub fn volume(&self) -> Result<f64> {
        forms::volume(&self.grid)
    }

    /// Integral over `X` of a fiber-invariant slice density against the
    /// Riemannian volume.
    pub fn integrate_slice(&self, f: &[Complex64]) -> Complex64 {
        self.torus().integrate(f) * (2.0 * PI)
    }

    pub fn end_zeros(&self) -> SliceMat {
        SliceMat::zeros(&self.degrees, &self.degrees, self.npoints())
    }

    /// Slice field of entry twist `m` from a function of lattice coordinates.
    pub fn slice_from_fn(&self, f: impl Fn(f64, f64) -> Complex64) -> Vec<Complex64> {
        self.torus().from_fn(f)
    }
}

/// Reference operator plus the `(0,1)` perturbation `α = Q dz̄`. Entry
/// `(i, j)` of `alpha` has twist `k_i − k_j`.
#[derive(Clone, Debug)]
pub struct HolomorphicStructure {
    pub bundle: SasakianBundle,
    pub alpha: Vec<Field>,
}

impl HolomorphicStructure {
    pub fn reference(bundle: &SasakianBundle) -> Self {
        Self::from_q(bundle, &bundle.end_zeros()).expect("shape is consistent")
    }

    pub fn from_q(bundle: &SasakianBundle, q: &SliceMat) -> Result<Self> {
        if q.rows != bundle.degrees || q.cols != bundle.degrees {
            return Err(Error::ShapeMismatch("alpha degrees differ from the bundle".into()));
        }
        let alpha = (0..q.entries.len())
            .map(|k| {
                let (i, j) = (k / bundle.rank(), k % bundle.rank());
                Field::from_slice(&bundle.grid, q.twist(i, j), &q.entries[k])
            })
            .collect();
        Ok(Self {
            bundle: bundle.clone(),
            alpha,
        })
    }

    /// Rank-2 extension `0 → O(k_0) → E → O(k_1) → 0` with class
    /// `ε·conj(σ)^{k_1−k_0} dz̄`, a harmonic representative.
    pub fn extension(bundle: &SasakianBundle, eps: f64) -> Result<Self> {
        if bundle.rank() != 2 {
            return Err(Error::ShapeMismatch("extension needs rank 2".into()));
        }
        let gap = bundle.degrees[1] - bundle.degrees[0];
        let t = bundle.torus();
        let mut q = bundle.end_zeros();
        *q.entry_mut(0, 1) = t.from_fn(|x, y| t.base_section(-gap, x, y) * eps);
        Self::from_q(bundle, &q)
    }

    pub fn from_descriptor(bundle: &SasakianBundle, alpha: &AlphaSpec) -> Result<Self> {
        match alpha {
            AlphaSpec::Zero => Ok(Self::reference(bundle)),
            AlphaSpec::ExtensionClass(e) => Self::extension(bundle, e.epsilon),
            AlphaSpec::Fourier(terms) => {
                let t = bundle.torus();
                let r = bundle.rank();
                let mut q = bundle.end_zeros();
                for term in terms {
                    if term.row >= r || term.col >= r {
                        return Err(Error::ShapeMismatch(format!(
                            "fourier term ({}, {}) outside rank {r}",
                            term.row, term.col
                        )));
                    }
                    let m = q.twist(term.row, term.col);
                    let coef = Complex64::new(term.re, term.im);
                    let vals = t.from_fn(|x, y| {
                        coef * t.base_section(m, x, y)
                            * Complex64::from_polar(1.0, 2.0 * PI * (term.mx as f64 * x + term.my as f64 * y))
                    });
                    let e = q.entry_mut(term.row, term.col);
                    for (a, b) in e.iter_mut().zip(vals) {
                        *a += b;
                    }
                }
                Self::from_q(bundle, &q)
            }
        }
    }

    pub fn rank(&self) -> usize {
        self.bundle.rank()
    }

    /// Adds `ε e^{inθ}` times the base section of the right twist to one
    /// entry, producing fiber-dependent (non-holomorphic) data.
    pub fn with_fiber_mode(&self, row: usize, col: usize, n: i64, eps: f64) -> Self {
        let mut out = self.clone();
        let k = row * self.rank() + col;
        let m = self.alpha[k].twist;
        let g = self.bundle.grid.clone();
        let t = self.bundle.torus().clone();
        let extra = Field::from_fn(&g, m, |p| {
            t.base_section(m, p.x, p.y) * Complex64::from_polar(eps, n as f64 * p.theta)
        });
        out.alpha[k] = &out.alpha[k] + &extra;
        out.alpha[k].xi_invariant = out.alpha[k].fiber_variation() < 1e-14;
        out
    }

    pub fn is_xi_invariant(&self) -> bool {
        self.alpha.iter().all(|f| f.xi_invariant || f.fiber_variation() < 1e-12)
    }

    /// `Q` on the base slice; fails for fiber-dependent data.
    pub fn q_slice(&self) -> Result<SliceMat> {
        if !self.is_xi_invariant() {
            return Err(Error::Unsupported(
                "alpha depends on the fiber coordinate; it does not define a Sasakian holomorphic structure".into(),
            ));
        }
        let d = &self.bundle.degrees;
        let mut q = SliceMat::zeros(d, d, self.bundle.npoints());
        for (k, f) in self.alpha.iter().enumerate() {
            q.entries[k] = f.slice();
        }
        Ok(q)
    }

    /// `max |L_ξ α|`.
    pub fn lie_reeb_residual(&self) -> Result<f64> {
        let mut m: f64 = 0.0;
        for a in &self.alpha {
            m = m.max(a.differentiate(Direction::Theta)?.max_norm());
        }
        Ok(m)
    }
}

/// Hermitian metric `h(s, t) = s†Ht` on the bundle.
#[derive(Clone, Debug)]
pub struct HermitianMetric {
    pub h: SliceMat,
}

impl HermitianMetric {
    pub fn new(h: SliceMat) -> Result<Self> {
        let m = Self { h };
        m.validate()?;
        Ok(m)
    }

    /// Hermitian symmetry, finiteness and positivity; reports the first
    /// point where positivity fails.
    pub fn validate(&self) -> Result<()> {
        if !self.h.is_finite() {
            return Err(Error::NonFinite("hermitian metric".into()));
        }
        let scale = self.h.max_norm().max(1.0);
        if self.h.hermitian_defect() > 1e-12 * scale {
            return Err(Error::ShapeMismatch(format!(
                "metric is not hermitian (defect {:e})",
                self.h.hermitian_defect()
            )));
        }
        for p in 0..self.h.npoints() {
            let e = min_eigenvalue(&self.h.at(p));
            if !(e > 0.0) {
                return Err(Error::NotPositive { index: p, min_eig: e });
            }
        }
        Ok(())
    }

    /// `e^{u} H`.
    pub fn conformal(&self, u: &[f64]) -> Self {
        let mut h = self.h.clone();
        for e in h.entries.iter_mut() {
            for (v, &w) in e.iter_mut().zip(u) {
                *v *= w.exp();
            }
        }
        Self { h }
    }

    /// Smallest eigenvalue over the grid.
    pub fn min_eigenvalue(&self) -> f64 {
        (0..self.h.npoints())
            .map(|p| min_eigenvalue(&self.h.at(p)))
            .fold(f64::INFINITY, f64::min)
    }

    /// `G†G` for `G = I + ε·(smooth random endomorphism)`, plus a random
    /// positive conformal factor. Entries carry the right twists.
    pub fn random(bundle: &SasakianBundle, seed: u64, eps: f64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = bundle.torus();
        let r = bundle.rank();
        let d = &bundle.degrees;
        let mut g = SliceMat::identity(d, bundle.npoints());
        for i in 0..r {
            for j in 0..r {
                let m = d[i] - d[j];
                let coefs: Vec<(i64, i64, Complex64)> = (0..3)
                    .map(|_| {
                        (
                            rng.gen_range(-1..=1),
                            rng.gen_range(-1..=1),
                            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                        )
                    })
                    .collect();
                let vals = t.from_fn(|x, y| {
                    let s: Complex64 = coefs
                        .iter()
                        .map(|&(a, b, cf)| cf * Complex64::from_polar(1.0, 2.0 * PI * (a as f64 * x + b as f64 * y)))
                        .sum();
                    s * t.base_section(m, x, y) * (eps / 3.0)
                });
                let e = g.entry_mut(i, j);
                for (a, b) in e.iter_mut().zip(vals) {
                    *a += b;
                }
            }
        }
        let (a, b, amp) = (rng.gen_range(1..3) as f64, rng.gen_range(1..3) as f64, rng.gen_range(0.1..0.4));
        let phase = rng.gen_range(0.0..1.0);
        let u = t
            .from_fn(|x, y| c(amp * (2.0 * PI * (a * x + b * y + phase)).sin()))
            .iter()
            .map(|v| v.re)
            .collect::<Vec<_>>();
        let h = g.adjoint().mul(&g).hermitize();
        Self::new(h)?.conformal(&u).checked()
    }

    fn checked(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }
}

/// Chern connection `∇ = ∇_ref + P dz + Q dz̄` in the reference frame.
#[derive(Clone, Debug)]
pub struct ChernConnection {
    pub p: SliceMat,
    pub q: SliceMat,
}

/// `P = H⁻¹(∂_z H − Q†H)`, from `∂_z h(s,t) = h(∇_z̄ s, t) + h(s, ∇_z t)`.
pub fn chern_connection(d: &HolomorphicStructure, h: &HermitianMetric) -> Result<ChernConnection> {
    h.validate()?;
    let q = d.q_slice()?;
    let t = d.bundle.torus();
    let hz = h.h.d_z(t);
    let p = h.h.inverse()?.mul(&hz.sub(&q.adjoint().mul(&h.h)));
    Ok(ChernConnection { p, q })
}

/// Independent solver: `HP = ∂_z H − Q†H` solved pointwise by least squares
/// on the vectorized system `(I ⊗ H) vec P = vec(∂_z H − Q†H)`.
pub fn chern_connection_lsq(d: &HolomorphicStructure, h: &HermitianMetric) -> Result<ChernConnection> {
    h.validate()?;
    let q = d.q_slice()?;
    let t = d.bundle.torus();
    let rhs = h.h.d_z(t).sub(&q.adjoint().mul(&h.h));
    let r = d.rank();
    let p = SliceMat::from_points(&d.bundle.degrees, &d.bundle.degrees, rhs.npoints(), |pt| {
        let hm = h.h.at(pt);
        let b = rhs.at(pt);
        let mut a = DMatrix::<Complex64>::zeros(r * r, r * r);
        let mut v = nalgebra::DVector::<Complex64>::zeros(r * r);
        // unknown P_{lj} at index l*r + j; equation (i, j): Σ_l H_il P_lj
        for i in 0..r {
            for j in 0..r {
                v[i * r + j] = b[(i, j)];
                for l in 0..r {
                    a[(i * r + j, l * r + j)] = hm[(i, l)];
                }
            }
        }
        let sol = a
            .svd(true, true)
            .solve(&v, 1e-14)
            .unwrap_or_else(|_| nalgebra::DVector::from_element(r * r, Complex64::new(f64::NAN, 0.0)));
        DMatrix::from_fn(r, r, |i, j| sol[i * r + j])
    });
    if !p.is_finite() {
        return Err(Error::NonFinite("least-squares Chern connection".into()));
    }
    Ok(ChernConnection { p, q })
}

/// Curvature `K_zz̄` of a Chern connection: `K = K_zz̄ dz∧dz̄`, `iΛK = K_zz̄`.
#[derive(Clone, Debug)]
pub struct CurvatureTensorField {
    pub k: SliceMat,
    pub h: SliceMat,
    pub degrees: Vec<i64>,
    pub grid: GridHandle,
}

/// `K_zz̄ = K_ref + ∇_z Q − ∇_z̄ P + [P, Q]`.
pub fn curvature_of(bundle: &SasakianBundle, conn: &ChernConnection, h: &HermitianMetric) -> CurvatureTensorField {
    let t = bundle.torus();
    let qz = conn.q.d_z(t);
    let pzb = conn.p.d_zbar(t);
    let comm = conn.p.mul(&conn.q).sub(&conn.q.mul(&conn.p));
    let k = bundle.reference_curvature().add(&qz).sub(&pzb).add(&comm);
    CurvatureTensorField {
        k,
        h: h.h.clone(),
        degrees: bundle.degrees.clone(),
        grid: bundle.grid.clone(),
    }
}

pub fn curvature(d: &HolomorphicStructure, h: &HermitianMetric) -> Result<CurvatureTensorField> {
    let conn = chern_connection(d, h)?;
    let k = curvature_of(&d.bundle, &conn, h);
    if !k.k.is_finite() {
        return Err(Error::NonFinite("curvature".into()));
    }
    Ok(k)
}

impl CurvatureTensorField {
    /// `iΛ_ω K` as an endomorphism field.
    pub fn i_lambda(&self) -> &SliceMat {
        &self.k
    }

    /// Entry `(i, j)` of `K` as a transversal 2-form.
    pub fn entry_form(&self, i: usize, j: usize) -> Result<TransversalForm> {
        let f = Field::from_slice(&self.grid, self.k.twist(i, j), self.k.entry(i, j));
        let form = GeneralForm::zero(&self.grid, 2, f.twist)?.with(DZ | DZBAR, f)?;
        TransversalForm::new(form, 0.0)
    }

    /// `max |HK_zz̄ − (HK_zz̄)†|`: skew-hermitian `K` means `HK_zz̄` hermitian.
    pub fn skew_hermitian_residual(&self) -> f64 {
        self.h.mul(&self.k).hermitian_defect()
    }

    /// Largest `(2,0)` and `(0,2)` parts over all entries.
    pub fn type_residual(&self) -> Result<f64> {
        let r = self.degrees.len();
        let mut m: f64 = 0.0;
        for i in 0..r {
            for j in 0..r {
                let f = self.entry_form(i, j)?;
                for t in [0usize, 2] {
                    m = m.max(forms::type_project(&f, t)?.form().max_norm());
                }
            }
        }
        Ok(m)
    }

    pub fn trace(&self) -> Vec<Complex64> {
        self.k.trace()
    }
}

/// Chern forms `c_0 = 1`, `c_1 = (i/2π) tr K` and, at `up_to = 2`, the
/// coefficient of `c_2 = (i/2π)² e_2(K)` on `(dz∧dz̄)²`. On a surface base
/// the 4-form itself vanishes; the coefficient is what families integrate.
#[derive(Clone, Debug)]
pub struct ChernForms {
    pub c0: Field,
    pub c1: TransversalForm,
    pub c2_coefficient: Option<Vec<Complex64>>,
}

pub fn chern_forms(k: &CurvatureTensorField, up_to: usize) -> Result<ChernForms> {
    if up_to > 2 {
        return Err(Error::DegreeOverflow(up_to));
    }
    let tr = k.trace();
    let c1v: Vec<Complex64> = tr.iter().map(|v| v * I / (2.0 * PI)).collect();
    let f = Field::from_slice(&k.grid, 0, &c1v);
    let c1 = TransversalForm::new(GeneralForm::zero(&k.grid, 2, 0)?.with(DZ | DZBAR, f)?, 0.0)?;
    let c2_coefficient = (up_to == 2).then(|| {
        let k2 = k.k.mul(&k.k).trace();
        let s = (I / (2.0 * PI)) * (I / (2.0 * PI));
        tr.iter().zip(&k2).map(|(t, t2)| s * 0.5 * (t * t - t2)).collect()
    });
    Ok(ChernForms {
        c0: Field::constant(&k.grid, c(1.0)),
        c1,
        c2_coefficient,
    })
}

/// `deg E = ∫_X c_1(E, h) ∧ ω`.
pub fn degree(d: &HolomorphicStructure, h: &HermitianMetric) -> Result<f64> {
    let k = curvature(d, h)?;
    degree_from_curvature(&k)
}

pub fn degree_from_curvature(k: &CurvatureTensorField) -> Result<f64> {
    let cf = chern_forms(k, 1)?;
    let top = forms::wedge(cf.c1.form(), &GeneralForm::contact(&k.grid)?)?;
    Ok(forms::integrate(&top)?.re)
}

/// `λ = 2π·deg / (rank·vol)`.
pub fn einstein_constant(d: &HolomorphicStructure, h: &HermitianMetric) -> Result<f64> {
    let deg = degree(d, h)?;
    Ok(2.0 * PI * deg / (d.rank() as f64 * d.bundle.volume()?))
}

/// Closed-form λ from the topological degrees `2π Σk_i`.
pub fn einstein_constant_topological(bundle: &SasakianBundle) -> Result<f64> {
    let deg = 2.0 * PI * bundle.degrees.iter().sum::<i64>() as f64;
    Ok(2.0 * PI * deg / (bundle.rank() as f64 * bundle.volume()?))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct HeResidual {
    pub sup: f64,
    pub l2: f64,
}

/// Norms of `M = iΛK − λ·id`: sup of the pointwise spectral norm and the
/// L² norm of `|M|²_H = tr(M M^{*H})`.
pub fn he_residual_of(bundle: &SasakianBundle, k: &CurvatureTensorField, lambda: f64) -> HeResidual {
    let m = k.k.sub(&SliceMat::scalar(&bundle.degrees, bundle.npoints(), c(lambda)));
    let sup = (0..m.npoints())
        .map(|p| {
            h_selfadjoint_eigenvalues(&k.h.at(p), &m.at(p))
                .map(|e| e.iter().map(|v| v.abs()).fold(0.0, f64::max))
                .unwrap_or(f64::NAN)
        })
        .fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
    let l2 = bundle.integrate_slice(&h_norm_sq(&m, &k.h)).re.max(0.0).sqrt();
    HeResidual { sup, l2 }
}

pub fn he_residual(d: &HolomorphicStructure, h: &HermitianMetric) -> Result<HeResidual> {
    let k = curvature(d, h)?;
    let lambda = einstein_constant(d, h)?;
    Ok(he_residual_of(&d.bundle, &k, lambda))
}

/// Pointwise `tr(A A^{*H})` with `A^{*H} = H⁻¹A†H`.
pub fn h_norm_sq(a: &SliceMat, h: &SliceMat) -> Vec<Complex64> {
    let hi = h.inverse().expect("metric is invertible");
    a.mul(&hi).mul(&a.adjoint()).mul(h).trace()
}

/// `det E` with background degree `Σk_i` and induced perturbation `tr α`.
pub fn determinant_bundle(d: &HolomorphicStructure) -> Result<(SasakianBundle, HolomorphicStructure)> {
    let total: i64 = d.bundle.degrees.iter().sum();
    let det = SasakianBundle::new(&d.bundle.grid, &[total])?;
    let q = d.q_slice()?;
    let mut tq = det.end_zeros();
    tq.entries[0] = q.trace();
    let hs = HolomorphicStructure::from_q(&det, &tq)?;
    Ok((det, hs))
}

/// `det H` as a metric on the determinant bundle.
pub fn determinant_metric(h: &HermitianMetric) -> HermitianMetric {
    let total: i64 = h.h.rows.iter().sum();
    let det = h.h.det();
    let mut m = SliceMat::zeros(&[total], &[total], det.len());
    m.entries[0] = det.iter().map(|v| c(v.re)).collect();
    HermitianMetric { h: m }
}

/// Result of applying `D = (D_z̄, D_ξ)` to a section.
#[derive(Clone, Debug)]
pub struct PartialDerivative {
    pub zbar: Vec<Field>,
    pub xi: Vec<Field>,
}

fn check_section(d: &HolomorphicStructure, s: &[Field]) -> Result<()> {
    if s.len() != d.rank() {
        return Err(Error::ShapeMismatch(format!("section has {} components, rank is {}", s.len(), d.rank())));
    }
    for (f, &k) in s.iter().zip(&d.bundle.degrees) {
        f.same_grid(&d.alpha[0])?;
        if f.twist != k {
            return Err(Error::ShapeMismatch(format!("component twist {} but degree {k}", f.twist)));
        }
    }
    Ok(())
}

/// `D s = (∇_z̄^h s + Q s) dz̄ + (ξ s) ω`, the partial connection along
/// `F^{0,1} ⊕ ℂξ`.
pub fn apply_partial(d: &HolomorphicStructure, s: &[Field]) -> Result<PartialDerivative> {
    check_section(d, s)?;
    let r = d.rank();
    let mut zbar = Vec::with_capacity(r);
    let mut xi = Vec::with_capacity(r);
    for i in 0..r {
        let fd = forms::frame_derivatives(&s[i])?;
        let mut acc = fd[1].clone();
        for j in 0..r {
            acc = &acc + &d.alpha[i * r + j].mul(&s[j]);
        }
        acc.twist = s[i].twist;
        zbar.push(acc);
        xi.push(fd[2].clone());
    }
    Ok(PartialDerivative { zbar, xi })
}

/// `max |D(fs) − f D(s) − (∂̄^h f, ξf) s|` for a function `f`.
pub fn leibniz_residual(d: &HolomorphicStructure, f: &Field, s: &[Field]) -> Result<f64> {
    let fs: Vec<Field> = s.iter().map(|si| si.mul(f)).collect();
    let lhs = apply_partial(d, &fs)?;
    let ds = apply_partial(d, s)?;
    let df = forms::frame_derivatives(f)?;
    let mut m: f64 = 0.0;
    for i in 0..s.len() {
        let rz = &(&lhs.zbar[i] - &ds.zbar[i].mul(f)) - &df[1].mul(&s[i]);
        let rx = &(&lhs.xi[i] - &ds.xi[i].mul(f)) - &df[2].mul(&s[i]);
        m = m.max(rz.max_norm()).max(rx.max_norm());
    }
    Ok(m)
}

/// Curvature of the partial connection on `F̃^{0,1}`. At `n = 1` the
/// horizontal `(0,2)` block has no components; the `ω∧dz̄` block is
/// `L_ξ α`, computed with the Cartan formula on each entry.
#[derive(Clone, Debug)]
pub struct PartialCurvature {
    pub xi_zbar: Vec<Field>,
}

impl PartialCurvature {
    pub fn max_norm(&self) -> f64 {
        self.xi_zbar.iter().map(|f| f.max_norm()).fold(0.0, f64::max)
    }
}

pub fn curvature_partial(d: &HolomorphicStructure) -> Result<PartialCurvature> {
    let mut xi_zbar = Vec::with_capacity(d.alpha.len());
    for a in &d.alpha {
        let form = GeneralForm::zero(&d.bundle.grid, 1, a.twist)?.with(DZBAR, a.clone())?;
        let l = forms::lie_reeb(&form)?;
        xi_zbar.push(l.component(DZBAR).clone());
    }
    Ok(PartialCurvature { xi_zbar })
}

/// `max |[D_ξ, D_z̄] s − (L_ξ α) s|`: the commutator of the partial
/// connection agrees with the curvature returned by [`curvature_partial`].
pub fn partial_commutator_residual(d: &HolomorphicStructure, s: &[Field]) -> Result<f64> {
    let r = d.rank();
    let ds = apply_partial(d, s)?;
    let dxi_dz = apply_partial(d, &ds.xi)?.zbar;
    let dz_s = ds.zbar.clone();
    let dxi_of_dz: Vec<Field> = dz_s
        .iter()
        .map(|f| f.differentiate(Direction::Theta))
        .collect::<Result<_>>()?;
    let kc = curvature_partial(d)?;
    let mut m: f64 = 0.0;
    for i in 0..r {
        let mut ks = Field::zeros(&d.bundle.grid, s[i].twist);
        for j in 0..r {
            ks = &ks + &kc.xi_zbar[i * r + j].mul(&s[j]);
        }
        let res = &(&dxi_of_dz[i] - &dxi_dz[i]) - &ks;
        m = m.max(res.max_norm());
    }
    Ok(m)
}

/// `‖(∂̄^h f, ξf)‖_{L²}`: vanishes exactly for holomorphic basic functions.
pub fn holomorphic_function_residual(f: &Field) -> Result<f64> {
    let d = forms::frame_derivatives(f)?;
    let dens = &d[1].mul(&d[1].conj()) + &d[2].mul(&d[2].conj());
    Ok(dens.integrate_density().re.max(0.0).sqrt())
}

#[derive(Clone, Debug, Serialize)]
pub struct HolomorphicSpectrum {
    pub eigenvalues: Vec<f64>,
    /// `‖f − mean f‖/‖f‖` of the minimizer.
    pub minimizer_variation: f64,
}

/// Minimizes `‖(∂̄^h f, ξf)‖²` over `span(basis)` at unit L² norm.
pub fn holomorphic_function_spectrum(basis: &[Field]) -> Result<HolomorphicSpectrum> {
    let n = basis.len();
    if n == 0 {
        return Err(Error::ShapeMismatch("empty basis".into()));
    }
    let ders: Vec<[Field; 3]> = basis.iter().map(forms::frame_derivatives).collect::<Result<_>>()?;
    let ip = |a: &Field, b: &Field| a.mul(&b.conj()).integrate_density();
    let gram = DMatrix::from_fn(n, n, |i, j| ip(&basis[j], &basis[i]));
    let energy = DMatrix::from_fn(n, n, |i, j| ip(&ders[j][1], &ders[i][1]) + ip(&ders[j][2], &ders[i][2]));
    let l = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::ShapeMismatch("basis is linearly dependent".into()))?
        .l();
    let li = l.try_inverse().ok_or_else(|| Error::NonFinite("gram factor".into()))?;
    let s = &li * energy * li.adjoint();
    let s = (&s + s.adjoint()) * c(0.5);
    let eig = s.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let y = eig.eigenvectors.column(order[0]).into_owned();
    let coef = li.adjoint() * y;
    let mut f = Field::zeros(&basis[0].grid, 0);
    for (k, b) in basis.iter().enumerate() {
        f = &f + &b.scale(coef[k]);
    }
    let vol = Field::constant(&f.grid, c(1.0)).integrate_density().re;
    let mean = f.integrate_density() / vol;
    let dev = f.map(|v| v - mean);
    let variation = (ip(&dev, &dev).re / ip(&f, &f).re).sqrt();
    Ok(HolomorphicSpectrum {
        eigenvalues: order.iter().map(|&k| eig.eigenvalues[k]).collect(),
        minimizer_variation: variation,
    })
}

/// `max |∇_z̄Ψ + Q'Ψ − ΨQ|` for `Ψ: E → E'` (rows carry the degrees of
/// `E'`, columns those of `E`).
pub fn holomorphic_map_residual(psi: &SliceMat, d: &HolomorphicStructure, d2: &HolomorphicStructure) -> Result<f64> {
    if psi.cols != d.bundle.degrees || psi.rows != d2.bundle.degrees {
        return Err(Error::ShapeMismatch("map degrees do not match the bundles".into()));
    }
    let q = d.q_slice()?;
    let q2 = d2.q_slice()?;
    let r = psi.d_zbar(d.bundle.torus()).add(&q2.mul(psi)).sub(&psi.mul(&q));
    Ok(r.max_norm())
}

/// Degree of `O(k)` over the round-sphere base with the metric
/// `(1+|w|²)^{−k} e^{u}`, `u = ε x₃`, computed by chart differences of
/// `log h` and the partition of unity. The exact value is `2πk`.
pub fn sphere_line_degree(grid: &GridHandle, k: i64, eps: f64) -> Result<f64> {
    if grid.torus().is_some() {
        return Err(Error::Unsupported("sphere_line_degree needs the sphere grid".into()));
    }
    let log_h = Field::from_fn(grid, 0, |p| {
        let r2 = p.x * p.x + p.y * p.y;
        let x3 = (1.0 - r2) / (1.0 + r2);
        let x3 = if p.chart == 0 { x3 } else { -x3 };
        c(-(k as f64) * (1.0 + r2).ln() + eps * x3)
    });
    let lap = &log_h.differentiate(Direction::X)?.differentiate(Direction::X)?
        + &log_h.differentiate(Direction::Y)?.differentiate(Direction::Y)?;
    // c_1 = −(1/4π) Δ log h du∧dv; degree = 2π ∫_{S²} c_1
    let nt = grid.ntheta();
    let mut acc = 0.0;
    for ch in 0..grid.n_charts {
        for ix in 0..grid.nx() {
            for iy in 0..grid.ny() {
                let w = grid.partition(ch, ix, iy) * grid.hx() * grid.hy();
                if w == 0.0 {
                    continue;
                }
                acc += w * (-lap.values[grid.index(ch, ix, iy, 0)].re / (4.0 * PI));
            }
        }
    }
    let _ = nt;
    Ok(2.0 * PI * acc)
}

/// Extension-class data for the descriptor's `extension_class` kind.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExtensionClass {
    pub epsilon: f64,
}

/// `c · σ_m(x, y) · e^{2πi(mx x + my y)}` added to entry `(row, col)`,
/// where `σ_m` is the base section of the entry's twist.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct FourierTerm {
    pub row: usize,
    pub col: usize,
    #[serde(default)]
    pub mx: i64,
    #[serde(default)]
    pub my: i64,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", content = "data", rename_all = "snake_case")]
pub enum AlphaSpec {
    Zero,
    ExtensionClass(ExtensionClass),
    Fourier(Vec<FourierTerm>),
}

/// Bundle shape descriptor `{rank, degrees, alpha}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ShapeDescriptor {
    pub rank: usize,
    pub degrees: Vec<i64>,
    pub alpha: AlphaSpec,
}

impl ShapeDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.degrees.len() != self.rank {
            return Err(Error::config(
                "degrees",
                format!("expected {} degrees, got {}", self.rank, self.degrees.len()),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityVerdict {
    Stable,
    Polystable,
    StrictlySemistable,
    Unstable,
}

/// Slope verdict over the evident sub-objects of the supported shapes:
/// line bundles, sums of line bundles, and rank-2 extensions
/// `0 → O(k_0) → E → O(k_1) → 0` over the torus base.
pub fn stability_oracle(shape: &ShapeDescriptor) -> Result<StabilityVerdict> {
    shape.validate()?;
    let undecidable = |why: &str| Err(Error::Unsupported(format!("undecidable in this artifact: {why}")));
    if shape.rank == 1 {
        return Ok(StabilityVerdict::Stable);
    }
    let split_verdict = |d: &[i64]| {
        if d.iter().all(|&k| k == d[0]) {
            StabilityVerdict::Polystable
        } else {
            StabilityVerdict::Unstable
        }
    };
    let class = match &shape.alpha {
        AlphaSpec::Zero => return Ok(split_verdict(&shape.degrees)),
        _ if shape.rank != 2 => return undecidable("only rank-2 extensions are supported"),
        AlphaSpec::ExtensionClass(e) => e.epsilon,
        AlphaSpec::Fourier(terms) => {
            if terms.iter().any(|t| (t.row, t.col) != (0, 1)) {
                return undecidable("fourier data outside the extension entry");
            }
            extension_class_coefficient(&shape.degrees, terms)?
        }
    };
    let (a, b) = (shape.degrees[0], shape.degrees[1]);
    if class.abs() < 1e-12 {
        return Ok(split_verdict(&shape.degrees));
    }
    if a > b {
        // H¹(O(a−b)) = 0 on the elliptic base: the extension splits
        return Ok(StabilityVerdict::Unstable);
    }
    if a == b {
        // nonsplit self-extension: the sub O(a) has slope equal to μ(E)
        return Ok(StabilityVerdict::StrictlySemistable);
    }
    // a < b: any sub-line-bundle other than O(a) maps nonzero to O(b) and
    // has degree ≤ b − 1 unless it splits the sequence
    if b - a == 1 {
        Ok(StabilityVerdict::Stable)
    } else {
        undecidable("extension with degree gap above 1 needs the full sub-bundle lattice")
    }
}

/// Harmonic part of the extension entry: L² projection of the `(0,1)`
/// datum onto the harmonic representatives, on a reference grid.
fn extension_class_coefficient(degrees: &[i64], terms: &[FourierTerm]) -> Result<f64> {
    let grid = make_grid(
        BaseManifold::flat_torus(Complex64::new(0.0, 1.0), 1),
        GridSpec::torus(32, 32, 8),
    )?;
    let b = SasakianBundle::new(&grid, degrees)?;
    let hs = HolomorphicStructure::from_descriptor(&b, &AlphaSpec::Fourier(terms.to_vec()))?;
    let beta = hs.q_slice()?.entry(0, 1).to_vec();
    let gap = degrees[1] - degrees[0];
    if gap <= 0 {
        return Ok(beta.iter().map(|v| v.norm()).fold(0.0, f64::max));
    }
    let t = b.torus();
    // harmonic (0,1)-forms of twist −gap are conj of holomorphic sections:
    // conj(σ)^gap times conj of ∂̄-closed periodic factors; project on the
    // span of conj(σ_j) for the first gap translates
    let mut acc: f64 = 0.0;
    for j in 0..gap {
        let shift = j as f64 / gap as f64;
        let basis = t.from_fn(|x, y| t.base_section(-gap, x + shift, y));
        let num: Complex64 = beta.iter().zip(&basis).map(|(u, v)| u * v.conj()).sum();
        let den: f64 = basis.iter().map(|v| v.norm_sqr()).sum();
        acc = acc.max(num.norm() / den.sqrt() / (beta.len() as f64).sqrt());
    }
    Ok(acc)
}

/// Chern-Weil checks on one torus grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChernWeilReport {
    /// `max_k |deg O(k) − 2πk|` over `k ∈ {−2, …, 2}`.
    pub line_degree_error: f64,
    /// Largest `|deg(h) − deg(h_ref)| / max(1, |deg|)` over random metrics
    /// on a line, a split and an extension bundle.
    pub metric_dependence: f64,
    pub metrics_tried: usize,
    /// `max |d c_1|`.
    pub c1_closedness: f64,
    /// `max |iΛK(e^u h) − iΛK(h) + ∂_z∂_z̄ u|` for `u = ε sin 2πx`.
    pub conformal_shift_error: f64,
}

/// Runs the Chern-Weil suite: degrees of the reference lines, metric
/// independence of the degree over `metrics` random metrics per bundle,
/// closedness of `c_1`, and the conformal shift of the curvature against
/// its closed form.
pub fn chern_weil_suite(grid: &GridHandle, metrics: usize, seed: u64) -> Result<ChernWeilReport> {
    let mut line_err: f64 = 0.0;
    for k in -2..=2 {
        let b = SasakianBundle::new(grid, &[k])?;
        let deg = degree(&HolomorphicStructure::reference(&b), &b.reference_metric())?;
        line_err = line_err.max((deg - 2.0 * PI * k as f64).abs());
    }

    let mut dependence: f64 = 0.0;
    let mut closed: f64 = 0.0;
    let mut tried = 0;
    let cases: [(&[i64], bool); 3] = [(&[1], false), (&[0, 1], false), (&[0, 1], true)];
    for (ci, (degrees, ext)) in cases.iter().enumerate() {
        let b = SasakianBundle::new(grid, degrees)?;
        let d = if *ext {
            HolomorphicStructure::extension(&b, 0.84)?
        } else {
            HolomorphicStructure::reference(&b)
        };
        let base = degree(&d, &b.reference_metric())?;
        for j in 0..metrics {
            let h = HermitianMetric::random(&b, seed.wrapping_add((ci * metrics + j) as u64), 0.3)?;
            let k = curvature(&d, &h)?;
            let deg = degree_from_curvature(&k)?;
            dependence = dependence.max((deg - base).abs() / base.abs().max(1.0));
            let c1 = chern_forms(&k, 1)?.c1;
            closed = closed.max(forms::exterior_d(c1.form())?.max_norm());
            tried += 1;
        }
    }

    let b = SasakianBundle::new(grid, &[1])?;
    let t = b.torus();
    let eps = 0.3;
    let u: Vec<f64> = t.from_fn(|x, _| c(eps * (2.0 * PI * x).sin())).iter().map(|v| v.re).collect();
    // u depends on x only; with z = ℓ(x + τy), ∂_z∂_z̄ = |τ|²/(4ℓ² Im τ²) ∂_x²
    let factor = t.tau.norm_sqr() / (4.0 * t.ell * t.ell * t.tau.im * t.tau.im);
    let ddbar_u = t.from_fn(|x, _| c(-factor * 4.0 * PI * PI * eps * (2.0 * PI * x).sin()));
    let d = HolomorphicStructure::reference(&b);
    let h = b.reference_metric();
    let k0 = curvature(&d, &h)?;
    let k1 = curvature(&d, &h.conformal(&u))?;
    let shift_err = k1
        .i_lambda()
        .entry(0, 0)
        .iter()
        .zip(k0.i_lambda().entry(0, 0))
        .zip(&ddbar_u)
        .map(|((a, b0), o)| (a - b0 + o).norm())
        .fold(0.0, f64::max);

    Ok(ChernWeilReport {
        line_degree_error: line_err,
        metric_dependence: dependence,
        metrics_tried: tried,
        c1_closedness: closed,
        conformal_shift_error: shift_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chern_weil_suite_on_the_square_torus() {
        let g = make_grid(BaseManifold::flat_torus(Complex64::new(0.0, 1.0), 1), GridSpec::torus(16, 16, 8)).unwrap();
        let r = chern_weil_suite(&g, 2, 3).unwrap();
        assert!(r.line_degree_error < 1e-8, "{r:?}");
        assert!(r.metric_dependence < 1e-8, "{r:?}");
        assert!(r.c1_closedness < 1e-8, "{r:?}");
        assert!(r.conformal_shift_error < 1e-8, "{r:?}");
    }

    fn grid(n: usize) -> GridHandle {
        make_grid(BaseManifold::flat_torus(Complex64::new(0.0, 1.0), 1), GridSpec::torus(n, n, 8)).unwrap()
    }

    #[test]
    fn line_bundle_degree_and_lambda() {
        let g = grid(16);
        for k in [-1i64, 0, 1, 2] {
            let b = SasakianBundle::new(&g, &[k]).unwrap();
            let d = HolomorphicStructure::reference(&b);
            let h = b.reference_metric();
            let deg = degree(&d, &h).unwrap();
            assert!((deg - 2.0 * PI * k as f64).abs() < 1e-9, "{k}: {deg}");
            let lam = einstein_constant(&d, &h).unwrap();
            assert!((lam - k as f64).abs() < 1e-9);
            assert!(he_residual(&d, &h).unwrap().sup < 1e-9);
        }
    }

    #[test]
    fn verdicts() {
        let s = |degrees: Vec<i64>, alpha| ShapeDescriptor {
            rank: degrees.len(),
            degrees,
            alpha,
        };
        assert_eq!(stability_oracle(&s(vec![3], AlphaSpec::Zero)).unwrap(), StabilityVerdict::Stable);
        assert_eq!(stability_oracle(&s(vec![0, 1], AlphaSpec::Zero)).unwrap(), StabilityVerdict::Unstable);
        assert_eq!(stability_oracle(&s(vec![1, 1], AlphaSpec::Zero)).unwrap(), StabilityVerdict::Polystable);
        let ext = AlphaSpec::ExtensionClass(ExtensionClass { epsilon: 0.5 });
        assert_eq!(stability_oracle(&s(vec![0, 1], ext)).unwrap(), StabilityVerdict::Stable);
        assert!(stability_oracle(&s(vec![0, 1, 2], AlphaSpec::ExtensionClass(ExtensionClass { epsilon: 1.0 }))).is_err());
    }

    #[test]
    fn descriptor_json_round_trip() {
        let j = r#"{"rank":2,"degrees":[0,1],"alpha":{"kind":"extension_class","data":{"epsilon":0.3}}}"#;
        let d: ShapeDescriptor = serde_json::from_str(j).unwrap();
        assert_eq!(d.alpha, AlphaSpec::ExtensionClass(ExtensionClass { epsilon: 0.3 }));
        let z: ShapeDescriptor = serde_json::from_str(r#"{"rank":1,"degrees":[2],"alpha":{"kind":"zero"}}"#).unwrap();
        assert_eq!(z.alpha, AlphaSpec::Zero);
    }
}
