//! Differential forms on the torus-base structure in the coframe
//! `{dz, dz̄, ω}`, dual to `{∂_z^h, ∂_z̄^h, ξ}` (horizontal lifts and Reeb).
//!
//! A basis element is a bitmask over `dz = 1, dz̄ = 2, ω = 4`, wedged in
//! increasing bit order. The only nontrivial structure equation is
//! `dω = i dz∧dz̄`. The pointwise metric makes the coframe orthonormal,
//! which is the metric induced by the transversal Kähler form `dω|_F`:
//! then `Λ(dω|_F) = 1` and `Λ` is the pointwise adjoint of `L = dω|_F ∧ ·`.
//!
//! Coefficients may carry a twist, in which case the form is valued in the
//! corresponding line bundle and `d` is the covariant exterior derivative
//! of its reference connection.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Direction, Field, GridHandle};

pub const DZ: usize = 1;
pub const DZBAR: usize = 2;
pub const OMEGA: usize = 4;
pub const TOP: usize = 7;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Real dimension of the total space.
pub const DIM: usize = 3;

fn popcount(m: usize) -> usize {
    m.count_ones() as usize
}

/// Sign of `e^a ∧ e^b` relative to `e^{a|b}` (0 if they overlap).
pub fn wedge_sign(a: usize, b: usize) -> i32 {
    if a & b != 0 {
        return 0;
    }
    let mut swaps = 0;
    for i in 0..3 {
        if b & (1 << i) != 0 {
            // elements of a with larger index must move past this one
            swaps += popcount(a >> (i + 1));
        }
    }
    if swaps % 2 == 0 {
        1
    } else {
        -1
    }
}

/// `(p, q)` type of a horizontal basis element.
pub fn bidegree(mask: usize) -> (usize, usize) {
    ((mask & DZ != 0) as usize, (mask & DZBAR != 0) as usize)
}

/// Form of fixed degree with components on all eight basis elements (the
/// ones of the wrong degree stay zero).
#[derive(Clone, Debug)]
pub struct GeneralForm {
    pub degree: usize,
    pub comps: Vec<Field>,
}

impl GeneralForm {
    pub fn zero(grid: &GridHandle, degree: usize, twist: i64) -> Result<Self> {
        if degree > DIM {
            return Err(Error::DegreeOverflow(degree));
        }
        grid.require_torus("differential forms")?;
        Ok(Self {
            degree,
            comps: (0..8).map(|_| Field::zeros(grid, twist)).collect(),
        })
    }

    pub fn grid(&self) -> &GridHandle {
        &self.comps[0].grid
    }

    pub fn twist(&self) -> i64 {
        self.comps[0].twist
    }

    /// Sets the coefficient of a basis element.
    pub fn with(mut self, mask: usize, f: Field) -> Result<Self> {
        if popcount(mask) != self.degree {
            return Err(Error::DegreeMismatch {
                expected: self.degree,
                got: popcount(mask),
            });
        }
        self.comps[mask] = f;
        Ok(self)
    }

    pub fn component(&self, mask: usize) -> &Field {
        &self.comps[mask]
    }

    pub fn function(f: Field) -> Result<Self> {
        let g = f.grid.clone();
        Self::zero(&g, 0, f.twist)?.with(0, f)
    }

    pub fn one(grid: &GridHandle) -> Result<Self> {
        Self::function(Field::constant(grid, Complex64::new(1.0, 0.0)))
    }

    pub fn contact(grid: &GridHandle) -> Result<Self> {
        Self::zero(grid, 1, 0)?.with(OMEGA, Field::constant(grid, Complex64::new(1.0, 0.0)))
    }

    pub fn dz(grid: &GridHandle) -> Result<Self> {
        Self::zero(grid, 1, 0)?.with(DZ, Field::constant(grid, Complex64::new(1.0, 0.0)))
    }

    pub fn dzbar(grid: &GridHandle) -> Result<Self> {
        Self::zero(grid, 1, 0)?.with(DZBAR, Field::constant(grid, Complex64::new(1.0, 0.0)))
    }

    /// `dω = i dz∧dz̄`.
    pub fn domega(grid: &GridHandle) -> Result<Self> {
        Self::zero(grid, 2, 0)?.with(DZ | DZBAR, Field::constant(grid, I))
    }

    pub fn masks(&self) -> impl Iterator<Item = usize> + '_ {
        (0..8).filter(move |&m| popcount(m) == self.degree)
    }

    /// Components containing ω (the `ω∧⋀^{d−1}F` block).
    pub fn reeb_block(&self) -> Self {
        let mut out = self.clone();
        for m in 0..8 {
            if m & OMEGA == 0 {
                out.comps[m] = Field::zeros(self.grid(), self.twist());
            }
        }
        out
    }

    /// Components free of ω (the horizontal block).
    pub fn horizontal_block(&self) -> Self {
        let mut out = self.clone();
        for m in 0..8 {
            if m & OMEGA != 0 {
                out.comps[m] = Field::zeros(self.grid(), self.twist());
            }
        }
        out
    }

    pub fn max_norm(&self) -> f64 {
        self.comps.iter().map(|c| c.max_norm()).fold(0.0, f64::max)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.compatible(other)?;
        Ok(Self {
            degree: self.degree,
            comps: self.comps.iter().zip(&other.comps).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.compatible(other)?;
        Ok(Self {
            degree: self.degree,
            comps: self.comps.iter().zip(&other.comps).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self {
            degree: self.degree,
            comps: self.comps.iter().map(|f| f.scale(c)).collect(),
        }
    }

    /// Multiplies every component by a function.
    pub fn mul_function(&self, f: &Field) -> Self {
        Self {
            degree: self.degree,
            comps: self.comps.iter().map(|c| c.mul(f)).collect(),
        }
    }

    fn compatible(&self, other: &Self) -> Result<()> {
        if self.degree != other.degree {
            return Err(Error::DegreeMismatch {
                expected: self.degree,
                got: other.degree,
            });
        }
        self.comps[0].same_grid(&other.comps[0])
    }

    /// Largest `|i_ξ α|` and `|i_ξ dα|`: zero for transversal forms.
    pub fn transversality_residual(&self) -> Result<f64> {
        let a = if self.degree == 0 { 0.0 } else { contract_reeb(self)?.max_norm() };
        let b = contract_reeb(&exterior_d(self)?)?.max_norm();
        Ok(a.max(b))
    }
}

/// `i_ξ α`; `i_ξ(e^J∧ω) = (−1)^{|J|} e^J`.
pub fn contract_reeb(alpha: &GeneralForm) -> Result<GeneralForm> {
    if alpha.degree == 0 {
        return Err(Error::DegreeMismatch { expected: 1, got: 0 });
    }
    let mut out = GeneralForm::zero(alpha.grid(), alpha.degree - 1, alpha.twist())?;
    for m in alpha.masks() {
        if m & OMEGA != 0 {
            let j = m & !OMEGA;
            let sign = if popcount(j) % 2 == 0 { 1.0 } else { -1.0 };
            out.comps[j] = &alpha.comps[m] * sign;
        }
    }
    Ok(out)
}

/// Horizontal covariant derivatives `(∂_z^h f, ∂_z̄^h f)` and `ξf`.
pub fn frame_derivatives(f: &Field) -> Result<[Field; 3]> {
    f.check_finite("exterior derivative input")?;
    let g = f.grid.clone();
    let t = g.require_torus("frame derivatives")?;
    let k_l = g.base.k_l as i64;
    // horizontal lifts act on fiber mode n like the Landau-frame operators
    // of twist (twist + n·k_l)
    let dz_vals = f.per_mode(|s, n| t.d_z(s, f.twist + n * k_l));
    let dzb_vals = f.per_mode(|s, n| t.d_zbar(s, f.twist + n * k_l));
    let mk = |values| Field {
        grid: g.clone(),
        values,
        twist: f.twist,
        xi_invariant: f.xi_invariant,
    };
    Ok([mk(dz_vals), mk(dzb_vals), f.differentiate(Direction::Theta)?])
}

/// Exterior derivative (covariant for twisted coefficients).
pub fn exterior_d(alpha: &GeneralForm) -> Result<GeneralForm> {
    if alpha.degree >= DIM {
        return GeneralForm::zero(alpha.grid(), DIM, alpha.twist()).and_then(|z| {
            if alpha.degree == DIM {
                Err(Error::DegreeOverflow(DIM + 1))
            } else {
                Ok(z)
            }
        });
    }
    let mut out = GeneralForm::zero(alpha.grid(), alpha.degree + 1, alpha.twist())?;
    for m in alpha.masks() {
        let a = &alpha.comps[m];
        if a.max_norm() == 0.0 {
            continue;
        }
        let d = frame_derivatives(a)?;
        for (k, bit) in [DZ, DZBAR, OMEGA].into_iter().enumerate() {
            let s = wedge_sign(bit, m);
            if s != 0 {
                out.comps[bit | m] = &out.comps[bit | m] + &(&d[k] * s as f64);
            }
        }
        // a·d(e^m): only the ω factor has a nonzero differential
        if m == OMEGA {
            out.comps[DZ | DZBAR] = &out.comps[DZ | DZBAR] + &a.scale(I);
        }
    }
    Ok(out)
}

/// `L_ξ α = d i_ξ α + i_ξ dα`.
pub fn lie_reeb(alpha: &GeneralForm) -> Result<GeneralForm> {
    let second = contract_reeb(&exterior_d(alpha)?)?;
    if alpha.degree == 0 {
        return Ok(second);
    }
    exterior_d(&contract_reeb(alpha)?)?.add(&second)
}

pub fn wedge(a: &GeneralForm, b: &GeneralForm) -> Result<GeneralForm> {
    let degree = a.degree + b.degree;
    if degree > DIM {
        return Err(Error::DegreeOverflow(degree));
    }
    a.comps[0].same_grid(&b.comps[0])?;
    let mut out = GeneralForm::zero(a.grid(), degree, a.twist() + b.twist())?;
    for ma in a.masks() {
        for mb in b.masks() {
            let s = wedge_sign(ma, mb);
            if s == 0 {
                continue;
            }
            let p = a.comps[ma].mul(&b.comps[mb]);
            out.comps[ma | mb] = &out.comps[ma | mb] + &(&p * s as f64);
        }
    }
    Ok(out)
}

/// Form without an ω block. Transversal forms are additionally
/// fiber-invariant; `check` verifies both conditions numerically.
#[derive(Clone, Debug)]
pub struct TransversalForm {
    form: GeneralForm,
}

impl TransversalForm {
    /// Wraps a form after dropping nothing: fails if the ω block is nonzero
    /// beyond `tol`.
    pub fn new(form: GeneralForm, tol: f64) -> Result<Self> {
        let r = form.reeb_block().max_norm();
        if r > tol {
            return Err(Error::ShapeMismatch(format!(
                "form has a Reeb component of size {r:e}, not horizontal"
            )));
        }
        Ok(Self {
            form: form.horizontal_block(),
        })
    }

    /// Horizontal restriction of a general form, e.g. `dω|_F`.
    pub fn restrict(form: &GeneralForm) -> Self {
        Self {
            form: form.horizontal_block(),
        }
    }

    pub fn degree(&self) -> usize {
        self.form.degree
    }

    pub fn form(&self) -> &GeneralForm {
        &self.form
    }

    pub fn into_form(self) -> GeneralForm {
        self.form
    }

    /// Coefficient of type `(p, q)`; `None` if no such basis element.
    pub fn component(&self, p: usize, q: usize) -> Option<&Field> {
        if p + q != self.degree() || p > 1 || q > 1 {
            return None;
        }
        Some(&self.form.comps[p * DZ + q * DZBAR])
    }

    /// Transversality and ξ-invariance residual (`i_ξ`, `i_ξ d`, `L_ξ`).
    pub fn check(&self) -> Result<f64> {
        let a = self.form.transversality_residual()?;
        let l = lie_reeb(&self.form)?.max_norm();
        Ok(a.max(l))
    }
}

/// Component of type `(i, d−i)`.
pub fn type_project(alpha: &TransversalForm, i: usize) -> Result<TransversalForm> {
    let d = alpha.degree();
    if i > d {
        return Err(Error::TypeOutOfRange { index: i, degree: d });
    }
    let mut out = alpha.clone();
    for m in 0..8 {
        if popcount(m) == d && bidegree(m) != (i, d - i) {
            out.form.comps[m] = Field::zeros(alpha.form.grid(), alpha.form.twist());
        }
    }
    Ok(out)
}

/// `Λ` on horizontal 2-forms (n = 1): `Λ(f·dω|_F) = f`.
pub fn lambda_contract(beta: &TransversalForm) -> Result<Field> {
    if beta.degree() != 2 {
        return Err(Error::DegreeMismatch {
            expected: 2,
            got: beta.degree(),
        });
    }
    // β = b dz∧dz̄ = (−i b)·(i dz∧dz̄)
    Ok(beta.form.comps[DZ | DZBAR].scale(-I))
}

/// `L f = f·dω|_F`.
pub fn lefschetz(f: &Field) -> Result<TransversalForm> {
    let g = f.grid.clone();
    let form = GeneralForm::zero(&g, 2, f.twist)?.with(DZ | DZBAR, f.scale(I))?;
    Ok(TransversalForm { form })
}

/// Pointwise hermitian product `Σ_I a_I conj(b_I)`.
pub fn pointwise_inner(a: &GeneralForm, b: &GeneralForm) -> Result<Field> {
    a.compatible(b)?;
    let mut acc = Field::zeros(a.grid(), 0);
    for m in a.masks() {
        acc = &acc + &a.comps[m].mul(&b.comps[m].conj());
    }
    Ok(acc)
}

/// L² pairing against the Riemannian volume.
pub fn l2_inner(a: &GeneralForm, b: &GeneralForm) -> Result<Complex64> {
    Ok(pointwise_inner(a, b)?.integrate_density())
}

/// `∫_X α` for a top-degree form. With `dz∧dz̄∧ω = −2i·dvol_g` this is
/// `−2i ∫ a dvol_g`.
pub fn integrate(alpha: &GeneralForm) -> Result<Complex64> {
    if alpha.degree != DIM {
        return Err(Error::DegreeMismatch {
            expected: DIM,
            got: alpha.degree,
        });
    }
    Ok(alpha.comps[TOP].integrate_density() * Complex64::new(0.0, -2.0))
}

/// `vol(X) = ∫ (dω)^n ∧ ω`.
pub fn volume(grid: &GridHandle) -> Result<f64> {
    let v = wedge(&GeneralForm::domega(grid)?, &GeneralForm::contact(grid)?)?;
    Ok(integrate(&v)?.re)
}

/// Smooth random transversal form of the given degree: every horizontal
/// coefficient is a short random Fourier series on the base, so the form
/// is fiber-invariant by construction.
pub fn random_transversal(grid: &GridHandle, degree: usize, seed: u64) -> Result<TransversalForm> {
    if degree > 2 {
        return Err(Error::DegreeOverflow(degree));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut form = GeneralForm::zero(grid, degree, 0)?;
    for m in [0, DZ, DZBAR, DZ | DZBAR] {
        if popcount(m) != degree {
            continue;
        }
        let terms: Vec<(f64, f64, Complex64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(-2..=2) as f64,
                    rng.gen_range(-2..=2) as f64,
                    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                )
            })
            .collect();
        let tp = 2.0 * std::f64::consts::PI;
        form.comps[m] = Field::from_fn(grid, 0, |p| {
            terms
                .iter()
                .map(|&(a, b, c)| c * Complex64::from_polar(1.0, tp * (a * p.x + b * p.y)))
                .sum()
        });
    }
    Ok(TransversalForm { form })
}

/// Worst residuals of the transversal-calculus identities over a batch of
/// random forms.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TransversalSuiteReport {
    pub forms: usize,
    /// `|i_ξ α|`
    pub contraction: f64,
    /// `|L_ξ α|`
    pub lie_reeb: f64,
    /// `|i_ξ dα| + |L_ξ dα|`
    pub d_transversality: f64,
    /// `|Σ_i α_i − α|`
    pub completeness: f64,
    /// `|(α_i)_i − α_i|`
    pub idempotence: f64,
    /// `|(α_i)_j|`, `i ≠ j`
    pub orthogonality: f64,
    /// `|L_ξ α_i − (L_ξ α)_i|`
    pub lie_type_commutator: f64,
    /// `(2,0)` and `(0,2)` parts of `dω|_F`
    pub domega_off_type: f64,
    /// `|Λ(dω|_F) − 1|`
    pub domega_lambda: f64,
    /// `|⟨Lf, γ⟩ − ⟨f, Λγ⟩| / (|f||γ|)`
    pub adjointness: f64,
}

/// Runs the identity checks on `count` seeded random forms of degrees
/// 0, 1, 2 in turn.
pub fn transversal_suite(grid: &GridHandle, count: usize, seed: u64) -> Result<TransversalSuiteReport> {
    let mut r = TransversalSuiteReport {
        forms: count,
        ..Default::default()
    };
    let dw = TransversalForm::restrict(&GeneralForm::domega(grid)?);
    r.domega_off_type = type_project(&dw, 0)?
        .form
        .max_norm()
        .max(type_project(&dw, 2)?.form.max_norm())
        .max(type_project(&dw, 1)?.form.sub(&dw.form)?.max_norm());
    r.domega_lambda = lambda_contract(&dw)?.map(|v| v - 1.0).max_norm();
    for k in 0..count {
        let s = seed.wrapping_mul(0x9E37_79B9).wrapping_add(k as u64);
        let d = k % 3;
        let a = random_transversal(grid, d, s)?;
        if d > 0 {
            r.contraction = r.contraction.max(contract_reeb(&a.form)?.max_norm());
        }
        let lie = lie_reeb(&a.form)?;
        r.lie_reeb = r.lie_reeb.max(lie.max_norm());
        if d < 2 {
            let da = exterior_d(&a.form)?;
            let res = contract_reeb(&da)?.max_norm() + lie_reeb(&da)?.max_norm();
            r.d_transversality = r.d_transversality.max(res);
        }
        let parts: Vec<TransversalForm> = (0..=d).map(|i| type_project(&a, i)).collect::<Result<_>>()?;
        let mut sum = GeneralForm::zero(grid, d, 0)?;
        for (i, p) in parts.iter().enumerate() {
            sum = sum.add(&p.form)?;
            r.idempotence = r.idempotence.max(type_project(p, i)?.form.sub(&p.form)?.max_norm());
            for j in (0..=d).filter(|&j| j != i) {
                r.orthogonality = r.orthogonality.max(type_project(p, j)?.form.max_norm());
            }
            let lie_i = lie_reeb(&p.form)?;
            let lie_then = type_project(&TransversalForm::restrict(&lie), i)?;
            r.lie_type_commutator = r
                .lie_type_commutator
                .max(lie_i.horizontal_block().sub(&lie_then.form)?.max_norm());
        }
        r.completeness = r.completeness.max(sum.sub(&a.form)?.max_norm());
        if d == 2 {
            let f = random_transversal(grid, 0, s ^ 0x5555)?;
            let f0 = f.form.comps[0].clone();
            let lhs = l2_inner(lefschetz(&f0)?.form(), &a.form)?;
            let rhs = l2_inner(f.form(), &GeneralForm::function(lambda_contract(&a)?)?)?;
            let scale = l2_inner(f.form(), f.form())?.re.sqrt() * l2_inner(&a.form, &a.form)?.re.sqrt();
            r.adjointness = r.adjointness.max((lhs - rhs).norm() / scale.max(1e-300));
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, BaseManifold, GridSpec};
    use std::f64::consts::PI;

    fn grid(k_l: u32) -> GridHandle {
        make_grid(BaseManifold::flat_torus(Complex64::new(0.0, 1.0), k_l), GridSpec::torus(16, 16, 8)).unwrap()
    }

    #[test]
    fn wedge_signs() {
        assert_eq!(wedge_sign(DZ, DZBAR), 1);
        assert_eq!(wedge_sign(DZBAR, DZ), -1);
        assert_eq!(wedge_sign(OMEGA, DZ | DZBAR), 1);
        assert_eq!(wedge_sign(DZBAR, DZ | OMEGA), -1);
        assert_eq!(wedge_sign(DZ, DZ), 0);
    }

    #[test]
    fn volume_closed_form() {
        let v1 = volume(&grid(1)).unwrap();
        assert!((v1 - 4.0 * PI * PI).abs() < 1e-10);
        let v2 = volume(&grid(2)).unwrap();
        assert!((v2 - 2.0 * v1).abs() < 1e-9);
    }

    #[test]
    fn d_of_contact_is_domega() {
        let g = grid(1);
        let d = exterior_d(&GeneralForm::contact(&g).unwrap()).unwrap();
        let diff = d.sub(&GeneralForm::domega(&g).unwrap()).unwrap();
        assert!(diff.max_norm() < 1e-12);
        let dd = exterior_d(&d).unwrap();
        assert!(dd.max_norm() < 1e-12);
    }

    #[test]
    fn contraction_basics() {
        let g = grid(1);
        let om = GeneralForm::contact(&g).unwrap();
        let c = contract_reeb(&om).unwrap();
        assert!((c.comps[0].values[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        assert!(contract_reeb(&GeneralForm::domega(&g).unwrap()).unwrap().max_norm() == 0.0);
        assert!(contract_reeb(&GeneralForm::one(&g).unwrap()).is_err());
        assert!(wedge(&om, &om).unwrap().max_norm() == 0.0);
    }

    #[test]
    fn suite_on_a_few_forms() {
        let r = transversal_suite(&grid(1), 9, 3).unwrap();
        assert!(r.lie_reeb < 1e-8 && r.d_transversality < 1e-8, "{r:?}");
        assert!(r.completeness < 1e-10 && r.adjointness < 1e-8, "{r:?}");
        assert!(r.domega_lambda < 1e-14 && r.domega_off_type == 0.0);
    }

    #[test]
    fn fiber_dependence_is_detected() {
        let g = grid(1);
        let f = Field::from_fn(&g, 0, |p| Complex64::new(p.theta.cos(), 0.0));
        let a = GeneralForm::zero(&g, 1, 0).unwrap().with(DZBAR, f).unwrap();
        assert!(lie_reeb(&a).unwrap().max_norm() > 0.5);
        assert!(TransversalForm::restrict(&a).check().unwrap() > 0.5);
    }
}
