//! Boothby–Wang Sasakian structures and numerical checks of their
//! defining identities.
//!
//! Coordinates are `(x, y, θ)` in every chart, with `ξ = ∂_θ` and
//!
//! * torus base: `g_M = ℓ²|dx + τ dy|²`, `ω = dθ + 2A x dy`,
//! * sphere chart: `g_M = k(du² + dv²)/(1+r²)²`, `ω = dθ + k(u dv − v du)/(1+r²)`,
//!
//! so that `dω = 2ω_M` as an honest 2-form, and `g = π*g_M + ω⊗ω`.
//!
//! The metric and its Christoffel symbols are evaluated in closed form
//! (derivatives by dual numbers). Everything that the checks differentiate
//! a second time (ω, g, Φ, Γ) is differentiated numerically with centered
//! stencils on a grid padded by closed-form ghost layers, so the residuals
//! measure the discretization, not an algebraic shortcut.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::Dual3;
use crate::error::{Error, Result};
use crate::grid::{make_grid, BaseKind, BaseManifold, Direction, Field, GridHandle, GridSpec};
use crate::stencil::central_half_stencil;
use crate::Complex64;

type Mat = [[f64; 3]; 3];
type Christoffel = [[[f64; 3]; 3]; 3];

#[derive(Clone, Copy, Debug)]
enum Model {
    Torus { ell: f64, tau: Complex64, area: f64 },
    Sphere { k: f64 },
}

impl Model {
    /// Closed-form metric and contact form at base coordinates `(x, y)`.
    fn fields(&self, x: Dual3, y: Dual3, eps: f64) -> ([[Dual3; 3]; 3], [Dual3; 3]) {
        let zero = Dual3::constant(0.0);
        let one = Dual3::constant(1.0);
        let (gm, om): ([[Dual3; 2]; 2], [Dual3; 3]) = match *self {
            Model::Torus { ell, tau, area } => {
                let l2 = ell * ell;
                let gxx = Dual3::constant(l2);
                let gxy = Dual3::constant(l2 * tau.re);
                let gyy = Dual3::constant(l2 * tau.norm_sqr());
                ([[gxx, gxy], [gxy, gyy]], [zero, x * (2.0 * area), one])
            }
            Model::Sphere { k } => {
                let d = one + x.sq() + y.sq();
                let c = Dual3::constant(k) / d.sq();
                let a = Dual3::constant(k) / d;
                ([[c, zero], [zero, c]], [-(y * a), x * a, one])
            }
        };
        let mut g = [[zero; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] = om[i] * om[j];
                if i < 2 && j < 2 {
                    g[i][j] = g[i][j] + gm[i][j];
                }
            }
        }
        if eps != 0.0 {
            let tp = 2.0 * PI;
            let (s, c) = match self {
                Model::Torus { .. } => ((x * tp).sin() * (y * tp).cos(), (x * tp + y * tp).cos()),
                Model::Sphere { .. } => (x.sin() * y.cos(), (x + y).cos()),
            };
            let dg = [
                [(s * 0.3 + 0.5) * eps, c * (0.2 * eps), zero],
                [c * (0.2 * eps), (s * -0.3 + 0.5) * eps, c * (0.1 * eps)],
                [zero, c * (0.1 * eps), s * (0.2 * eps)],
            ];
            for i in 0..3 {
                for j in 0..3 {
                    g[i][j] = g[i][j] + dg[i][j];
                }
            }
        }
        (g, om)
    }
}

/// Discretized Boothby–Wang structure `(g, ξ, ω, Φ)` with its Levi-Civita
/// coefficients, stored per (chart, ix, iy) on a padded base grid. All
/// fields are invariant along the fiber by construction.
#[derive(Clone, Debug)]
pub struct SasakianStructure {
    pub base: BaseManifold,
    pub grid: GridHandle,
    model: Model,
    perturbation: f64,
    phi_sign: f64,
    pad: usize,
    metric: Vec<Mat>,
    contact: Vec<[f64; 3]>,
    christoffel: Vec<Christoffel>,
    phi: Vec<Mat>,
}

/// Builds the structure on the unit circle bundle of the positive line
/// bundle over `base`.
pub fn boothby_wang(base: BaseManifold, spec: GridSpec) -> Result<SasakianStructure> {
    base.check_integral()?;
    let grid = make_grid(base.clone(), spec)?;
    SasakianStructure::build(grid, 0.0, 1.0)
}

impl SasakianStructure {
    fn build(grid: GridHandle, perturbation: f64, phi_sign: f64) -> Result<Self> {
        let base = grid.base.clone();
        let model = match base.kind {
            BaseKind::FlatTorus { tau, area } => Model::Torus {
                ell: (area / tau.im).sqrt(),
                tau,
                area,
            },
            BaseKind::RoundSphere { scale } => Model::Sphere { k: 4.0 * scale * scale },
        };
        let pad = grid.spec.fd_order / 2;
        let (px, py) = (grid.nx() + 2 * pad, grid.ny() + 2 * pad);
        let n = grid.n_charts * px * py;
        let mut s = Self {
            base,
            grid,
            model,
            perturbation,
            phi_sign,
            pad,
            metric: Vec::with_capacity(n),
            contact: Vec::with_capacity(n),
            christoffel: Vec::with_capacity(n),
            phi: Vec::with_capacity(n),
        };
        let pts: Vec<(f64, f64)> = (0..s.grid.n_charts)
            .flat_map(|_| (0..px).flat_map(move |i| (0..py).map(move |j| (i, j))))
            .map(|(i, j)| (s.coord_x(i as i64 - pad as i64), s.coord_y(j as i64 - pad as i64)))
            .collect();
        let evaluated: Vec<_> = pts.par_iter().map(|&(x, y)| s.pointwise(x, y)).collect();
        for (idx, (g, om, gam, phi)) in evaluated.into_iter().enumerate() {
            let m = Matrix3::from_fn(|i, j| g[i][j]);
            let min_eig = m.symmetric_eigenvalues().min();
            if !(min_eig > 0.0) {
                return Err(Error::NotPositive { index: idx, min_eig });
            }
            s.metric.push(g);
            s.contact.push(om);
            s.christoffel.push(gam);
            s.phi.push(phi);
        }
        Ok(s)
    }

    /// Same structure with the metric replaced by `g + ε δg` for a fixed
    /// smooth symmetric `δg` (ξ and ω are kept). Used to show that the
    /// checks detect violations.
    pub fn with_metric_perturbation(&self, eps: f64) -> Result<Self> {
        Self::build(self.grid.clone(), eps, self.phi_sign)
    }

    /// Same structure with `Φ` replaced by `−Φ`.
    pub fn with_phi_sign_flipped(&self) -> Result<Self> {
        Self::build(self.grid.clone(), self.perturbation, -self.phi_sign)
    }

    fn coord_x(&self, i: i64) -> f64 {
        match self.model {
            Model::Torus { .. } => i as f64 / self.grid.nx() as f64,
            Model::Sphere { .. } => -self.grid.chart_half_width + (i as f64 + 0.5) * self.grid.hx(),
        }
    }

    fn coord_y(&self, j: i64) -> f64 {
        match self.model {
            Model::Torus { .. } => j as f64 / self.grid.ny() as f64,
            Model::Sphere { .. } => -self.grid.chart_half_width + (j as f64 + 0.5) * self.grid.hy(),
        }
    }

    fn pointwise(&self, x: f64, y: f64) -> (Mat, [f64; 3], Christoffel, Mat) {
        let (gd, od) = self
            .model
            .fields(Dual3::var(x, 0), Dual3::var(y, 1), self.perturbation);
        let g: Mat = gd.map(|r| r.map(|v| v.v));
        let om = od.map(|v| v.v);
        let ginv = Matrix3::from_fn(|i, j| g[i][j])
            .try_inverse()
            .unwrap_or_else(|| Matrix3::from_element(f64::NAN));
        // Γ^i_{jk} = ½ g^{il}(∂_j g_lk + ∂_k g_lj − ∂_l g_jk)
        let mut gam = [[[0.0; 3]; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let mut acc = 0.0;
                    for l in 0..3 {
                        acc += ginv[(i, l)] * (gd[l][k].d[j] + gd[l][j].d[k] - gd[j][k].d[l]);
                    }
                    gam[i][j][k] = 0.5 * acc;
                }
            }
        }
        // Φ^i_j = −∇_j ξ^i with ξ = ∂_θ constant, so only Γ^i_{jθ} survives.
        let mut phi = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                phi[i][j] = -self.phi_sign * gam[i][j][2];
            }
        }
        (g, om, gam, phi)
    }

    #[inline]
    fn pidx(&self, chart: usize, i: i64, j: i64) -> usize {
        let p = self.pad as i64;
        let px = (self.grid.nx() + 2 * self.pad) as i64;
        let py = (self.grid.ny() + 2 * self.pad) as i64;
        ((chart as i64 * px + i + p) * py + j + p) as usize
    }

    /// Metric coefficients `g_ij` at a base grid point.
    pub fn metric_at(&self, chart: usize, ix: usize, iy: usize) -> Mat {
        self.metric[self.pidx(chart, ix as i64, iy as i64)]
    }

    /// Contact form components `ω_i`.
    pub fn contact_at(&self, chart: usize, ix: usize, iy: usize) -> [f64; 3] {
        self.contact[self.pidx(chart, ix as i64, iy as i64)]
    }

    /// Christoffel symbols `Γ^i_{jk}` as `[i][j][k]`.
    pub fn christoffel_at(&self, chart: usize, ix: usize, iy: usize) -> Christoffel {
        self.christoffel[self.pidx(chart, ix as i64, iy as i64)]
    }

    /// `Φ^i_j` as `[i][j]`.
    pub fn phi_at(&self, chart: usize, ix: usize, iy: usize) -> Mat {
        self.phi[self.pidx(chart, ix as i64, iy as i64)]
    }

    /// Coordinate components of the Reeb field.
    pub fn reeb(&self) -> [f64; 3] {
        [0.0, 0.0, 1.0]
    }

    /// Closed-form Riemannian volume `∫_X ω∧ω_M`-normalized, i.e. `2π·area`.
    pub fn volume(&self) -> f64 {
        2.0 * PI * self.base.area()
    }

    /// Centered first derivative of padded data along x (`dir = 0`) or y.
    fn diff<T: Copy>(&self, data: &[T], chart: usize, ix: usize, iy: usize, dir: usize, f: impl Fn(&T) -> f64) -> f64 {
        let half = central_half_stencil(self.grid.spec.fd_order);
        let h = if dir == 0 { self.grid.hx() } else { self.grid.hy() };
        let (i, j) = (ix as i64, iy as i64);
        let mut acc = 0.0;
        for (k, &c) in half.iter().enumerate() {
            let o = (k + 1) as i64;
            let (p, m) = if dir == 0 {
                (self.pidx(chart, i + o, j), self.pidx(chart, i - o, j))
            } else {
                (self.pidx(chart, i, j + o), self.pidx(chart, i, j - o))
            };
            acc += c * (f(&data[p]) - f(&data[m]));
        }
        acc / h
    }

    /// Numerical `∂_k` of a padded field; the θ-derivative of these
    /// fiber-invariant fields is identically zero.
    fn grad<T: Copy>(&self, data: &[T], chart: usize, ix: usize, iy: usize, f: impl Fn(&T) -> f64) -> [f64; 3] {
        [
            self.diff(data, chart, ix, iy, 0, &f),
            self.diff(data, chart, ix, iy, 1, &f),
            0.0,
        ]
    }
}

/// Applies `Φ` to a vector field given by its coordinate components.
pub fn phi_apply(s: &SasakianStructure, v: &[Field; 3]) -> Result<[Field; 3]> {
    for c in v {
        if c.grid.spec != s.grid.spec || c.grid.base != s.grid.base {
            return Err(Error::GridMismatch("vector field is not on the structure's grid".into()));
        }
    }
    let g = &s.grid;
    let nt = g.ntheta();
    let mut out = [
        Field::zeros(&v[0].grid, 0),
        Field::zeros(&v[0].grid, 0),
        Field::zeros(&v[0].grid, 0),
    ];
    for c in 0..g.n_charts {
        for ix in 0..g.nx() {
            for iy in 0..g.ny() {
                let phi = s.phi_at(c, ix, iy);
                for it in 0..nt {
                    let k = g.index(c, ix, iy, it);
                    for i in 0..3 {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for j in 0..3 {
                            acc += phi[i][j] * v[j].values[k];
                        }
                        out[i].values[k] = acc;
                    }
                }
            }
        }
    }
    for (o, vi) in out.iter_mut().zip(v) {
        o.xi_invariant = vi.xi_invariant;
    }
    Ok(out)
}

/// Maximum residuals of the Sasakian identities.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StructureReport {
    pub base: String,
    pub resolution: [usize; 3],
    pub fd_order: usize,
    pub sample_count: usize,
    /// `|(L_ξ g)(v,w)|`, from `∇_i ξ_j + ∇_j ξ_i`.
    pub killing_residual: f64,
    /// `|(∇_v Φ)w − g(v,w)ξ + g(ξ,w)v|`.
    pub phi_identity_residual: f64,
    /// `|R(v,ξ)w − g(ξ,w)v + g(v,w)ξ|`.
    pub curvature_identity_residual: f64,
    /// Minimum of `(dω∧ω)/vol_g`; the analytic value is `contact_analytic_constant`.
    pub contact_nonvanishing_min: f64,
    pub contact_analytic_constant: f64,
    /// `|½dω(v,w) + g(Φv,w)|` on horizontal pairs.
    pub lemma_domega_residual: f64,
    /// Minimum of `|dω(e₁,e₂)|` over orthonormal horizontal frames.
    pub frobenius_violation_min: f64,
    pub unit_length_residual: f64,
    pub contact_dual_residual: f64,
    pub contact_normalization_residual: f64,
    pub reeb_contraction_residual: f64,
    pub phi_reeb_residual: f64,
    pub phi_square_residual: f64,
    pub phi_antisymmetry_residual: f64,
    pub nan_flagged: bool,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    killing: f64,
    phi_id: f64,
    curv: f64,
    contact_min: f64,
    lemma: f64,
    frob_min: f64,
    unit: f64,
    dual: f64,
    norm: f64,
    contraction: f64,
    phi_reeb: f64,
    phi_sq: f64,
    phi_anti: f64,
    nan: bool,
}

impl Acc {
    fn empty() -> Self {
        Self {
            contact_min: f64::INFINITY,
            frob_min: f64::INFINITY,
            ..Default::default()
        }
    }

    fn merge(a: Self, b: Self) -> Self {
        Self {
            killing: a.killing.max(b.killing),
            phi_id: a.phi_id.max(b.phi_id),
            curv: a.curv.max(b.curv),
            contact_min: a.contact_min.min(b.contact_min),
            lemma: a.lemma.max(b.lemma),
            frob_min: a.frob_min.min(b.frob_min),
            unit: a.unit.max(b.unit),
            dual: a.dual.max(b.dual),
            norm: a.norm.max(b.norm),
            contraction: a.contraction.max(b.contraction),
            phi_reeb: a.phi_reeb.max(b.phi_reeb),
            phi_sq: a.phi_sq.max(b.phi_sq),
            phi_anti: a.phi_anti.max(b.phi_anti),
            nan: a.nan || b.nan,
        }
    }
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn bil(g: &Mat, v: &Vector3<f64>, w: &Vector3<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += g[i][j] * v[i] * w[j];
        }
    }
    s
}

fn gnorm(g: &Mat, v: &Vector3<f64>) -> f64 {
    bil(g, v, v).max(0.0).sqrt()
}

/// Evaluates every identity at every base grid point on `sample_count`
/// random vector pairs per point (seed 0).
pub fn verify_sasakian(s: &SasakianStructure, sample_count: usize) -> StructureReport {
    verify_sasakian_seeded(s, sample_count, 0)
}

pub fn verify_sasakian_seeded(s: &SasakianStructure, sample_count: usize, seed: u64) -> StructureReport {
    let g = &s.grid;
    let (nx, ny) = (g.nx(), g.ny());
    let points: Vec<(usize, usize, usize)> = (0..g.n_charts)
        .flat_map(|c| (0..nx).flat_map(move |ix| (0..ny).map(move |iy| (c, ix, iy))))
        .collect();
    let acc = points
        .par_iter()
        .enumerate()
        .map(|(n, &(c, ix, iy))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            point_residuals(s, c, ix, iy, sample_count.max(1), &mut rng)
        })
        .reduce(Acc::empty, Acc::merge);
    let san = |x: f64| if x.is_finite() { x } else { f64::NAN };
    let nan_flagged = acc.nan
        || [acc.killing, acc.phi_id, acc.curv, acc.lemma, acc.contact_min, acc.frob_min]
            .iter()
            .any(|v| !v.is_finite());
    StructureReport {
        base: match s.base.kind {
            BaseKind::FlatTorus { .. } => "flat_torus".into(),
            BaseKind::RoundSphere { .. } => "round_sphere".into(),
        },
        resolution: [nx, ny, g.ntheta()],
        fd_order: g.spec.fd_order,
        sample_count,
        killing_residual: san(acc.killing),
        phi_identity_residual: san(acc.phi_id),
        curvature_identity_residual: san(acc.curv),
        contact_nonvanishing_min: san(acc.contact_min),
        contact_analytic_constant: 2.0,
        lemma_domega_residual: san(acc.lemma),
        frobenius_violation_min: san(acc.frob_min),
        unit_length_residual: san(acc.unit),
        contact_dual_residual: san(acc.dual),
        contact_normalization_residual: san(acc.norm),
        reeb_contraction_residual: san(acc.contraction),
        phi_reeb_residual: san(acc.phi_reeb),
        phi_square_residual: san(acc.phi_sq),
        phi_antisymmetry_residual: san(acc.phi_anti),
        nan_flagged,
    }
}

/// `max |½dω(v,w) + g(Φv,w)|` over horizontal sample pairs.
pub fn check_lemma_domega(s: &SasakianStructure) -> f64 {
    verify_sasakian(s, 4).lemma_domega_residual
}

fn point_residuals(s: &SasakianStructure, c: usize, ix: usize, iy: usize, samples: usize, rng: &mut ChaCha8Rng) -> Acc {
    let gm = s.metric_at(c, ix, iy);
    let om = s.contact_at(c, ix, iy);
    let gam = s.christoffel_at(c, ix, iy);
    let phi = s.phi_at(c, ix, iy);
    let xi = Vector3::new(0.0, 0.0, 1.0);

    // numerical first derivatives of ω, g, Φ, Γ
    let d_om: [[f64; 3]; 3] = std::array::from_fn(|j| s.grad(&s.contact, c, ix, iy, |o| o[j])); // [j][k] = ∂_k ω_j
    let d_g: [[[f64; 3]; 3]; 3] =
        std::array::from_fn(|i| std::array::from_fn(|j| s.grad(&s.metric, c, ix, iy, |m| m[i][j])));
    let d_phi: [[[f64; 3]; 3]; 3] =
        std::array::from_fn(|i| std::array::from_fn(|j| s.grad(&s.phi, c, ix, iy, |p| p[i][j])));
    let d_gam: [[[[f64; 3]; 3]; 3]; 3] = std::array::from_fn(|i| {
        std::array::from_fn(|j| std::array::from_fn(|k| s.grad(&s.christoffel, c, ix, iy, |q| q[i][j][k])))
    });

    // dω_{ij} = ∂_i ω_j − ∂_j ω_i
    let dom = |i: usize, j: usize| d_om[j][i] - d_om[i][j];
    let phi_m = Matrix3::from_fn(|i, j| phi[i][j]);
    let g_m = Matrix3::from_fn(|i, j| gm[i][j]);

    let mut a = Acc::empty();
    a.unit = (gm[2][2] - 1.0).abs();
    a.dual = (0..3).map(|i| (om[i] - gm[2][i]).abs()).fold(0.0, f64::max);
    a.norm = (om[2] - 1.0).abs();
    a.contraction = (0..3).map(|j| dom(2, j).abs()).fold(0.0, f64::max);
    a.phi_reeb = (phi_m * xi).norm();
    // g(Φ·,·) must be antisymmetric
    let gphi = g_m * phi_m;
    a.phi_anti = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| (gphi[(j, i)] + gphi[(i, j)]).abs())
        .fold(0.0, f64::max);

    // (dω∧ω)_{xyθ} relative to the Riemannian volume density
    let top = dom(0, 1) * om[2] + dom(1, 2) * om[0] + dom(2, 0) * om[1];
    let vol = g_m.determinant().sqrt();
    a.contact_min = (top / vol).abs();

    // orthonormal horizontal frame from the coordinate directions
    let horiz = |v: Vector3<f64>| v - xi * bil(&gm, &xi, &v);
    let e1 = {
        let v = horiz(Vector3::new(1.0, 0.0, 0.0));
        v / gnorm(&gm, &v)
    };
    let e2 = {
        let v = horiz(Vector3::new(0.0, 1.0, 0.0));
        let v = v - e1 * bil(&gm, &e1, &v);
        v / gnorm(&gm, &v)
    };
    let dom_form = |v: &Vector3<f64>, w: &Vector3<f64>| {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += dom(i, j) * v[i] * w[j];
            }
        }
        acc
    };
    a.frob_min = dom_form(&e1, &e2).abs();

    // ∇_i ξ_j with ξ_j = g_{jθ}
    let nabla_xi = |i: usize, j: usize| {
        let mut v = d_g[j][2][i];
        for k in 0..3 {
            v -= gam[k][i][j] * gm[k][2];
        }
        v
    };
    // (∇_k Φ)^i_j
    let nabla_phi = |k: usize, i: usize, j: usize| {
        let mut v = d_phi[i][j][k];
        for l in 0..3 {
            v += gam[i][k][l] * phi[l][j] - gam[l][k][j] * phi[i][l];
        }
        v
    };
    // R^i_{jkl} = ∂_k Γ^i_{lj} − ∂_l Γ^i_{kj} + Γ^i_{km}Γ^m_{lj} − Γ^i_{lm}Γ^m_{kj}
    let riemann = |i: usize, j: usize, k: usize, l: usize| {
        let mut v = d_gam[i][l][j][k] - d_gam[i][k][j][l];
        for m in 0..3 {
            v += gam[i][k][m] * gam[m][l][j] - gam[i][l][m] * gam[m][k][j];
        }
        v
    };
    let nphi: [[[f64; 3]; 3]; 3] = std::array::from_fn(|k| std::array::from_fn(|i| std::array::from_fn(|j| nabla_phi(k, i, j))));
    let r_xi: [[[f64; 3]; 3]; 3] =
        std::array::from_fn(|i| std::array::from_fn(|j| std::array::from_fn(|k| riemann(i, j, k, 2))));

    for _ in 0..samples {
        let v = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let w = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let (nv, nw) = (gnorm(&gm, &v), gnorm(&gm, &w));
        if nv < 1e-6 || nw < 1e-6 {
            continue;
        }
        let scale = 1.0 / (nv * nw);

        let mut lie = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                lie += (nabla_xi(i, j) + nabla_xi(j, i)) * v[i] * w[j];
            }
        }
        a.killing = nan_max(a.killing, lie.abs() * scale);

        let gvw = bil(&gm, &v, &w);
        let gxw = bil(&gm, &xi, &w);
        let mut lhs = Vector3::zeros();
        let mut curv = Vector3::zeros();
        for i in 0..3 {
            for k in 0..3 {
                for j in 0..3 {
                    lhs[i] += nphi[k][i][j] * v[k] * w[j];
                    curv[i] += r_xi[i][j][k] * w[j] * v[k];
                }
            }
        }
        let rhs_phi = xi * gvw - v * gxw;
        a.phi_id = nan_max(a.phi_id, gnorm(&gm, &(lhs - rhs_phi)) * scale);
        let rhs_curv = v * gxw - xi * gvw;
        a.curv = nan_max(a.curv, gnorm(&gm, &(curv - rhs_curv)) * scale);

        let (vh, wh) = (horiz(v), horiz(w));
        let (nvh, nwh) = (gnorm(&gm, &vh), gnorm(&gm, &wh));
        if nvh > 1e-6 && nwh > 1e-6 {
            let hs = 1.0 / (nvh * nwh);
            let lem = 0.5 * dom_form(&vh, &wh) + bil(&gm, &(phi_m * vh), &wh);
            a.lemma = nan_max(a.lemma, lem.abs() * hs);
            let sq = phi_m * (phi_m * vh) + vh;
            a.phi_sq = nan_max(a.phi_sq, gnorm(&gm, &sq) / nvh);
        }
    }
    a.nan = [a.killing, a.phi_id, a.curv, a.lemma, a.contact_min, a.frob_min]
        .iter()
        .any(|x| x.is_nan());
    a
}

/// Convenience: a coordinate vector field with constant components.
pub fn constant_vector_field(grid: &GridHandle, v: [f64; 3]) -> [Field; 3] {
    v.map(|c| Field::constant(grid, Complex64::new(c, 0.0)))
}

/// Fiber derivative of a vector field, used to confirm ξ-invariance of
/// lifted data.
pub fn lie_reeb_components(v: &[Field; 3]) -> Result<[Field; 3]> {
    Ok([
        v[0].differentiate(Direction::Theta)?,
        v[1].differentiate(Direction::Theta)?,
        v[2].differentiate(Direction::Theta)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn torus(n: usize) -> SasakianStructure {
        boothby_wang(BaseManifold::flat_torus(Complex64::new(0.0, 1.0), 1), GridSpec::torus(n, n, 16)).unwrap()
    }

    #[test]
    fn torus_identities_hold() {
        let s = torus(32);
        let r = verify_sasakian(&s, 8);
        assert!(!r.nan_flagged);
        for (name, v) in [
            ("killing", r.killing_residual),
            ("phi", r.phi_identity_residual),
            ("curv", r.curvature_identity_residual),
            ("lemma", r.lemma_domega_residual),
            ("unit", r.unit_length_residual),
            ("dual", r.contact_dual_residual),
            ("phi_sq", r.phi_square_residual),
            ("phi_reeb", r.phi_reeb_residual),
        ] {
            assert!(v < 1e-7, "{name} = {v}");
        }
        assert!((r.contact_nonvanishing_min - 2.0).abs() < 1e-8);
        assert!(r.frobenius_violation_min > 1.0);
    }

    #[test]
    fn rejects_non_integral_torus() {
        let mut b = BaseManifold::flat_torus(Complex64::new(0.0, 1.0), 1);
        b.kind = BaseKind::FlatTorus {
            tau: Complex64::new(0.0, 1.0),
            area: 1.0,
        };
        assert!(matches!(
            boothby_wang(b, GridSpec::torus(16, 16, 8)),
            Err(Error::NonIntegralClass(_))
        ));
    }

    #[test]
    fn phi_of_reeb_vanishes() {
        let s = torus(16);
        let xi = constant_vector_field(&s.grid, s.reeb());
        let out = phi_apply(&s, &xi).unwrap();
        assert!(out.iter().all(|f| f.max_norm() < 1e-12));
    }
}
