//! Holomorphic families over a rectangular parameter grid in `ℂ^m` and the
//! moduli form obtained by fiber integration of `tr(iK∧iK)∧ω` over `X`.
//!
//! The connection on `X × S` is the product-structure Chern connection of
//! `(α(s), h(s))`: `∇_s = ∂_s + H⁻¹∂_sH`, `∇_s̄ = ∂_s̄`. Parameter derivatives
//! are centered fourth-order differences, so the two outer rings of the
//! parameter grid carry no curvature data.
//!
//! With `I[f] = ∫_X f` against the Riemannian volume, the reported form is
//! `ω^SB = Σ G_ab · i ds_a∧ds̄_b` with
//! `G_ab = −4 I[tr K_zz̄K_{a b̄} − tr K_{a z̄}K_{z b̄} − tr K_{z a}K_{z̄ b̄}]`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{chern_connection, curvature_of, HermitianMetric, HolomorphicStructure, SasakianBundle};
use crate::error::{Error, Result};
use crate::flow::{run_flow, FlowConfig, FlowVerdict};
use crate::grid::{make_grid, BaseManifold, GridSpec};
use crate::slicemat::SliceMat;
use crate::torus::TorusOps;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Which holomorphic family to build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilyKind {
    /// Flat line bundles `α(s) = s dz̄` on the degree-0 bundle.
    Jacobian,
    /// `α ≡ value·dz̄`, independent of `s`.
    Constant { value: [f64; 2] },
    /// `α(s) = [[coupling·s dz̄, ε·conj(σ) dz̄], [0, 0]]` on `O ⊕ O(1)`:
    /// the sub line bundle moves in the Jacobian, the extension stays
    /// nonsplit.
    Extension { epsilon: f64, coupling: f64 },
    /// Two-parameter family `φ(s)(1 + κ e) dz̄` on the degree-0 bundle with
    /// `φ = s₁ + a sin s₂ + b s₁s₂` and `e = cos 2πx + sin 2πy`. Gauge
    /// equivalent to the flat bundle `φ(s) dz̄`, so its HE metric is known in
    /// closed form.
    GaugedPair { a: f64, b: f64, kappa: f64 },
}

impl FamilyKind {
    pub fn parameter_dim(&self) -> usize {
        match self {
            FamilyKind::GaugedPair { .. } => 2,
            _ => 1,
        }
    }

    fn degrees(&self) -> Vec<i64> {
        match self {
            FamilyKind::Extension { .. } => vec![0, 1],
            _ => vec![0],
        }
    }
}

/// Holomorphic reparametrization `s ↦ shift + scale·s + quadratic·s²` of a
/// one-parameter family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reparam {
    pub shift: [f64; 2],
    pub scale: [f64; 2],
    #[serde(default)]
    pub quadratic: [f64; 2],
}

impl Reparam {
    pub fn apply(&self, s: Complex64) -> Complex64 {
        let z = |v: [f64; 2]| Complex64::new(v[0], v[1]);
        z(self.shift) + z(self.scale) * s + z(self.quadratic) * s * s
    }

    pub fn derivative(&self, s: Complex64) -> Complex64 {
        Complex64::new(self.scale[0], self.scale[1]) + 2.0 * Complex64::new(self.quadratic[0], self.quadratic[1]) * s
    }
}

/// Exponent of `dω` in the fiber integrand. `Printed` has fiber degree 3
/// already and leaves nothing of bidegree `(1,1)` on `S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Exponent {
    #[default]
    NMinusOne,
    Printed,
}

fn default_points() -> usize {
    7
}
fn default_spacing() -> f64 {
    0.1
}
fn default_grid() -> [usize; 2] {
    [11, 11]
}
fn default_ntheta() -> usize {
    8
}
fn default_tau() -> [f64; 2] {
    [0.0, 1.0]
}
fn default_k_l() -> u32 {
    1
}
fn default_family_flow() -> FlowConfig {
    FlowConfig {
        stop_sup_tol: 1e-9,
        max_steps: 50_000,
        ..FlowConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub family: FamilyKind,
    /// Points per real parameter direction.
    #[serde(default = "default_points")]
    pub param_points: usize,
    #[serde(default = "default_spacing")]
    pub param_spacing: f64,
    /// Center of the parameter grid, one `[re, im]` pair per complex
    /// parameter; defaults to the origin.
    #[serde(default)]
    pub param_center: Vec<[f64; 2]>,
    #[serde(default = "default_grid")]
    pub grid: [usize; 2],
    #[serde(default = "default_ntheta")]
    pub ntheta: usize,
    #[serde(default = "default_tau")]
    pub tau: [f64; 2],
    #[serde(default = "default_k_l")]
    pub k_l: u32,
    #[serde(default = "default_family_flow")]
    pub flow: FlowConfig,
    #[serde(default)]
    pub exponent: Exponent,
    #[serde(default)]
    pub reparam: Option<Reparam>,
}

impl FamilyConfig {
    pub fn new(family: FamilyKind) -> Self {
        Self {
            family,
            param_points: default_points(),
            param_spacing: default_spacing(),
            param_center: Vec::new(),
            grid: default_grid(),
            ntheta: default_ntheta(),
            tau: default_tau(),
            k_l: default_k_l(),
            flow: default_family_flow(),
            exponent: Exponent::default(),
            reparam: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.family.parameter_dim();
        if self.param_points < 5 {
            return Err(Error::config("param_points", "need at least 5 points for centered stencils"));
        }
        if !(self.param_spacing > 0.0) {
            return Err(Error::config("param_spacing", "must be positive"));
        }
        if !self.param_center.is_empty() && self.param_center.len() != m {
            return Err(Error::config(
                "param_center",
                format!("expected {m} complex coordinates, got {}", self.param_center.len()),
            ));
        }
        if self.reparam.is_some() && m != 1 {
            return Err(Error::config("reparam", "only one-parameter families can be reparametrized"));
        }
        Ok(())
    }

    fn center(&self) -> Vec<Complex64> {
        let m = self.family.parameter_dim();
        if self.param_center.is_empty() {
            vec![Complex64::new(0.0, 0.0); m]
        } else {
            self.param_center.iter().map(|v| Complex64::new(v[0], v[1])).collect()
        }
    }
}

/// Rectangular grid in `ℂ^m`; real coordinates ordered `(u₁, v₁, u₂, v₂)`
/// with `s_a = u_a + i v_a`.
#[derive(Clone, Debug)]
pub struct ParamGrid {
    pub m: usize,
    pub n: usize,
    pub h: f64,
    pub center: Vec<Complex64>,
}

impl ParamGrid {
    pub fn len(&self) -> usize {
        self.n.pow(2 * self.m as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn multi(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; 2 * self.m];
        for d in (0..2 * self.m).rev() {
            out[d] = idx % self.n;
            idx /= self.n;
        }
        out
    }

    pub fn flat(&self, multi: &[usize]) -> usize {
        multi.iter().fold(0, |acc, &i| acc * self.n + i)
    }

    pub fn point(&self, idx: usize) -> Vec<Complex64> {
        let mi = self.multi(idx);
        let off = |i: usize| (i as f64 - (self.n as f64 - 1.0) / 2.0) * self.h;
        (0..self.m)
            .map(|a| self.center[a] + Complex64::new(off(mi[2 * a]), off(mi[2 * a + 1])))
            .collect()
    }

    /// True when every coordinate is at least `ring` points from the edge.
    pub fn is_interior(&self, idx: usize, ring: usize) -> bool {
        self.multi(idx).iter().all(|&i| i >= ring && i + ring < self.n)
    }

    fn shifted(&self, idx: usize, dim: usize, off: i64) -> usize {
        let mut mi = self.multi(idx);
        mi[dim] = (mi[dim] as i64 + off) as usize;
        self.flat(&mi)
    }

    /// Snake ordering, so that consecutive parameters are neighbors.
    fn snake(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.len());
        let mut mi = vec![0usize; 2 * self.m];
        let mut dir = vec![1i64; 2 * self.m];
        for _ in 0..self.len() {
            order.push(self.flat(&mi));
            let mut d = 2 * self.m - 1;
            loop {
                let next = mi[d] as i64 + dir[d];
                if next >= 0 && next < self.n as i64 {
                    mi[d] = next as usize;
                    break;
                }
                dir[d] = -dir[d];
                if d == 0 {
                    break;
                }
                d -= 1;
            }
        }
        order
    }
}

const D1: [f64; 5] = [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0];
const D2: [f64; 5] = [-1.0 / 12.0, 16.0 / 12.0, -30.0 / 12.0, 16.0 / 12.0, -1.0 / 12.0];

/// Parameter-space differences of a field of slice matrices.
struct Stencils<'a> {
    g: &'a ParamGrid,
}

impl Stencils<'_> {
    fn real_first(&self, f: &[SliceMat], idx: usize, dim: usize) -> SliceMat {
        let mut acc = f[idx].scale_re(0.0);
        for (k, w) in D1.iter().enumerate() {
            if *w != 0.0 {
                acc = acc.add(&f[self.g.shifted(idx, dim, k as i64 - 2)].scale_re(w / self.g.h));
            }
        }
        acc
    }

    fn real_second(&self, f: &[SliceMat], idx: usize, d1: usize, d2: usize) -> SliceMat {
        let h2 = self.g.h * self.g.h;
        let mut acc = f[idx].scale_re(0.0);
        if d1 == d2 {
            for (k, w) in D2.iter().enumerate() {
                acc = acc.add(&f[self.g.shifted(idx, d1, k as i64 - 2)].scale_re(w / h2));
            }
        } else {
            for (k1, w1) in D1.iter().enumerate() {
                for (k2, w2) in D1.iter().enumerate() {
                    if w1 * w2 != 0.0 {
                        let j = self.g.shifted(self.g.shifted(idx, d1, k1 as i64 - 2), d2, k2 as i64 - 2);
                        acc = acc.add(&f[j].scale_re(w1 * w2 / h2));
                    }
                }
            }
        }
        acc
    }

    /// `∂_{s_a}` (or `∂_{s̄_a}` when `bar`).
    fn ds(&self, f: &[SliceMat], idx: usize, a: usize, bar: bool) -> SliceMat {
        let du = self.real_first(f, idx, 2 * a);
        let dv = self.real_first(f, idx, 2 * a + 1);
        let sign = if bar { 1.0 } else { -1.0 };
        du.add(&dv.scale(I * sign)).scale_re(0.5)
    }

    /// `∂_{s_a}∂_{s̄_b}`.
    fn dsdsbar(&self, f: &[SliceMat], idx: usize, a: usize, b: usize) -> SliceMat {
        let (ua, va, ub, vb) = (2 * a, 2 * a + 1, 2 * b, 2 * b + 1);
        let re = self.real_second(f, idx, ua, ub).add(&self.real_second(f, idx, va, vb));
        let im = self.real_second(f, idx, ua, vb).sub(&self.real_second(f, idx, va, ub));
        re.add(&im.scale(I)).scale_re(0.25)
    }
}

/// Per-parameter flow outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamFlow {
    pub verdict: FlowVerdict,
    pub steps: usize,
    pub sup_residual: f64,
}

#[derive(Clone, Debug)]
pub struct BundleFamily {
    pub config: FamilyConfig,
    pub params: ParamGrid,
    pub bundle: SasakianBundle,
    pub q: Vec<SliceMat>,
    pub h: Vec<SliceMat>,
    pub flows: Vec<ParamFlow>,
}

fn build_q(cfg: &FamilyConfig, bundle: &SasakianBundle, s: &[Complex64]) -> SliceMat {
    let t = bundle.torus();
    let n = bundle.npoints();
    let mut q = bundle.end_zeros();
    let s1 = cfg.reparam.map_or(s[0], |r| r.apply(s[0]));
    match &cfg.family {
        FamilyKind::Jacobian => q.entries[0] = vec![s1; n],
        FamilyKind::Constant { value } => q.entries[0] = vec![Complex64::new(value[0], value[1]); n],
        FamilyKind::Extension { epsilon, coupling } => {
            *q.entry_mut(0, 0) = vec![s1 * *coupling; n];
            *q.entry_mut(0, 1) = t.from_fn(|x, y| t.base_section(-1, x, y) * *epsilon);
        }
        FamilyKind::GaugedPair { a, b, kappa } => {
            let phi = gauged_phi(*a, *b, s);
            q.entries[0] = t.from_fn(|x, y| phi * (1.0 + *kappa * ((2.0 * PI * x).cos() + (2.0 * PI * y).sin())));
        }
    }
    q
}

fn gauged_phi(a: f64, b: f64, s: &[Complex64]) -> Complex64 {
    s[0] + a * s[1].sin() + b * s[0] * s[1]
}

/// Periodic `g` with `∂_z̄ g = κ(cos 2πx + sin 2πy)`.
fn gauge_potential(t: &TorusOps, kappa: f64) -> Vec<Complex64> {
    let cc = 1.0 / (2.0 * t.ell * t.tau.im);
    // cos 2πx + sin 2πy = ½E(1,0) + ½E(−1,0) − ½iE(0,1) + ½iE(0,−1)
    let modes = [
        (1.0, 0.0, c(0.5)),
        (-1.0, 0.0, c(0.5)),
        (0.0, 1.0, Complex64::new(0.0, -0.5)),
        (0.0, -1.0, Complex64::new(0.0, 0.5)),
    ];
    t.from_fn(|x, y| {
        modes
            .iter()
            .map(|&(ma, mb, coef)| {
                let sym = -2.0 * PI * cc * (Complex64::new(mb, 0.0) - t.tau * ma);
                coef / sym * kappa * Complex64::from_polar(1.0, 2.0 * PI * (ma * x + mb * y))
            })
            .sum()
    })
}

/// HE metric of the gauged family: `exp(2 Re(φ g))`, before normalization.
pub fn gauged_metric(bundle: &SasakianBundle, a: f64, b: f64, kappa: f64, s: &[Complex64]) -> SliceMat {
    let phi = gauged_phi(a, b, s);
    let g = gauge_potential(bundle.torus(), kappa);
    let mut h = bundle.end_zeros();
    h.entries[0] = g.iter().map(|v| c((2.0 * (phi * v).re).exp())).collect();
    h
}

/// Rescales `H` so that the spatial mean of `log det H` vanishes.
fn normalize_det(h: &SliceMat) -> SliceMat {
    let r = h.nrows() as f64;
    let det = h.det();
    let mean = det.iter().map(|d| d.re.ln()).sum::<f64>() / det.len() as f64;
    h.scale_re((-mean / r).exp())
}

/// Builds the family and its per-parameter HE metrics by the heat flow,
/// warm-started along a snake ordering of the parameter grid. The gauged
/// family takes its closed-form metric instead (its `sup_residual` is then
/// recorded as 0; the flow agreement is checked separately).
pub fn build_family(cfg: &FamilyConfig) -> Result<BundleFamily> {
    cfg.validate()?;
    let grid = make_grid(
        BaseManifold::flat_torus(Complex64::new(cfg.tau[0], cfg.tau[1]), cfg.k_l),
        GridSpec::torus(cfg.grid[0], cfg.grid[1], cfg.ntheta),
    )?;
    let bundle = SasakianBundle::new(&grid, &cfg.family.degrees())?;
    let params = ParamGrid {
        m: cfg.family.parameter_dim(),
        n: cfg.param_points,
        h: cfg.param_spacing,
        center: cfg.center(),
    };
    let q: Vec<SliceMat> = (0..params.len())
        .into_par_iter()
        .map(|i| build_q(cfg, &bundle, &params.point(i)))
        .collect();
    // validation only: each parameter picks its own automatic dt
    cfg.flow.resolve(&bundle)?;
    let flow_cfg = cfg.flow.clone();
    let mut h: Vec<Option<SliceMat>> = vec![None; params.len()];
    let mut flows: Vec<Option<ParamFlow>> = vec![None; params.len()];
    let mut warm = bundle.reference_metric();
    for idx in params.snake() {
        if let FamilyKind::GaugedPair { a, b, kappa } = cfg.family {
            let hm = gauged_metric(&bundle, a, b, kappa, &params.point(idx));
            h[idx] = Some(normalize_det(&hm));
            flows[idx] = Some(ParamFlow {
                verdict: FlowVerdict::Converged,
                steps: 0,
                sup_residual: 0.0,
            });
            continue;
        }
        let d = HolomorphicStructure::from_q(&bundle, &q[idx])?;
        let run = run_flow(&d, &warm, &flow_cfg)?;
        if run.report.verdict != FlowVerdict::Converged {
            return Err(Error::Unstable(format!(
                "HE flow at parameter {:?} ended as {:?} with sup residual {:e}",
                params.point(idx),
                run.report.verdict,
                run.report.final_sup_residual
            )));
        }
        warm = run.state.h.clone();
        h[idx] = Some(normalize_det(&run.state.h.h));
        flows[idx] = Some(ParamFlow {
            verdict: run.report.verdict,
            steps: run.report.steps,
            sup_residual: run.report.final_sup_residual,
        });
    }
    Ok(BundleFamily {
        config: cfg.clone(),
        params,
        bundle,
        q,
        h: h.into_iter().map(|v| v.expect("every parameter visited")).collect(),
        flows: flows.into_iter().map(|v| v.expect("every parameter visited")).collect(),
    })
}

/// Family invariants: ξ-invariance of `α(s)`, holomorphy in `s`, and the
/// per-parameter HE residual.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyInvariants {
    pub lie_reeb_residual: f64,
    pub antiholomorphic_residual: f64,
    pub max_he_residual: f64,
}

impl BundleFamily {
    fn stencils(&self) -> Stencils<'_> {
        Stencils { g: &self.params }
    }

    pub fn interior(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params.is_interior(i, 2)).collect()
    }

    pub fn structure(&self, idx: usize) -> Result<HolomorphicStructure> {
        HolomorphicStructure::from_q(&self.bundle, &self.q[idx])
    }

    pub fn metric(&self, idx: usize) -> HermitianMetric {
        HermitianMetric { h: self.h[idx].clone() }
    }

    pub fn invariants(&self) -> Result<FamilyInvariants> {
        let mut lie: f64 = 0.0;
        for idx in [0, self.params.len() / 2, self.params.len() - 1] {
            lie = lie.max(self.structure(idx)?.lie_reeb_residual()?);
        }
        let st = self.stencils();
        let anti = self
            .interior()
            .par_iter()
            .map(|&i| {
                (0..self.params.m)
                    .map(|a| st.ds(&self.q, i, a, true).max_norm())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max);
        let he = self.flows.iter().map(|f| f.sup_residual).fold(0.0, f64::max);
        Ok(FamilyInvariants {
            lie_reeb_residual: lie,
            antiholomorphic_residual: anti,
            max_he_residual: he,
        })
    }

    fn integral(&self, f: &[Complex64]) -> Complex64 {
        self.bundle.integrate_slice(f)
    }
}

/// Curvature of the family connection at one interior parameter. Index
/// `a` runs over parameter directions.
#[derive(Clone, Debug)]
pub struct TotalCurvature {
    /// `K_zz̄`.
    pub fiber: SliceMat,
    /// `K_{s_a z̄}`, coefficient of `ds_a∧dz̄`.
    pub mixed_sz: Vec<SliceMat>,
    /// `K_{z s̄_a}`, coefficient of `dz∧ds̄_a`.
    pub mixed_zs: Vec<SliceMat>,
    /// `K_{s_a s̄_b}`, row-major.
    pub pure: Vec<SliceMat>,
    /// `K_{z s_a}` and `K_{z̄ s̄_a}`, which vanish for a Chern connection of
    /// a holomorphic family.
    pub type20: Vec<SliceMat>,
    pub type02: Vec<SliceMat>,
}

impl TotalCurvature {
    pub fn type_residual(&self) -> f64 {
        self.type20
            .iter()
            .chain(&self.type02)
            .map(|k| k.max_norm())
            .fold(0.0, f64::max)
    }
}

pub fn total_curvature(family: &BundleFamily, idx: usize) -> Result<TotalCurvature> {
    if !family.params.is_interior(idx, 2) {
        return Err(Error::BoundaryParameter(format!("{:?}", family.params.point(idx))));
    }
    let st = family.stencils();
    let m = family.params.m;
    let t = family.bundle.torus();
    let hs = &family.h;
    // P at every parameter used by the stencils
    let mut p_all: Vec<Option<SliceMat>> = vec![None; family.params.len()];
    let mut need = vec![idx];
    for dim in 0..2 * m {
        for off in [-2i64, -1, 1, 2] {
            need.push(family.params.shifted(idx, dim, off));
        }
    }
    for &j in &need {
        let d = family.structure(j)?;
        p_all[j] = Some(chern_connection(&d, &family.metric(j))?.p);
    }
    let zero = family.bundle.end_zeros();
    let p_field: Vec<SliceMat> = p_all.into_iter().map(|v| v.unwrap_or_else(|| zero.clone())).collect();

    let h = &hs[idx];
    let hi = h.inverse()?;
    let q = &family.q[idx];
    let p = &p_field[idx];
    let d = family.structure(idx)?;
    let conn = chern_connection(&d, &family.metric(idx))?;
    let fiber = curvature_of(&family.bundle, &conn, &family.metric(idx)).k;

    let dh: Vec<SliceMat> = (0..m).map(|a| st.ds(hs, idx, a, false)).collect();
    let dhb: Vec<SliceMat> = (0..m).map(|a| st.ds(hs, idx, a, true)).collect();
    let r: Vec<SliceMat> = dh.iter().map(|x| hi.mul(x)).collect();
    let mut mixed_sz = Vec::new();
    let mut mixed_zs = Vec::new();
    let mut type20 = Vec::new();
    let mut type02 = Vec::new();
    for a in 0..m {
        let (rz, rzb) = r[a].d_z_zbar(t);
        let dq = st.ds(&family.q, idx, a, false);
        let qr = q.mul(&r[a]).sub(&r[a].mul(q));
        mixed_sz.push(dq.sub(&rzb).sub(&qr));
        mixed_zs.push(st.ds(&p_field, idx, a, true).scale_re(-1.0));
        let pr = p.mul(&r[a]).sub(&r[a].mul(p));
        type20.push(rz.sub(&st.ds(&p_field, idx, a, false)).add(&pr));
        type02.push(st.ds(&family.q, idx, a, true).scale_re(-1.0));
    }
    let mut pure = Vec::new();
    for a in 0..m {
        for b in 0..m {
            let second = st.dsdsbar(hs, idx, a, b);
            let k = hi.mul(&dhb[b]).mul(&hi).mul(&dh[a]).sub(&hi.mul(&second));
            pure.push(k);
        }
    }
    Ok(TotalCurvature {
        fiber,
        mixed_sz,
        mixed_zs,
        pure,
        type20,
        type02,
    })
}

fn tr_prod(a: &SliceMat, b: &SliceMat) -> Vec<Complex64> {
    a.mul(b).trace()
}

fn tr_tr(a: &SliceMat, b: &SliceMat) -> Vec<Complex64> {
    a.trace().iter().zip(b.trace()).map(|(x, y)| x * y).collect()
}

/// The integrand `T_ab` (matrix traces, or products of traces when
/// `traced`).
fn t_density(k: &TotalCurvature, a: usize, b: usize, m: usize, traced: bool) -> Vec<Complex64> {
    let f = if traced { tr_tr } else { tr_prod };
    let t1 = f(&k.fiber, &k.pure[a * m + b]);
    let t2 = f(&k.mixed_sz[a], &k.mixed_zs[b]);
    let t3 = f(&k.type20[a], &k.type02[b]);
    t1.iter().zip(&t2).zip(&t3).map(|((x, y), z)| x - y - z).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModuliPoint {
    pub index: usize,
    pub s: Vec<[f64; 2]>,
    /// Row-major `m×m` hermitian matrix `G`.
    pub g: Vec<[f64; 2]>,
}

impl ModuliPoint {
    pub fn matrix(&self) -> DMatrix<Complex64> {
        let m = self.s.len();
        DMatrix::from_fn(m, m, |i, j| Complex64::new(self.g[i * m + j][0], self.g[i * m + j][1]))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModuliFormSample {
    pub m: usize,
    pub exponent: Exponent,
    pub points: Vec<ModuliPoint>,
    /// Largest `|G − G†|` before symmetrization.
    pub antihermitian_residual: f64,
    /// Largest `(2,0)`/`(0,2)` family curvature component dropped from the
    /// `(1,1)` bookkeeping.
    pub discarded_type_residual: f64,
    pub note: String,
}

impl ModuliFormSample {
    pub fn point_at(&self, index: usize) -> Option<&ModuliPoint> {
        self.points.iter().find(|p| p.index == index)
    }

    pub fn max_entry(&self) -> f64 {
        self.points
            .iter()
            .flat_map(|p| p.g.iter().map(|v| v[0].hypot(v[1])))
            .fold(0.0, f64::max)
    }
}

fn pair(z: Complex64) -> [f64; 2] {
    [z.re, z.im]
}

fn moduli_matrix(family: &BundleFamily, k: &TotalCurvature, traced: bool) -> DMatrix<Complex64> {
    let m = family.params.m;
    DMatrix::from_fn(m, m, |a, b| family.integral(&t_density(k, a, b, m, traced)) * -4.0)
}

pub fn moduli_form(family: &BundleFamily) -> Result<ModuliFormSample> {
    let m = family.params.m;
    let interior = family.interior();
    let exponent = family.config.exponent;
    let results: Vec<Result<(usize, DMatrix<Complex64>, f64)>> = interior
        .par_iter()
        .map(|&idx| {
            let k = total_curvature(family, idx)?;
            let g = match exponent {
                Exponent::NMinusOne => moduli_matrix(family, &k, false),
                Exponent::Printed => DMatrix::zeros(m, m),
            };
            Ok((idx, g, k.type_residual()))
        })
        .collect();
    let mut points = Vec::new();
    let mut anti: f64 = 0.0;
    let mut discarded: f64 = 0.0;
    for r in results {
        let (idx, g, tres) = r?;
        anti = anti.max((&g - g.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max));
        discarded = discarded.max(tres);
        let gs = (&g + g.adjoint()) * c(0.5);
        points.push(ModuliPoint {
            index: idx,
            s: family.params.point(idx).into_iter().map(pair).collect(),
            g: (0..m * m).map(|k| pair(gs[(k / m, k % m)])).collect(),
        });
    }
    let note = match exponent {
        Exponent::NMinusOne => "ω^SB = Σ G_ab i ds_a∧ds̄_b, integrand tr(iK∧iK)∧ω".to_string(),
        Exponent::Printed => "printed exponent: dω∧ω already fills the fiber, every mixed term drops".to_string(),
    };
    Ok(ModuliFormSample {
        m,
        exponent,
        points,
        antihermitian_residual: anti,
        discarded_type_residual: discarded,
        note,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KahlerReport {
    /// `max |∂_c G_ab − ∂_a G_cb|`; identically zero when `m = 1`.
    pub closedness_residual: f64,
    pub closedness_applicable: bool,
    pub min_eigenvalue_over_s: f64,
    pub type_residual: f64,
    pub hermitian_residual: f64,
    pub sample_points: usize,
}

pub fn check_kahler(family: &BundleFamily, sample: &ModuliFormSample) -> Result<KahlerReport> {
    if sample.points.is_empty() {
        return Err(Error::ShapeMismatch("moduli form sample is empty; enlarge the parameter grid".into()));
    }
    let m = sample.m;
    let mut min_eig = f64::INFINITY;
    let mut herm: f64 = 0.0;
    for p in &sample.points {
        let g = p.matrix();
        herm = herm.max((&g - g.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max));
        let eig = g.symmetric_eigenvalues();
        min_eig = min_eig.min(eig.iter().copied().fold(f64::INFINITY, f64::min));
    }
    let closedness_residual = if m == 1 { 0.0 } else { closedness(family, sample)? };
    Ok(KahlerReport {
        closedness_residual,
        closedness_applicable: m > 1,
        min_eigenvalue_over_s: min_eig,
        type_residual: sample.discarded_type_residual,
        hermitian_residual: herm,
        sample_points: sample.points.len(),
    })
}

/// Exterior derivative of `Σ G_ab i ds_a∧ds̄_b` on the parameter grid, at
/// points two rings inside the sample.
fn closedness(family: &BundleFamily, sample: &ModuliFormSample) -> Result<f64> {
    let g = &family.params;
    let m = sample.m;
    let mut field: Vec<Option<DMatrix<Complex64>>> = vec![None; g.len()];
    for p in &sample.points {
        field[p.index] = Some(p.matrix());
    }
    let deriv = |idx: usize, c_: usize, a: usize, b: usize| -> Option<Complex64> {
        let mut du = Complex64::new(0.0, 0.0);
        let mut dv = Complex64::new(0.0, 0.0);
        for (k, w) in D1.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let ju = g.shifted(idx, 2 * c_, k as i64 - 2);
            let jv = g.shifted(idx, 2 * c_ + 1, k as i64 - 2);
            du += field[ju].as_ref()?[(a, b)] * (w / g.h);
            dv += field[jv].as_ref()?[(a, b)] * (w / g.h);
        }
        Some((du - I * dv) * 0.5)
    };
    let mut res: f64 = 0.0;
    let mut count = 0;
    for idx in (0..g.len()).filter(|&i| g.is_interior(i, 4)) {
        for a in 0..m {
            for b in 0..m {
                for c_ in 0..m {
                    let (Some(x), Some(y)) = (deriv(idx, c_, a, b), deriv(idx, a, c_, b)) else {
                        continue;
                    };
                    res = res.max((x - y).norm());
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::ShapeMismatch(
            "parameter grid too small for the closedness stencil (need at least 9 points per direction)".into(),
        ));
    }
    Ok(res)
}

/// `‖∂_{s_a} α‖_{L²(X)}` in the metric `h(s)`.
pub fn kodaira_spencer_norm(family: &BundleFamily, idx: usize, a: usize) -> Result<f64> {
    if !family.params.is_interior(idx, 2) {
        return Err(Error::BoundaryParameter(format!("{:?}", family.params.point(idx))));
    }
    let dq = family.stencils().ds(&family.q, idx, a, false);
    let dens = crate::bundle::h_norm_sq(&dq, &family.h[idx]);
    Ok(family.integral(&dens).re.max(0.0).sqrt())
}

/// `‖K_{s_a z̄}‖_{L²(X)}`: the Kodaira–Spencer representative corrected by
/// the metric variation, harmonic when `h(s)` is HE.
pub fn harmonic_kodaira_spencer_norm(family: &BundleFamily, idx: usize, a: usize) -> Result<f64> {
    let k = total_curvature(family, idx)?;
    let dens = crate::bundle::h_norm_sq(&k.mixed_sz[a], &family.h[idx]);
    Ok(family.integral(&dens).re.max(0.0).sqrt())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChernCharacterReport {
    /// `None` where `ω^SB` vanishes.
    pub ratios: Vec<Option<f64>>,
    pub mean_ratio: Option<f64>,
    /// `max − min` of the defined ratios.
    pub deviation: Option<f64>,
}

/// Ratio of the fiber-integrated `(1,1)`-part of the degree-4 term of
/// `r² − ch(End E)` to `ω^SB`, pointwise on the one-parameter sample.
pub fn chern_character_leading_check(family: &BundleFamily) -> Result<ChernCharacterReport> {
    if family.params.m != 1 {
        return Err(Error::Unsupported("the leading-term check is implemented for one-parameter families".into()));
    }
    let r = family.bundle.rank() as f64;
    let ratios: Vec<Option<f64>> = family
        .interior()
        .par_iter()
        .map(|&idx| -> Result<Option<f64>> {
            let k = total_curvature(family, idx)?;
            let g = moduli_matrix(family, &k, false)[(0, 0)];
            let g_tr = moduli_matrix(family, &k, true)[(0, 0)];
            // (r² − ch)₄ = (1/4π²)(r tr K∧K − trK∧trK) and tr(iK∧iK) = −tr(K∧K)
            let num = -(g * r - g_tr) / (4.0 * PI * PI);
            let scale = family.integral(&vec![c(1.0); family.bundle.npoints()]).re;
            Ok(if g.norm() < 1e-12 * scale { None } else { Some((num / g).re) })
        })
        .collect::<Result<_>>()?;
    let defined: Vec<f64> = ratios.iter().flatten().copied().collect();
    let (mean_ratio, deviation) = if defined.is_empty() {
        (None, None)
    } else {
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (Some(mean), Some(hi - lo))
    };
    Ok(ChernCharacterReport {
        ratios,
        mean_ratio,
        deviation,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PotentialFit {
    pub degree: usize,
    pub coefficients: Vec<f64>,
    /// `max |∂_a∂̄_b φ − G_ab|` over the sample.
    pub max_error: f64,
    pub relative_error: f64,
}

fn monomials(dims: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(d: usize, left: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if d == 0 {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur.push(e as u32);
            rec(d - 1, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(dims, degree, &mut Vec::new(), &mut out);
    out
}

/// Real-coordinate derivative of a monomial in scaled coordinates.
fn mono_d(e: &[u32], x: &[f64], d1: usize, d2: usize) -> f64 {
    let mut e = e.to_vec();
    let mut coef = 1.0;
    for d in [d1, d2] {
        if e[d] == 0 {
            return 0.0;
        }
        coef *= e[d] as f64;
        e[d] -= 1;
    }
    coef * e.iter().zip(x).map(|(&p, &v)| v.powi(p as i32)).product::<f64>()
}

/// Least-squares real polynomial potential `φ` with `∂_a∂̄_b φ = G_ab` on
/// the sample: the local `∂∂̄`-potential surrogate.
pub fn ddbar_potential(sample: &ModuliFormSample, degree: usize) -> Result<PotentialFit> {
    if sample.points.is_empty() {
        return Err(Error::ShapeMismatch("empty moduli form sample".into()));
    }
    let m = sample.m;
    let dims = 2 * m;
    let coords: Vec<Vec<f64>> = sample
        .points
        .iter()
        .map(|p| p.s.iter().flat_map(|z| [z[0], z[1]]).collect())
        .collect();
    let center: Vec<f64> = (0..dims)
        .map(|d| coords.iter().map(|x| x[d]).sum::<f64>() / coords.len() as f64)
        .collect();
    let scale = coords
        .iter()
        .flat_map(|x| x.iter().zip(&center).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
        .max(1e-12);
    let basis = monomials(dims, degree);
    let rows = sample.points.len() * m * m * 2;
    let mut a_mat = DMatrix::<f64>::zeros(rows, basis.len());
    let mut rhs = DVector::<f64>::zeros(rows);
    let mut row = 0;
    for (p, x) in sample.points.iter().zip(&coords) {
        let xs: Vec<f64> = x.iter().zip(&center).map(|(a, b)| (a - b) / scale).collect();
        let g = p.matrix();
        for a in 0..m {
            for b in 0..m {
                let (ua, va, ub, vb) = (2 * a, 2 * a + 1, 2 * b, 2 * b + 1);
                for (k, e) in basis.iter().enumerate() {
                    let re = mono_d(e, &xs, ua, ub) + mono_d(e, &xs, va, vb);
                    let im = mono_d(e, &xs, ua, vb) - mono_d(e, &xs, va, ub);
                    a_mat[(row, k)] = 0.25 * re / (scale * scale);
                    a_mat[(row + 1, k)] = 0.25 * im / (scale * scale);
                }
                rhs[row] = g[(a, b)].re;
                rhs[row + 1] = g[(a, b)].im;
                row += 2;
            }
        }
    }
    let sol = a_mat
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-13)
        .map_err(|e| Error::NonFinite(format!("potential least squares: {e}")))?;
    let fit = &a_mat * &sol;
    let max_error = (&fit - &rhs).iter().map(|v| v.abs()).fold(0.0, f64::max);
    let gmax = rhs.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    Ok(PotentialFit {
        degree,
        coefficients: sol.iter().copied().collect(),
        max_error,
        relative_error: max_error / gmax,
    })
}

/// Closed-form `G` of the Jacobian family: `4·I[1] = 8π·area`.
pub fn jacobian_constant(family: &BundleFamily) -> f64 {
    4.0 * family.integral(&vec![c(1.0); family.bundle.npoints()]).re
}

pub fn write_moduli_csv(sample: &ModuliFormSample, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let m = sample.m;
    let mut header = vec!["index".to_string()];
    for a in 1..=m {
        header.push(format!("s{a}_re"));
        header.push(format!("s{a}_im"));
    }
    for a in 1..=m {
        for b in 1..=m {
            header.push(format!("g{a}{b}_re"));
            header.push(format!("g{a}{b}_im"));
        }
    }
    w.write_record(&header)?;
    for p in &sample.points {
        let mut row = vec![p.index.to_string()];
        row.extend(p.s.iter().flat_map(|z| [format!("{:e}", z[0]), format!("{:e}", z[1])]));
        row.extend(p.g.iter().flat_map(|z| [format!("{:e}", z[0]), format!("{:e}", z[1])]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: FamilyKind) -> FamilyConfig {
        FamilyConfig {
            param_points: 5,
            grid: [8, 8],
            ..FamilyConfig::new(kind)
        }
    }

    #[test]
    fn snake_order_visits_every_point_through_neighbors() {
        let g = ParamGrid {
            m: 2,
            n: 3,
            h: 0.1,
            center: vec![Complex64::new(0.0, 0.0); 2],
        };
        let order = g.snake();
        let mut seen = order.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..g.len()).collect::<Vec<_>>());
        for w in order.windows(2) {
            let (a, b) = (g.multi(w[0]), g.multi(w[1]));
            let dist: usize = a.iter().zip(&b).map(|(x, y)| x.abs_diff(*y)).sum();
            assert_eq!(dist, 1);
        }
    }

    #[test]
    fn jacobian_family_curvature_blocks() {
        let fam = build_family(&small(FamilyKind::Jacobian)).unwrap();
        let mid = fam.params.len() / 2;
        let k = total_curvature(&fam, mid).unwrap();
        assert!(k.fiber.max_norm() < 1e-12);
        assert!(k.pure[0].max_norm() < 1e-12);
        for v in &k.mixed_sz[0].entries[0] {
            assert!((v - 1.0).norm() < 1e-10);
        }
        for v in &k.mixed_zs[0].entries[0] {
            assert!((v - 1.0).norm() < 1e-10);
        }
        assert!(matches!(total_curvature(&fam, 0), Err(Error::BoundaryParameter(_))));
    }

    #[test]
    fn constant_family_has_zero_form() {
        let fam = build_family(&small(FamilyKind::Constant { value: [0.3, -0.2] })).unwrap();
        let s = moduli_form(&fam).unwrap();
        assert!(s.max_entry() < 1e-10);
        let ch = chern_character_leading_check(&fam).unwrap();
        assert!(ch.mean_ratio.is_none());
        let mid = fam.params.len() / 2;
        assert!(kodaira_spencer_norm(&fam, mid, 0).unwrap() < 1e-12);
    }

    #[test]
    fn monomial_count() {
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(4, 3).len(), 35);
    }
}
