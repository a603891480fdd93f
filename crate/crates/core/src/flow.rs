//! Hermite–Einstein heat flow on the base slice.
//!
//! The metric evolves by `∂_t H = σ·H·M` with `M = iΛK − λ` (trace-free part
//! under `det_normalize`). `H·M` is hermitian whenever `H` is, so the flow
//! stays in hermitian matrices up to round-off, which is removed by
//! symmetrizing after every step. `σ = −1` is the descending convention.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bundle::{einstein_constant, h_norm_sq, HermitianMetric, HolomorphicStructure, SasakianBundle};
use crate::error::{Error, Result};
use crate::slicemat::{min_eigenvalue, real_eigenvalues_at, SliceMat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Stepper {
    Euler,
    #[default]
    RK4,
}

impl Stepper {
    /// Extent of the stability region along the negative real axis.
    fn stability_limit(self) -> f64 {
        match self {
            Stepper::Euler => 2.0,
            Stepper::RK4 => 2.785,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    #[default]
    Descending,
    PaperLiteral,
}

impl SignConvention {
    fn sigma(self) -> f64 {
        match self {
            SignConvention::Descending => -1.0,
            SignConvention::PaperLiteral => 1.0,
        }
    }
}

fn default_max_steps() -> usize {
    20_000
}
fn default_tol() -> f64 {
    1e-6
}
fn default_window() -> usize {
    100
}
fn default_gap_factor() -> f64 {
    10.0
}
fn default_slack() -> f64 {
    1e-10
}

/// Flow parameters. A missing `dt` is filled from the Laplacian estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_tol")]
    pub stop_sup_tol: f64,
    #[serde(default)]
    pub stepper: Stepper,
    #[serde(default)]
    pub det_normalize: bool,
    #[serde(default)]
    pub sign_convention: SignConvention,
    #[serde(default = "default_window")]
    pub split_window: usize,
    #[serde(default = "default_gap_factor")]
    pub split_gap_factor: f64,
    #[serde(default = "default_slack")]
    pub monotonicity_slack: f64,
    /// Re-choose `dt` from the linearized radius at the current metric
    /// every [`ADAPT_EVERY`] steps. Set by [`FlowConfig::resolve`] when `dt`
    /// is left automatic.
    #[serde(default)]
    pub adaptive_dt: bool,
}

/// Steps between radius re-estimates of an adaptive run.
pub const ADAPT_EVERY: usize = 50;

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dt: None,
            max_steps: default_max_steps(),
            stop_sup_tol: default_tol(),
            stepper: Stepper::RK4,
            det_normalize: false,
            sign_convention: SignConvention::Descending,
            split_window: default_window(),
            split_gap_factor: default_gap_factor(),
            monotonicity_slack: default_slack(),
            adaptive_dt: false,
        }
    }
}

/// Upper bound for the spectral radius of the linearized right-hand side:
/// the largest `∂_z∂_z̄` symbol, raised by power iteration on every twist
/// that occurs in `End E`.
pub fn laplacian_estimate(bundle: &SasakianBundle) -> f64 {
    let t = bundle.torus();
    let mut rho = t.laplacian_symbol_max();
    let mut twists: Vec<i64> = bundle
        .degrees
        .iter()
        .flat_map(|a| bundle.degrees.iter().map(move |b| a - b))
        .filter(|&m| m != 0)
        .collect();
    twists.sort_unstable();
    twists.dedup();
    for m in twists {
        rho = rho.max(1.05 * t.laplacian_norm(m, 60));
    }
    rho
}

impl FlowConfig {
    /// Fills in `dt` and checks `dt·ρ/limit < 1` and positive tolerances.
    pub fn resolve(&self, bundle: &SasakianBundle) -> Result<Self> {
        let mut cfg = self.clone();
        if !(cfg.stop_sup_tol > 0.0) {
            return Err(Error::config("stop_sup_tol", "must be positive"));
        }
        if !(cfg.monotonicity_slack >= 0.0) {
            return Err(Error::config("monotonicity_slack", "must be non-negative"));
        }
        if cfg.split_window == 0 || !(cfg.split_gap_factor > 0.0) {
            return Err(Error::config("split_window", "window and gap factor must be positive"));
        }
        let rho = laplacian_estimate(bundle);
        let limit = cfg.stepper.stability_limit();
        let dt = match cfg.dt {
            Some(dt) if !(dt > 0.0) => return Err(Error::config("dt", "must be positive")),
            Some(dt) => dt,
            None => {
                cfg.adaptive_dt = true;
                0.8 * limit / rho
            }
        };
        if dt * rho / limit >= 1.0 {
            return Err(Error::config(
                "dt",
                format!("dt = {dt:e} exceeds the explicit stability bound {:e}", limit / rho),
            ));
        }
        cfg.dt = Some(dt);
        Ok(cfg)
    }

    /// As [`FlowConfig::resolve`], but an automatic `dt` also respects the
    /// linearized flow of this structure at `h0`. Its `α` terms, and a
    /// badly conditioned `H`, push the spectral radius past the Laplacian
    /// bound.
    pub fn resolve_for(&self, d: &HolomorphicStructure, h0: &HermitianMetric) -> Result<Self> {
        let mut cfg = self.resolve(&d.bundle)?;
        if self.dt.is_none() {
            cfg.dt = Some(RadiusTracker::new(d, h0)?.safe_dt(d, h0, &cfg, 40)?);
        }
        Ok(cfg)
    }

    pub fn dt(&self) -> f64 {
        self.dt.expect("resolved config")
    }
}

/// Spectral radius of the linearized right-hand side at `h`, by power
/// iteration on central differences from a pointwise random start.
pub fn linearized_radius(d: &HolomorphicStructure, h: &HermitianMetric, cfg: &FlowConfig, iterations: usize) -> Result<f64> {
    RadiusTracker::new(d, h)?.radius(d, h, cfg, iterations)
}

/// Power iteration state carried along a run, so that re-estimates start
/// from the previous dominant direction.
struct RadiusTracker {
    v: SliceMat,
    fixed: Fixed,
    lambda: f64,
    laplacian: f64,
}

impl RadiusTracker {
    fn new(d: &HolomorphicStructure, h: &HermitianMetric) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
        let mut v = h.h.scale_re(0.0);
        for e in v.entries.iter_mut() {
            for x in e.iter_mut() {
                *x = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        Ok(Self {
            v: v.hermitize().drop_nyquist(d.bundle.torus()),
            fixed: Fixed::new(d)?,
            lambda: einstein_constant(d, h)?,
            laplacian: laplacian_estimate(&d.bundle),
        })
    }

    fn radius(&mut self, d: &HolomorphicStructure, h: &HermitianMetric, cfg: &FlowConfig, iterations: usize) -> Result<f64> {
        let t = d.bundle.torus();
        let delta = 1e-6 * h.h.max_norm().max(1.0);
        let mut log_growth = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let nv = self.v.max_norm();
            if !(nv > 0.0) {
                break;
            }
            let v = self.v.scale_re(1.0 / nv);
            let plus = velocity(&self.fixed, d, &h.h.add(&v.scale_re(delta)), self.lambda, cfg)?;
            let minus = velocity(&self.fixed, d, &h.h.sub(&v.scale_re(delta)), self.lambda, cfg)?;
            self.v = plus.sub(&minus).scale_re(0.5 / delta).drop_nyquist(t);
            log_growth.push(self.v.max_norm().ln());
        }
        // complex pairs make single ratios oscillate; average the tail
        let tail = &log_growth[log_growth.len() / 2..];
        if tail.is_empty() {
            return Ok(0.0);
        }
        Ok((tail.iter().sum::<f64>() / tail.len() as f64).exp())
    }

    /// `0.8·limit/ρ` with `ρ` the larger of the Laplacian bound and 1.05
    /// times the measured radius.
    fn safe_dt(&mut self, d: &HolomorphicStructure, h: &HermitianMetric, cfg: &FlowConfig, iterations: usize) -> Result<f64> {
        let rho = (1.05 * self.radius(d, h, cfg, iterations)?).max(self.laplacian);
        Ok(0.8 * cfg.stepper.stability_limit() / rho)
    }
}

/// Per-step diagnostics of one flow state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowDiagnostics {
    pub step: usize,
    pub t: f64,
    pub sup_residual: f64,
    pub energy: f64,
    pub min_eig_h: f64,
    /// Spatial means of the sorted eigenvalues of `iΛK`.
    pub eig_means: Vec<f64>,
    /// Largest deviation of a sorted eigenvalue from its spatial mean.
    pub eig_spread: f64,
    /// Sorted eigenvalues of `iΛK` at the probe points.
    pub probe_eigs: Vec<Vec<f64>>,
}

impl FlowDiagnostics {
    fn is_finite(&self) -> bool {
        self.sup_residual.is_finite()
            && self.energy.is_finite()
            && self.min_eig_h.is_finite()
            && self.eig_means.iter().all(|v| v.is_finite())
    }

    /// Smallest separation between consecutive mean eigenvalues.
    pub fn eig_gap(&self) -> f64 {
        self.eig_means
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug)]
pub struct FlowState {
    pub h: HermitianMetric,
    pub t: f64,
    pub step: usize,
    pub lambda: f64,
    pub history: Vec<FlowDiagnostics>,
    /// The state before the last step, kept for the energy identity.
    pub previous: Option<(HermitianMetric, f64)>,
}

/// Curvature pieces that do not depend on `H`.
struct Fixed {
    q: SliceMat,
    q_adj: SliceMat,
    k_static: SliceMat,
}

impl Fixed {
    fn new(d: &HolomorphicStructure) -> Result<Self> {
        let q = d.q_slice()?;
        let t = d.bundle.torus();
        let k_static = d.bundle.reference_curvature().add(&q.d_z(t));
        Ok(Self {
            q_adj: q.adjoint(),
            q,
            k_static,
        })
    }

    /// `(P, K_zz̄)` at `H` without the positivity scan.
    fn connection_curvature(&self, d: &HolomorphicStructure, h: &SliceMat) -> Result<(SliceMat, SliceMat)> {
        let t = d.bundle.torus();
        let p = h.inverse()?.mul(&h.d_z(t).sub(&self.q_adj.mul(h)));
        let comm = p.mul(&self.q).sub(&self.q.mul(&p));
        let k = self.k_static.sub(&p.d_zbar(t)).add(&comm);
        if !k.is_finite() {
            return Err(Error::NonFinite("curvature along the flow".into()));
        }
        Ok((p, k))
    }

    fn residual(&self, d: &HolomorphicStructure, h: &SliceMat, lambda: f64) -> Result<(SliceMat, SliceMat)> {
        let (p, k) = self.connection_curvature(d, h)?;
        let n = h.npoints();
        Ok((p, k.sub(&SliceMat::scalar(&d.bundle.degrees, n, Complex64::new(lambda, 0.0)))))
    }
}

fn trace_free(m: &SliceMat) -> SliceMat {
    let r = m.nrows() as f64;
    let tr = m.trace();
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for (v, t) in out.entry_mut(i, i).iter_mut().zip(&tr) {
            *v -= t / r;
        }
    }
    out
}

fn probe_points(bundle: &SasakianBundle) -> Vec<usize> {
    let t = bundle.torus();
    [(0.0, 0.0), (0.25, 0.5), (0.5, 0.25), (0.75, 0.75)]
        .iter()
        .map(|&(x, y)| t.idx((x * t.nx as f64) as usize, (y * t.ny as f64) as usize))
        .collect()
}

fn sorted_eigs(m: &SliceMat, h: &SliceMat, p: usize) -> Vec<f64> {
    let mut e = real_eigenvalues_at(m, h, p).unwrap_or_else(|| vec![f64::NAN; m.nrows()]);
    e.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    e
}

fn min_eig_h(h: &SliceMat) -> f64 {
    (0..h.npoints())
        .map(|p| match h.nrows() {
            1 => h.entries[0][p].re,
            2 => {
                let (a, b, d) = (h.entries[0][p].re, h.entries[1][p], h.entries[3][p].re);
                0.5 * (a + d) - (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt()
            }
            _ => min_eigenvalue(&h.at(p)),
        })
        .fold(f64::INFINITY, f64::min)
}

fn diagnostics(bundle: &SasakianBundle, m: &SliceMat, h: &SliceMat, step: usize, t: f64) -> FlowDiagnostics {
    let n = h.npoints();
    let r = m.nrows();
    let eigs: Vec<Vec<f64>> = (0..n).map(|p| sorted_eigs(m, h, p)).collect();
    let sup_residual = eigs
        .iter()
        .flat_map(|e| e.iter().map(|v| v.abs()))
        .fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
    let mut eig_means = vec![0.0; r];
    for e in &eigs {
        for (acc, v) in eig_means.iter_mut().zip(e) {
            *acc += v / n as f64;
        }
    }
    let eig_spread = eigs
        .iter()
        .flat_map(|e| e.iter().zip(&eig_means).map(|(v, mu)| (v - mu).abs()))
        .fold(0.0, f64::max);
    let energy = bundle.integrate_slice(&h_norm_sq(m, h)).re;
    let probe_eigs = probe_points(bundle).into_iter().map(|p| eigs[p].clone()).collect();
    FlowDiagnostics {
        step,
        t,
        sup_residual,
        energy,
        min_eig_h: min_eig_h(h),
        eig_means,
        eig_spread,
        probe_eigs,
    }
}

impl FlowState {
    /// Validates `h0` and records the initial diagnostics; `λ` is computed
    /// once from the curvature of `h0` (the degree is metric independent).
    pub fn new(d: &HolomorphicStructure, h0: &HermitianMetric) -> Result<Self> {
        h0.validate()?;
        let lambda = einstein_constant(d, h0)?;
        let fixed = Fixed::new(d)?;
        let (_, m) = fixed.residual(d, &h0.h, lambda)?;
        let diag = diagnostics(&d.bundle, &m, &h0.h, 0, 0.0);
        Ok(Self {
            h: h0.clone(),
            t: 0.0,
            step: 0,
            lambda,
            history: vec![diag],
            previous: None,
        })
    }

    pub fn last(&self) -> &FlowDiagnostics {
        self.history.last().expect("history starts non-empty")
    }
}

fn velocity(fixed: &Fixed, d: &HolomorphicStructure, h: &SliceMat, lambda: f64, cfg: &FlowConfig) -> Result<SliceMat> {
    let (_, m) = fixed.residual(d, h, lambda)?;
    let m = if cfg.det_normalize { trace_free(&m) } else { m };
    Ok(h.mul(&m).scale_re(cfg.sign_convention.sigma()))
}

fn advance(fixed: &Fixed, d: &HolomorphicStructure, h: &SliceMat, lambda: f64, cfg: &FlowConfig) -> Result<SliceMat> {
    let dt = cfg.dt();
    let f = |x: &SliceMat| velocity(fixed, d, x, lambda, cfg);
    let next = match cfg.stepper {
        Stepper::Euler => h.add(&f(h)?.scale_re(dt)),
        Stepper::RK4 => {
            let k1 = f(h)?;
            let k2 = f(&h.add(&k1.scale_re(0.5 * dt)))?;
            let k3 = f(&h.add(&k2.scale_re(0.5 * dt)))?;
            let k4 = f(&h.add(&k3.scale_re(dt)))?;
            let incr = k1.add(&k2.scale_re(2.0)).add(&k3.scale_re(2.0)).add(&k4);
            h.add(&incr.scale_re(dt / 6.0))
        }
    };
    // the Nyquist modes are invisible to the spectral derivatives, hence
    // undamped; left alone they are seeded by round-off and grow slowly
    Ok(next.drop_nyquist(d.bundle.torus()).hermitize())
}

/// Rescales `H` pointwise so that `det H` equals the target.
fn restore_det(h: &SliceMat, target: &[Complex64]) -> SliceMat {
    let r = h.nrows() as f64;
    let det = h.det();
    let mut out = h.clone();
    for e in out.entries.iter_mut() {
        for ((v, d), t) in e.iter_mut().zip(&det).zip(target) {
            *v *= (t.re / d.re).powf(1.0 / r);
        }
    }
    out
}

/// One step of the flow; aborts on positivity loss or on an energy increase
/// under the descending convention.
pub fn flow_step(state: &FlowState, d: &HolomorphicStructure, cfg: &FlowConfig) -> Result<FlowState> {
    let cfg = if cfg.dt.is_some() { cfg.clone() } else { cfg.resolve(&d.bundle)? };
    let fixed = Fixed::new(d)?;
    step_with(state, d, &cfg, &fixed)
}

fn step_with(state: &FlowState, d: &HolomorphicStructure, cfg: &FlowConfig, fixed: &Fixed) -> Result<FlowState> {
    let dt = cfg.dt();
    let mut h = advance(fixed, d, &state.h.h, state.lambda, cfg)?;
    if cfg.det_normalize {
        h = restore_det(&h, &state.h.h.det());
    }
    if !h.is_finite() {
        return Err(Error::NonFinite(format!("metric at step {}", state.step + 1)));
    }
    let (_, m) = fixed.residual(d, &h, state.lambda)?;
    let diag = diagnostics(&d.bundle, &m, &h, state.step + 1, state.t + dt);
    if !(diag.min_eig_h > 0.0) {
        let p = (0..h.npoints())
            .find(|&p| !(min_eigenvalue(&h.at(p)) > 0.0))
            .unwrap_or(0);
        return Err(Error::NotPositive {
            index: p,
            min_eig: diag.min_eig_h,
        });
    }
    if !diag.is_finite() {
        return Err(Error::NonFinite(format!("diagnostics at step {}", state.step + 1)));
    }
    let prev_energy = state.last().energy;
    if cfg.sign_convention == SignConvention::Descending && diag.energy > prev_energy * (1.0 + 1e-6) + 1e-12 {
        return Err(Error::Unstable(format!(
            "energy rose from {prev_energy:e} to {:e} at step {}; reduce dt (currently {dt:e})",
            diag.energy,
            state.step + 1
        )));
    }
    let mut history = state.history.clone();
    history.push(diag);
    Ok(FlowState {
        h: HermitianMetric { h },
        t: state.t + dt,
        step: state.step + 1,
        lambda: state.lambda,
        history,
        previous: Some((state.h.clone(), state.t)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowVerdict {
    Converged,
    SplitLimit,
    BudgetExhausted,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonotonicityAudit {
    pub slack: f64,
    pub sup_violations: usize,
    pub energy_violations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowReport {
    pub verdict: FlowVerdict,
    pub steps: usize,
    pub t_final: f64,
    /// Initial step; adaptive runs may shrink it down to `dt_min`.
    pub dt: f64,
    pub dt_min: f64,
    pub lambda: f64,
    pub final_sup_residual: f64,
    pub final_energy: f64,
    pub final_min_eig_h: f64,
    pub final_eig_means: Vec<f64>,
    pub audit: MonotonicityAudit,
    pub config: FlowConfig,
}

pub struct FlowRun {
    pub report: FlowReport,
    pub state: FlowState,
}

/// Counts steps where the sup residual or the energy rose by more than the
/// slack.
pub fn audit(history: &[FlowDiagnostics], slack: f64) -> MonotonicityAudit {
    let mut a = MonotonicityAudit {
        slack,
        sup_violations: 0,
        energy_violations: 0,
    };
    for w in history.windows(2) {
        if w[1].sup_residual > w[0].sup_residual + slack {
            a.sup_violations += 1;
        }
        if w[1].energy > w[0].energy + slack {
            a.energy_violations += 1;
        }
    }
    a
}

/// Split signature: the eigenvalue clusters of `iΛK` are separated by more
/// than `gap_factor` times their spatial spread while the sup residual has
/// stopped moving (relative change below 1e-6 per step).
fn looks_split(prev: &FlowDiagnostics, cur: &FlowDiagnostics, gap_factor: f64) -> bool {
    if cur.eig_means.len() < 2 {
        return false;
    }
    let stalled = (prev.sup_residual - cur.sup_residual).abs() <= 1e-6 * cur.sup_residual.max(1e-300);
    cur.eig_gap() > gap_factor * cur.eig_spread && stalled
}

pub fn run_flow(d: &HolomorphicStructure, h0: &HermitianMetric, cfg: &FlowConfig) -> Result<FlowRun> {
    let mut cfg = cfg.resolve_for(d, h0)?;
    let dt_initial = cfg.dt();
    let mut dt_min = dt_initial;
    let fixed = Fixed::new(d)?;
    let mut tracker = RadiusTracker::new(d, h0)?;
    let mut state = FlowState::new(d, h0)?;
    let mut streak = 0usize;
    let mut verdict = FlowVerdict::BudgetExhausted;
    loop {
        if state.last().sup_residual < cfg.stop_sup_tol {
            verdict = FlowVerdict::Converged;
            break;
        }
        if streak >= cfg.split_window {
            verdict = FlowVerdict::SplitLimit;
            break;
        }
        if state.step >= cfg.max_steps {
            break;
        }
        if cfg.adaptive_dt && state.step > 0 && state.step % ADAPT_EVERY == 0 {
            cfg.dt = Some(tracker.safe_dt(d, &state.h, &cfg, 10)?);
            dt_min = dt_min.min(cfg.dt());
        }
        state = step_with(&state, d, &cfg, &fixed)?;
        let n = state.history.len();
        streak = if looks_split(&state.history[n - 2], &state.history[n - 1], cfg.split_gap_factor) {
            streak + 1
        } else {
            0
        };
    }
    let last = state.last().clone();
    let report = FlowReport {
        verdict,
        steps: state.step,
        t_final: state.t,
        dt: dt_initial,
        dt_min,
        lambda: state.lambda,
        final_sup_residual: last.sup_residual,
        final_energy: last.energy,
        final_min_eig_h: last.min_eig_h,
        final_eig_means: last.eig_means.clone(),
        audit: audit(&state.history, cfg.monotonicity_slack),
        config: cfg,
    };
    Ok(FlowRun { report, state })
}

/// `∫_X |∇_F M|²_H` with `∇_z M = ∂_z M + [P, M]`, `∇_z̄ M = ∂_z̄ M + [Q, M]`.
pub fn gradient_energy(d: &HolomorphicStructure, h: &HermitianMetric, lambda: f64) -> Result<f64> {
    let fixed = Fixed::new(d)?;
    let (p, m) = fixed.residual(d, &h.h, lambda)?;
    let t = d.bundle.torus();
    let (mz, mzb) = m.d_z_zbar(t);
    let nz = mz.add(&p.mul(&m)).sub(&m.mul(&p));
    let nzb = mzb.add(&fixed.q.mul(&m)).sub(&m.mul(&fixed.q));
    let hi = h.h.inverse()?;
    let sq = |a: &SliceMat| a.mul(&hi).mul(&a.adjoint()).mul(&h.h).trace();
    let dens: Vec<Complex64> = sq(&nz).iter().zip(sq(&nzb)).map(|(a, b)| a + b).collect();
    Ok(d.bundle.integrate_slice(&dens).re)
}

/// `|dE/dt + ∫|∇_F M|²|` from the last two states: forward difference of the
/// energy against the trapezoidal average of the gradient term.
pub fn energy_identity_residual(state: &FlowState, d: &HolomorphicStructure) -> Result<f64> {
    let (prev_h, prev_t) = state
        .previous
        .as_ref()
        .ok_or_else(|| Error::InsufficientHistory("energy identity needs two consecutive states".into()))?;
    let n = state.history.len();
    if n < 2 {
        return Err(Error::InsufficientHistory("energy identity needs two diagnostics".into()));
    }
    let dt = state.t - prev_t;
    let de = (state.history[n - 1].energy - state.history[n - 2].energy) / dt;
    let g0 = gradient_energy(d, prev_h, state.lambda)?;
    let g1 = gradient_energy(d, &state.h, state.lambda)?;
    Ok((de + 0.5 * (g0 + g1)).abs())
}

/// Conjugates the holomorphic structure and metric by a constant unitary:
/// `Q ↦ UQU†`, `H ↦ UHU†`. Only mixes components of equal degree.
pub fn gauge_transform(
    d: &HolomorphicStructure,
    h: &HermitianMetric,
    u: &nalgebra::DMatrix<Complex64>,
) -> Result<(HolomorphicStructure, HermitianMetric)> {
    let deg = &d.bundle.degrees;
    let r = deg.len();
    for i in 0..r {
        for j in 0..r {
            if deg[i] != deg[j] && u[(i, j)].norm() > 1e-14 {
                return Err(Error::ShapeMismatch("gauge mixes components of different degree".into()));
            }
        }
    }
    let n = d.bundle.npoints();
    let um = SliceMat::from_points(deg, deg, n, |_| u.clone());
    let q = um.mul(&d.q_slice()?).mul(&um.adjoint());
    let hh = um.mul(&h.h).mul(&um.adjoint()).hermitize();
    Ok((HolomorphicStructure::from_q(&d.bundle, &q)?, HermitianMetric::new(hh)?))
}

/// Eigenvalues the split flow approaches: the per-summand Einstein
/// constants `2π·deg O(k_i) / vol`.
pub fn blockwise_constants(bundle: &SasakianBundle) -> Result<Vec<f64>> {
    let vol = bundle.volume()?;
    let mut v: Vec<f64> = bundle
        .degrees
        .iter()
        .map(|&k| 2.0 * PI * (2.0 * PI * k as f64) / vol)
        .collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(v)
}

pub fn write_trace_csv(history: &[FlowDiagnostics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let r = history.first().map_or(0, |h| h.eig_means.len());
    let mut header = vec!["step".to_string(), "t".into(), "sup_residual".into(), "energy".into(), "min_eig_H".into()];
    header.extend((1..=r).map(|i| format!("eig_{i}")));
    w.write_record(&header)?;
    for d in history {
        let mut row = vec![
            d.step.to_string(),
            format!("{:e}", d.t),
            format!("{:e}", d.sup_residual),
            format!("{:e}", d.energy),
            format!("{:e}", d.min_eig_h),
        ];
        row.extend(d.eig_means.iter().map(|v| format!("{v:e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, BaseManifold, GridSpec};

    fn line(n: usize, k: i64) -> HolomorphicStructure {
        let g = make_grid(BaseManifold::flat_torus(Complex64::new(0.0, 1.0), 1), GridSpec::torus(n, n, 8)).unwrap();
        HolomorphicStructure::reference(&SasakianBundle::new(&g, &[k]).unwrap())
    }

    fn bumped(d: &HolomorphicStructure, amp: f64) -> HermitianMetric {
        let t = d.bundle.torus();
        let u: Vec<f64> = t.from_fn(|x, _| Complex64::new(amp * (2.0 * PI * x).sin(), 0.0)).iter().map(|v| v.re).collect();
        d.bundle.reference_metric().conformal(&u)
    }

    #[test]
    fn reference_metric_is_a_fixed_point() {
        let d = line(16, 1);
        let h0 = d.bundle.reference_metric();
        let s0 = FlowState::new(&d, &h0).unwrap();
        let s1 = flow_step(&s0, &d, &FlowConfig::default()).unwrap();
        assert!(s1.h.h.sub(&h0.h).max_norm() < 1e-12);
    }

    #[test]
    fn sign_conventions_move_the_residual_in_opposite_directions() {
        let d = line(16, 1);
        let h0 = bumped(&d, 0.1);
        let s0 = FlowState::new(&d, &h0).unwrap();
        let down = flow_step(&s0, &d, &FlowConfig::default()).unwrap();
        assert!(down.last().sup_residual < s0.last().sup_residual);
        let cfg = FlowConfig {
            sign_convention: SignConvention::PaperLiteral,
            ..FlowConfig::default()
        };
        let up = flow_step(&s0, &d, &cfg).unwrap();
        assert!(up.last().sup_residual > s0.last().sup_residual);
    }

    #[test]
    fn config_rejects_unstable_dt() {
        let d = line(16, 0);
        let cfg = FlowConfig {
            dt: Some(1.0),
            ..FlowConfig::default()
        };
        assert!(matches!(cfg.resolve(&d.bundle), Err(Error::Config { .. })));
    }
}
