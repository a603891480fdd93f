use sasaki::bundle::{
    curvature_partial, he_residual, leibniz_residual, partial_commutator_residual, HermitianMetric,
    HolomorphicStructure, SasakianBundle,
};
use sasaki::cli::{family_preset, fit_order};
use sasaki::family::{build_family, moduli_form, Exponent, FamilyConfig, FamilyKind, Reparam};
use sasaki::flow::{run_flow, FlowConfig, FlowVerdict};
use sasaki::grid::{make_grid, BaseManifold, Field, GridHandle, GridSpec};
use sasaki::structure::{boothby_wang, check_lemma_domega, verify_sasakian};
use sasaki::Complex64;
use std::f64::consts::PI;

fn torus(n: usize) -> GridHandle {
    make_grid(BaseManifold::flat_torus(Complex64::new(0.0, 1.0), 1), GridSpec::torus(n, n, 8)).unwrap()
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

#[test]
fn spectral_twisted_derivative_matches_finite_differences() {
    // the stencil version converges algebraically to the spectral one
    let mut errs = Vec::new();
    let mut hs = Vec::new();
    for n in [16, 24, 32, 48] {
        let g = torus(n);
        let b = SasakianBundle::new(&g, &[2]).unwrap();
        let t = b.torus();
        let f = t.from_fn(|x, y| t.base_section(2, x, y) * (1.0 + 0.3 * (2.0 * PI * (x + 2.0 * y)).sin()));
        let spec = t.dx(&f, 2);
        let fd = t.dx_fd(&f, 2);
        let scale = spec.iter().map(|v| v.norm()).fold(0.0, f64::max);
        errs.push(spec.iter().zip(&fd).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / scale);
        hs.push(1.0 / n as f64);
    }
    let order = fit_order(&hs, &errs, 1e-13).unwrap();
    assert!(errs[3] < 1e-3, "{errs:?}");
    assert!(order > 1.5, "order {order}, errors {errs:?}");
}

#[test]
fn leibniz_rule_and_partial_curvature() {
    let g = torus(16);
    let b = SasakianBundle::new(&g, &[0, 1]).unwrap();
    let d = HolomorphicStructure::extension(&b, 0.7).unwrap();
    let t = b.torus();
    let twisted = t.from_fn(|x, y| t.base_section(1, x, y) * c(1.0, 0.3 * (2.0 * PI * y).sin()));
    let s = vec![
        Field::from_fn(&g, 0, |p| c((2.0 * PI * p.x).cos(), 0.2)),
        Field::from_slice(&g, 1, &twisted),
    ];
    let f = Field::from_fn(&g, 0, |p| c((2.0 * PI * (p.x - p.y)).sin(), 0.5));
    assert!(leibniz_residual(&d, &f, &s).unwrap() < 1e-9);

    // ξ-invariant data: the partial connection is flat along ξ
    assert!(curvature_partial(&d).unwrap().max_norm() < 1e-12);
    assert!(partial_commutator_residual(&d, &s).unwrap() < 1e-9);

    // a fiber mode in α is detected by both
    let moving = d.with_fiber_mode(0, 1, 1, 0.1);
    assert!(!moving.is_xi_invariant());
    assert!(curvature_partial(&moving).unwrap().max_norm() > 1e-2);
    assert!(partial_commutator_residual(&moving, &s).unwrap() < 1e-8);
}

#[test]
fn negative_controls_are_detected() {
    let s = boothby_wang(BaseManifold::hopf(), GridSpec::sphere(24, 24, 16)).unwrap();
    assert!(check_lemma_domega(&s) < 1e-3);
    let flipped = s.with_phi_sign_flipped().unwrap();
    assert!((check_lemma_domega(&flipped) - 2.0).abs() < 1e-2);

    let bent = s.with_metric_perturbation(0.05).unwrap();
    let r = verify_sasakian(&bent, 4);
    assert!(r.killing_residual > 1e-2 || r.phi_identity_residual > 1e-2, "{r:?}");
}

#[test]
fn trace_free_flow_keeps_the_determinant() {
    let g = torus(11);
    let b = SasakianBundle::new(&g, &[0, 1]).unwrap();
    let d = HolomorphicStructure::extension(&b, 0.84).unwrap();
    let h0 = HermitianMetric::random(&b, 5, 0.2).unwrap();
    let cfg = FlowConfig { det_normalize: true, max_steps: 200, stop_sup_tol: 1e-14, ..Default::default() };
    let run = run_flow(&d, &h0, &cfg).unwrap();
    let before = h0.h.det();
    let after = run.state.h.h.det();
    let drift = before.iter().zip(&after).map(|(a, b)| (b.re / a.re).ln().abs()).fold(0.0, f64::max);
    assert!(drift < 1e-6, "log det drift {drift}");
    assert!(run.report.final_sup_residual < he_residual(&d, &h0).unwrap().sup);
}

#[test]
fn automatic_step_handles_a_stiff_extension() {
    // large coupling: the fixed Laplacian step oscillates here
    let g = torus(11);
    let b = SasakianBundle::new(&g, &[0, 1]).unwrap();
    let t = b.torus();
    let mut q = b.end_zeros();
    *q.entry_mut(0, 1) = t.from_fn(|x, y| t.base_section(-1, x, y) * 0.84);
    *q.entry_mut(0, 0) = vec![c(0.4, 0.4); b.npoints()];
    let d = HolomorphicStructure::from_q(&b, &q).unwrap();
    let cfg = FlowConfig { stop_sup_tol: 1e-8, max_steps: 20_000, ..Default::default() };
    let run = run_flow(&d, &b.reference_metric(), &cfg).unwrap();
    let r = &run.report;
    assert_eq!(r.verdict, FlowVerdict::Converged);
    assert_eq!(r.audit.energy_violations, 0);
    assert!(r.dt_min < r.dt, "the step should shrink as H grows anisotropic");
}

#[test]
fn gauged_family_closed_form_is_the_flow_limit() {
    let mut cfg = family_preset("gauged_pair").unwrap();
    cfg.param_points = 5;
    let fam = build_family(&cfg).unwrap();
    let idx = fam.params.len() / 2;
    let d = fam.structure(idx).unwrap();
    assert!(he_residual(&d, &fam.metric(idx)).unwrap().sup < 1e-8);

    let flow = FlowConfig { stop_sup_tol: 1e-10, max_steps: 50_000, ..Default::default() };
    let run = run_flow(&d, &fam.bundle.reference_metric(), &flow).unwrap();
    assert_eq!(run.report.verdict, FlowVerdict::Converged);
    // line bundle: the HE metric is unique up to a constant factor
    let ratio: Vec<f64> = run.state.h.h.entries[0].iter().zip(&fam.h[idx].entries[0]).map(|(a, b)| a.re / b.re).collect();
    let mean = ratio.iter().sum::<f64>() / ratio.len() as f64;
    let spread = ratio.iter().map(|r| (r / mean - 1.0).abs()).fold(0.0, f64::max);
    assert!(spread < 1e-7, "relative spread {spread}");
}

fn jacobian(exponent: Exponent, reparam: Option<Reparam>) -> FamilyConfig {
    FamilyConfig { exponent, reparam, param_points: 5, ..FamilyConfig::new(FamilyKind::Jacobian) }
}

#[test]
fn printed_exponent_leaves_no_11_part() {
    let fam = build_family(&jacobian(Exponent::Printed, None)).unwrap();
    let sample = moduli_form(&fam).unwrap();
    assert!(!sample.points.is_empty());
    assert!(sample.max_entry() < 1e-12, "{}", sample.max_entry());
}

#[test]
fn reparametrization_pulls_back_the_form() {
    let base = moduli_form(&build_family(&jacobian(Exponent::NMinusOne, None)).unwrap()).unwrap();
    let g0 = base.points[0].matrix()[(0, 0)].re;
    let r = Reparam { shift: [0.05, -0.02], scale: [1.5, 0.5], quadratic: [0.4, -0.3] };
    let fam = build_family(&jacobian(Exponent::NMinusOne, Some(r))).unwrap();
    let sample = moduli_form(&fam).unwrap();
    for p in &sample.points {
        let s = c(p.s[0][0], p.s[0][1]);
        let expect = g0 * r.derivative(s).norm_sqr();
        let got = p.matrix()[(0, 0)].re;
        assert!((got - expect).abs() < 1e-6 * expect, "at {s}: {got} vs {expect}");
    }
}
