//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs as a plain binary so the lines show up in `cargo test`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

use sasaki::bundle::{chern_weil_suite, he_residual, HermitianMetric, HolomorphicStructure, SasakianBundle};
use sasaki::cli::{self, Command, ManifoldSpec, RunConfig};
use sasaki::family::{
    build_family, check_kahler, chern_character_leading_check, ddbar_potential, jacobian_constant, moduli_form,
    BundleFamily, FamilyConfig, ModuliFormSample,
};
use sasaki::flow::{blockwise_constants, flow_step, gradient_energy, run_flow, FlowConfig, FlowState, FlowVerdict};
use sasaki::forms::transversal_suite;
use sasaki::grid::{make_grid, BaseManifold, GridHandle, GridSpec};
use sasaki::Complex64;

type Check = Result<(bool, String), String>;

fn torus_grid(n: usize) -> GridHandle {
    make_grid(BaseManifold::flat_torus(Complex64::new(0.0, 1.0), 1), GridSpec::torus(n, n, 8)).expect("torus grid")
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1. Sasakian identities

const IDENTITIES: [&str; 5] = ["killing", "phi_identity", "curvature_identity", "lemma_domega", "contact"];

fn structure_suite() -> Check {
    let levels: Vec<[usize; 3]> = [16, 24, 32, 48, 64].iter().map(|&n| [n, n, 16]).collect();
    let mut ok = true;
    let mut notes = Vec::new();

    let t0 = Instant::now();
    let (_, hopf) = cli::convergence_study(&ManifoldSpec::Hopf, &levels, None, 8, 1).map_err(err)?;
    let hopf_time = t0.elapsed().as_secs_f64();
    for name in IDENTITIES {
        let r = *hopf.residuals[name].last().expect("levels");
        let order = hopf.orders[name];
        let good = r < 1e-6 && order.is_some_and(|o| o >= 3.5);
        ok &= good;
        notes.push(format!("hopf {name} {r:.1e} order {}", order.map_or("-".into(), |o| format!("{o:.2}"))));
    }
    ok &= hopf_time < 120.0;

    let t0 = Instant::now();
    let torus = ManifoldSpec::FlatTorus { tau: [0.0, 1.0], k_l: 1 };
    let (_, flat) = cli::convergence_study(&torus, &levels, None, 8, 1).map_err(err)?;
    let flat_time = t0.elapsed().as_secs_f64();
    // exact at every level: polynomial coefficients, so there is no order to fit
    let worst = IDENTITIES
        .iter()
        .flat_map(|n| flat.residuals[*n].iter().copied())
        .fold(0.0, f64::max);
    ok &= worst < 1e-12 && flat_time < 120.0;
    notes.push(format!("torus worst {worst:.1e} over all levels (round-off)"));
    notes.push(format!("{hopf_time:.1}s + {flat_time:.1}s"));
    Ok((ok, notes.join("; ")))
}

// 2. Transversal calculus

fn transversal() -> Check {
    let t0 = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    // forms are implemented on the torus base
    for (label, grid) in [("torus 32²", torus_grid(32)), ("torus 48²", torus_grid(48))] {
        let r = transversal_suite(&grid, 200, 11).map_err(err)?;
        let checks = [
            ("i_xi", r.contraction, 1e-9),
            ("L_xi", r.lie_reeb, 1e-8),
            ("d", r.d_transversality, 1e-8),
            ("complete", r.completeness, 1e-10),
            ("idempotent", r.idempotence, 1e-10),
            ("orthogonal", r.orthogonality, 1e-10),
            ("L_xi/type", r.lie_type_commutator, 1e-7),
            ("domega type", r.domega_off_type, 1e-10),
            ("Lambda domega", r.domega_lambda, 1e-10),
            ("adjoint", r.adjointness, 1e-8),
        ];
        let worst = checks.iter().map(|(_, v, tol)| v / tol).fold(0.0, f64::max);
        ok &= checks.iter().all(|(_, v, tol)| v < tol);
        notes.push(format!("{label}: {} forms, worst residual/tolerance {worst:.2}", r.forms));
    }
    let secs = t0.elapsed().as_secs_f64();
    ok &= secs < 60.0;
    notes.push(format!("{secs:.1}s"));
    Ok((ok, notes.join("; ")))
}

// 3. Chern-Weil

fn chern_weil() -> Check {
    let t0 = Instant::now();
    let r = chern_weil_suite(&torus_grid(32), 5, 5).map_err(err)?;
    let secs = t0.elapsed().as_secs_f64();
    let ok = r.line_degree_error < 1e-6
        && r.metric_dependence < 1e-6
        && r.c1_closedness < 1e-7
        && r.conformal_shift_error < 1e-7
        && secs < 120.0;
    Ok((
        ok,
        format!(
            "deg O(k) err {:.1e}; metric dependence {:.1e} over {} metrics; |d c1| {:.1e}; conformal {:.1e}; {secs:.1}s",
            r.line_degree_error, r.metric_dependence, r.metrics_tried, r.c1_closedness, r.conformal_shift_error
        ),
    ))
}

// 4. Stable extension

fn extension(n: usize) -> Result<(SasakianBundle, HolomorphicStructure), String> {
    let b = SasakianBundle::new(&torus_grid(n), &[0, 1]).map_err(err)?;
    let d = HolomorphicStructure::extension(&b, cli::PRESET_EXTENSION_EPSILON).map_err(err)?;
    Ok((b, d))
}

fn stable_flow() -> Check {
    let t0 = Instant::now();
    let cfg = FlowConfig {
        stop_sup_tol: 1e-7,
        max_steps: 60_000,
        ..FlowConfig::default()
    };
    let mut ok = true;
    let mut notes = Vec::new();
    let mut finals = Vec::new();
    for n in [16, 24] {
        let (b, d) = extension(n)?;
        let run = run_flow(&d, &b.reference_metric(), &cfg).map_err(err)?;
        let r = &run.report;
        let check = he_residual(&d, &run.state.h).map_err(err)?;
        let lambda_closed = blockwise_constants(&b).map_err(err)?.iter().sum::<f64>() / 2.0;
        ok &= r.verdict == FlowVerdict::Converged
            && check.sup < 1e-5
            && r.audit.sup_violations == 0
            && r.audit.energy_violations == 0
            && (r.lambda - lambda_closed).abs() < 1e-9;
        notes.push(format!(
            "{n}²: {} steps, sup {:.1e}, violations {}/{}, λ {:.6}",
            r.steps, check.sup, r.audit.sup_violations, r.audit.energy_violations, r.lambda
        ));
        finals.push((n, run.state.h.h));
    }
    // shared points x, y ∈ ⅛ℤ sit at every 2nd (16²) and 3rd (24²) index
    let (coarse, fine) = (&finals[0].1, &finals[1].1);
    let (tc, tf) = (torus_grid(16), torus_grid(24));
    let (tc, tf) = (tc.torus().expect("torus"), tf.torus().expect("torus"));
    let mut diff: f64 = 0.0;
    let mut size: f64 = 0.0;
    for k in 0..4 {
        for i in 0..8 {
            for j in 0..8 {
                let a = coarse.entries[k][tc.idx(2 * i, 2 * j)];
                let b = fine.entries[k][tf.idx(3 * i, 3 * j)];
                diff = diff.max((a - b).norm());
                size = size.max(b.norm());
            }
        }
    }
    let rel = diff / size;
    let secs = t0.elapsed().as_secs_f64();
    ok &= rel < 1e-3 && secs < 600.0;
    notes.push(format!("metric difference {rel:.1e} relative"));
    notes.push("λ = Σk/(r·k_L) = 1/2 since vol = 4π² (π corresponds to vol = 2π)".into());
    notes.push(format!("{secs:.1}s"));
    Ok((ok, notes.join("; ")))
}

// 5. Split sum

fn split_flow() -> Check {
    let t0 = Instant::now();
    let b = SasakianBundle::new(&torus_grid(16), &[0, 1]).map_err(err)?;
    let d = HolomorphicStructure::reference(&b);
    let h0 = HermitianMetric::random(&b, 21, 0.3).map_err(err)?;
    let cfg = FlowConfig {
        max_steps: 60_000,
        ..FlowConfig::default()
    };
    let run = run_flow(&d, &h0, &cfg).map_err(err)?;
    let r = &run.report;
    let last = run.state.last();
    let oracle = blockwise_constants(&b).map_err(err)?;
    let dev = last
        .eig_means
        .iter()
        .zip(&oracle)
        .map(|(m, c)| (r.lambda + m - c).abs())
        .fold(0.0, f64::max)
        + last.eig_spread;
    let secs = t0.elapsed().as_secs_f64();
    let ok = r.verdict == FlowVerdict::SplitLimit && r.final_sup_residual > 0.4 && dev < 1e-3 && secs < 600.0;
    Ok((
        ok,
        format!(
            "{:?} after {} steps; sup residual {:.3}; iΛK eigenvalues within {dev:.1e} of {:?}; {secs:.1}s",
            r.verdict, r.steps, r.final_sup_residual, oracle
        ),
    ))
}

// 6. Energy identity

/// `|E(T) − E(0) + ∫₀ᵀ G dt|` with the integral by the trapezoid rule.
fn integrated_energy_residual(d: &HolomorphicStructure, h0: &HermitianMetric, dt: f64, steps: usize) -> Result<f64, String> {
    let cfg = FlowConfig {
        dt: Some(dt),
        ..FlowConfig::default()
    };
    let mut state = FlowState::new(d, h0).map_err(err)?;
    let e0 = state.last().energy;
    let mut g_prev = gradient_energy(d, &state.h, state.lambda).map_err(err)?;
    let mut integral = 0.0;
    for _ in 0..steps {
        state = flow_step(&state, d, &cfg).map_err(err)?;
        let g = gradient_energy(d, &state.h, state.lambda).map_err(err)?;
        integral += 0.5 * dt * (g_prev + g);
        g_prev = g;
    }
    Ok((state.last().energy - e0 + integral).abs())
}

fn energy_identity() -> Check {
    let (b, d) = extension(16)?;
    let h0 = HermitianMetric::random(&b, 4, 0.2).map_err(err)?;
    let auto = FlowConfig::default().resolve(&b).map_err(err)?.dt();
    let horizon = 0.1;
    let n0 = (horizon / auto).ceil() as usize;
    let mut res = Vec::new();
    for k in 0..3 {
        let steps = n0 << k;
        res.push(integrated_energy_residual(&d, &h0, horizon / steps as f64, steps)?);
    }
    let orders: Vec<f64> = res.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let ok = orders.iter().all(|&o| o >= 1.0);
    Ok((
        ok,
        format!(
            "residual {:.2e} / {:.2e} / {:.2e} at dt, dt/2, dt/4 (T = {horizon}); orders {:.2}, {:.2}",
            res[0], res[1], res[2], orders[0], orders[1]
        ),
    ))
}

// 7 and 8. Moduli form

struct Families {
    jacobian: (BundleFamily, ModuliFormSample),
    extension: (BundleFamily, ModuliFormSample),
    seconds: f64,
}

fn families() -> Result<Families, String> {
    let t0 = Instant::now();
    let build = |cfg: FamilyConfig| -> Result<(BundleFamily, ModuliFormSample), String> {
        let fam = build_family(&cfg).map_err(err)?;
        let sample = moduli_form(&fam).map_err(err)?;
        Ok((fam, sample))
    };
    let jacobian = build(cli::family_preset("jacobian").map_err(err)?)?;
    let extension = build(cli::family_preset("extension").map_err(err)?)?;
    Ok(Families {
        jacobian,
        extension,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn gauged_closedness(h: f64) -> Result<f64, String> {
    let mut cfg = cli::family_preset("gauged_pair").map_err(err)?;
    cfg.param_spacing = h;
    let fam = build_family(&cfg).map_err(err)?;
    let sample = moduli_form(&fam).map_err(err)?;
    Ok(check_kahler(&fam, &sample).map_err(err)?.closedness_residual)
}

fn moduli(f: &Families) -> Check {
    let t0 = Instant::now();
    let mut notes = Vec::new();
    let (jf, js) = &f.jacobian;
    let c = jacobian_constant(jf);
    let jac_dev = js
        .points
        .iter()
        .map(|p| {
            let g = p.matrix()[(0, 0)];
            (g - Complex64::new(c, 0.0)).norm()
        })
        .fold(0.0, f64::max);
    notes.push(format!("jacobian G = 8π² within {jac_dev:.1e}"));

    let (ef, es) = &f.extension;
    let k = check_kahler(ef, es).map_err(err)?;
    let pot = ddbar_potential(es, 4).map_err(err)?;
    notes.push(format!(
        "extension: min eigenvalue {:.3} over {} interior points, potential error {:.1e}, closedness {} (one parameter)",
        k.min_eigenvalue_over_s, k.sample_points, pot.max_error, k.closedness_residual
    ));

    let hs = [0.2, 0.1, 0.05];
    let closed: Vec<f64> = hs.iter().map(|&h| gauged_closedness(h)).collect::<Result<_, _>>()?;
    let order = cli::fit_order(&hs, &closed, cli::ORDER_FLOOR);
    notes.push(format!(
        "two-parameter closedness {:.1e} / {:.1e} / {:.1e}, order {}",
        closed[0],
        closed[1],
        closed[2],
        order.map_or("-".into(), |o| format!("{o:.2}"))
    ));
    let secs = f.seconds + t0.elapsed().as_secs_f64();
    notes.push(format!("{secs:.1}s"));
    let ok = jac_dev < 1e-6
        && (c - 8.0 * PI * PI).abs() < 1e-6
        && k.min_eigenvalue_over_s > 0.0
        && k.closedness_residual == 0.0
        && pot.max_error < 1e-6
        && order.is_some_and(|o| o >= 3.5)
        && secs < 900.0;
    Ok((ok, notes.join("; ")))
}

fn chern_character(f: &Families) -> Check {
    let mut ok = true;
    let mut notes = Vec::new();
    for (label, (fam, _)) in [("jacobian", &f.jacobian), ("extension", &f.extension)] {
        let r = chern_character_leading_check(fam).map_err(err)?;
        let dev = r.deviation.ok_or_else(|| format!("{label}: ratio undefined everywhere"))?;
        ok &= dev < 1e-4;
        notes.push(format!("{label}: ratio {:.1e}, spread {dev:.1e}", r.mean_ratio.unwrap_or(f64::NAN)));
    }
    Ok((ok, notes.join("; ")))
}

// 9. Determinism

fn payloads(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .expect("output dir")
        .map(|e| e.expect("entry").path())
        .filter(|p| p.file_name().is_some_and(|n| n != "manifest.json"))
        .map(|p| (p.file_name().expect("name").to_string_lossy().into_owned(), fs::read(&p).expect("read")))
        .collect()
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut configs = Vec::new();
    let mut flow = RunConfig::new(Command::Flow);
    flow.bundle = Some(cli::bundle_preset("ext_1_0").map_err(err)?);
    flow.initial_metric = cli::InitialMetric::Random { eps: 0.3 };
    flow.flow.max_steps = 300;
    flow.seed = 99;
    configs.push(flow);
    let mut verify = RunConfig::new(Command::Verify);
    verify.manifold = ManifoldSpec::Hopf;
    verify.seed = 99;
    configs.push(verify);
    let mut moduli = RunConfig::new(Command::Moduli);
    let mut fam = cli::family_preset("gauged_pair").map_err(err)?;
    fam.param_points = 9;
    moduli.family = Some(fam);
    configs.push(moduli);

    let mut files = 0;
    for (i, cfg) in configs.into_iter().enumerate() {
        let mut outs = Vec::new();
        for rep in 0..2 {
            let mut c = cfg.clone();
            c.output = tmp.path().join(format!("{i}-{rep}"));
            cli::run(&c).map_err(err)?;
            outs.push(payloads(&c.output));
        }
        if outs[0] != outs[1] {
            return Ok((false, format!("{:?} outputs differ", cfg.command)));
        }
        files += outs[0].len();
    }
    Ok((true, format!("flow, verify and moduli runs repeated: {files} files byte-identical")))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: Check| {
        let (ok, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !ok {
            failed += 1;
        }
        println!("{} criterion {n} ({name}): {detail}", if ok { "PASS" } else { "FAIL" });
    };
    report(1, "Sasakian identities", structure_suite());
    report(2, "transversal calculus", transversal());
    report(3, "Chern-Weil", chern_weil());
    report(4, "stable HE flow", stable_flow());
    report(5, "split flow", split_flow());
    report(6, "energy identity", energy_identity());
    match families() {
        Ok(f) => {
            report(7, "moduli form", moduli(&f));
            report(8, "Chern character", chern_character(&f));
        }
        Err(e) => {
            report(7, "moduli form", Err(e.clone()));
            report(8, "Chern character", Err(e));
        }
    }
    report(9, "determinism", determinism());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
