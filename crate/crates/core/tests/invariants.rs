use proptest::prelude::*;
use sasaki::bundle::{curvature, degree, HermitianMetric, HolomorphicStructure, SasakianBundle};
use sasaki::forms::{exterior_d, random_transversal, type_project, wedge};
use sasaki::grid::{make_grid, BaseManifold, GridHandle, GridSpec};
use sasaki::Complex64;
use std::f64::consts::PI;
use std::sync::OnceLock;

fn grid() -> &'static GridHandle {
    static G: OnceLock<GridHandle> = OnceLock::new();
    G.get_or_init(|| {
        make_grid(BaseManifold::flat_torus(Complex64::new(0.2, 0.9), 1), GridSpec::torus(12, 12, 8)).unwrap()
    })
}

// random metrics carry fixed-size modes; their products need a fine grid
fn fine_grid() -> &'static GridHandle {
    static G: OnceLock<GridHandle> = OnceLock::new();
    G.get_or_init(|| {
        make_grid(BaseManifold::flat_torus(Complex64::new(0.2, 0.9), 1), GridSpec::torus(48, 48, 8)).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn d_squared_vanishes(seed in any::<u64>(), degree in 0usize..2) {
        let a = random_transversal(grid(), degree, seed).unwrap();
        let dda = exterior_d(&exterior_d(a.form()).unwrap()).unwrap();
        prop_assert!(dda.max_norm() < 1e-8 * (1.0 + a.form().max_norm()));
    }

    #[test]
    fn wedge_of_one_forms_is_antisymmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = random_transversal(grid(), 1, s1).unwrap();
        let b = random_transversal(grid(), 1, s2).unwrap();
        let ab = wedge(a.form(), b.form()).unwrap();
        let ba = wedge(b.form(), a.form()).unwrap();
        prop_assert!(ab.add(&ba).unwrap().max_norm() < 1e-12 * (1.0 + ab.max_norm()));
    }

    #[test]
    fn type_parts_add_up(seed in any::<u64>(), degree in 1usize..3) {
        let a = random_transversal(grid(), degree, seed).unwrap();
        let mut sum = type_project(&a, 0).unwrap().into_form();
        for i in 1..=degree {
            sum = sum.add(type_project(&a, i).unwrap().form()).unwrap();
        }
        prop_assert!(sum.sub(a.form()).unwrap().max_norm() < 1e-12 * (1.0 + a.form().max_norm()));
    }

    #[test]
    fn random_metrics_are_positive_and_hermitian(seed in any::<u64>(), eps in 0.0f64..0.9) {
        let b = SasakianBundle::new(grid(), &[0, 1]).unwrap();
        let h = HermitianMetric::random(&b, seed, eps).unwrap();
        prop_assert!(h.min_eigenvalue() > 0.0);
        prop_assert!(h.h.hermitian_defect() < 1e-12);
    }

    #[test]
    fn degree_ignores_the_metric(seed in any::<u64>(), eps in 0.0f64..0.6, e in 0.0f64..1.5) {
        let b = SasakianBundle::new(grid(), &[0, 1]).unwrap();
        let d = HolomorphicStructure::extension(&b, e).unwrap();
        let h = HermitianMetric::random(&b, seed, eps).unwrap();
        prop_assert!((degree(&d, &h).unwrap() - 2.0 * PI).abs() < 1e-9);
    }

    #[test]
    fn chern_curvature_is_skew_hermitian_of_type_11(seed in any::<u64>(), eps in 0.0f64..0.3) {
        let b = SasakianBundle::new(fine_grid(), &[-1, 2]).unwrap();
        let d = HolomorphicStructure::extension(&b, 0.5).unwrap();
        let k = curvature(&d, &HermitianMetric::random(&b, seed, eps).unwrap()).unwrap();
        prop_assert!(k.skew_hermitian_residual() < 1e-7);
        prop_assert!(k.type_residual().unwrap() < 1e-10);
    }
}
