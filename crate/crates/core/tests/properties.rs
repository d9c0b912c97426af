use std::sync::Arc;

use wc4dvar_core::assimilation::{map_solve, DenseSystem, SolverOptions};
use wc4dvar_core::criteria::{
    build_criterion_operator, criterion_exact, dense_criterion_factor, reconcile_constants,
    sc_criterion_selected, wc_sc_gap_bound, Formulation, GramEvaluator,
};
use wc4dvar_core::linalg::{singular_values, Matrix, Vector};
use wc4dvar_core::models::{
    assemble_heat, heat_step_matrix, random_instance, with_scaled_identity_model_error,
    Diffusivity, Mesh1D,
};
use wc4dvar_core::operators::{adjoint_defect, densify, DenseOperator, SensorDesign};
use wc4dvar_core::selection::{adjoint_free_sketch, gks_bound, gks_select, GksOptions};
use wc4dvar_core::rng::{gaussian_vector, stream_rng, Purpose};

#[test]
fn criterion_factor_adjoints_are_consistent() {
    let p = random_instance(4, 3, 3, 21);
    let op = build_criterion_operator(&p, &SensorDesign::full(3), Formulation::Preconditioned).unwrap();
    let a = op.factor().unwrap();
    assert!(adjoint_defect(a.as_ref(), 1) < 1e-10);
    assert!(adjoint_defect(op.operator().as_ref(), 2) < 1e-10);
    let zero = a.apply(&Vector::zeros(a.cols()));
    assert_eq!(zero.amax(), 0.0);
}

#[test]
fn reconciled_formulations_on_subdesigns() {
    for seed in 0..4 {
        let p = random_instance(3, 2, 4, seed);
        let design = SensorDesign::new(4, vec![0, 3]).unwrap();
        let values: Vec<_> = Formulation::WEAK
            .iter()
            .map(|&f| criterion_exact(&build_criterion_operator(&p, &design, f).unwrap()).unwrap())
            .collect();
        let phi = reconcile_constants(&values, &p, &design).unwrap();
        for v in &phi {
            assert!((v - phi[0]).abs() <= 1e-8 * phi[0].abs());
        }
        let g = GramEvaluator::new(&p).unwrap();
        assert!((g.evaluate(&design).unwrap() - phi[0]).abs() <= 1e-8 * phi[0].abs());
    }
}

#[test]
fn gap_sandwich_on_random_designs() {
    for seed in 0..10 {
        let p = random_instance(4, 2, 5, 100 + seed);
        let i = seed as usize % 4;
        let design = SensorDesign::new(5, vec![i, i + 1]).unwrap();
        let r = wc_sc_gap_bound(&p, &design).unwrap();
        assert!(r.gap >= -1e-8 && r.gap <= r.upper + 1e-8, "{r:?}");
        let sc = sc_criterion_selected(&p, &design).unwrap().value;
        assert!(sc >= 0.0 && r.weak >= sc - 1e-8);
        let tight = with_scaled_identity_model_error(&p, 1e-10).unwrap();
        assert!(wc_sc_gap_bound(&tight, &design).unwrap().gap.abs() <= 1e-5);
    }
}

#[test]
fn map_estimate_matches_dense_posterior() {
    let p = random_instance(5, 3, 3, 7);
    let y = gaussian_vector(&mut stream_rng(7, Purpose::Observations, 0), p.dims().n_m());
    let (h, rhs) = DenseSystem::assemble(&p).posterior_system(&y);
    let dense = h.lu().solve(&rhs).unwrap();
    let opts = SolverOptions {
        tol: 1e-12,
        ..Default::default()
    };
    let got = map_solve(&p, &y, &opts).unwrap();
    assert!((&got.map_estimate - &dense).norm() <= 1e-8 * dense.norm());
}

#[test]
fn gks_bound_holds_with_golub_kahan() {
    use wc4dvar_core::selection::SvdMethod;
    for seed in 0..4 {
        let p = random_instance(6, 2, 6, 40 + seed);
        let a = dense_criterion_factor(&p, &SensorDesign::full(6)).unwrap();
        let opts = GksOptions {
            svd_rank: None,
            svd: SvdMethod::GolubKahan {
                extra_steps: 6,
                seed,
            },
        };
        let sel = gks_select(Arc::new(DenseOperator::new(a.clone())), 6, 3, 2, &opts).unwrap();
        let phi = GramEvaluator::from_factor(&a, 6, 3).evaluate(&sel.design).unwrap();
        let b = gks_bound(&a, 6, 3, &sel.design).unwrap();
        assert!(b.lower <= phi + 1e-10 && phi <= b.upper + 1e-10);
    }
}

/// Singular values of the sketch stay within a factor `1 + ε'` of those of
/// `A` for `D = K + 2⌈√K⌉ + 20`.
#[test]
fn sketch_preserves_leading_singular_values() {
    let p = random_instance(8, 2, 5, 3);
    let k = 2;
    let big_k = 3 * k;
    let d = big_k + 2 * (big_k as f64).sqrt().ceil() as usize + 20;
    let a = dense_criterion_factor(&p, &SensorDesign::full(5)).unwrap();
    let sa = singular_values(&a);
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let y = adjoint_free_sketch(&p, d, seed).unwrap();
        let sy = singular_values(&y);
        for j in 0..big_k {
            worst = worst.max((sy[j] / sa[j]).max(sa[j] / sy[j]) - 1.0);
        }
    }
    assert!(worst <= 0.5, "worst distortion {worst}");
}

fn heat_snapshot(n_cells: usize) -> (Vec<f64>, Vector, Matrix) {
    let mesh = Mesh1D::new(n_cells).unwrap();
    let fem = assemble_heat(&mesh, Diffusivity::Constant(3f64.sqrt())).unwrap();
    let s = heat_step_matrix(&fem, 1.5625e-5).unwrap();
    let xs = mesh.interior_nodes();
    let mut u = Vector::from_iterator(xs.len(), xs.iter().map(|&x| (-0.5 * ((x - 0.7) / 0.08f64).powi(2)).exp()));
    for _ in 0..256 {
        u = &s * u;
    }
    (xs, u, fem.mass)
}

#[test]
fn heat_refinement_is_second_order() {
    let levels = [16, 32, 64, 128];
    let snaps: Vec<_> = levels.iter().map(|&n| heat_snapshot(n)).collect();
    // Differences between consecutive meshes at the coarse nodes, in the coarse mass norm.
    let mut diffs = Vec::new();
    for w in 0..3 {
        let (_, coarse, mass) = &snaps[w];
        let (_, fine, _) = &snaps[w + 1];
        let restricted = Vector::from_iterator(coarse.len(), (0..coarse.len()).map(|i| fine[2 * i + 1]));
        let e = coarse - restricted;
        diffs.push(e.dot(&(mass * &e)).sqrt());
    }
    for w in diffs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(order >= 1.8, "observed order {order} from {diffs:?}");
    }
}

#[test]
fn heat_step_spectral_radius_below_one() {
    let mesh = Mesh1D::new(64).unwrap();
    let fem = assemble_heat(&mesh, Diffusivity::Oscillatory { epsilon: 1.0 / 8.0 }).unwrap();
    let s = heat_step_matrix(&fem, 1.5625e-5).unwrap();
    let rho = s.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(rho < 1.0);
    let dense = densify(&DenseOperator::new(s.clone()));
    assert_eq!(dense, s);
}
