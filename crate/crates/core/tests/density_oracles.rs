use std::f64::consts::PI;

use sdelab::calculus::{CoefficientSet, DensityField, Drift, QuadratureRule, Scheme};
use sdelab::density::{
    assemble_system, ball_measures, convergence_order, invariance_of_solution,
    read_density_csv, recurrence_sequence, solve_density, volume_profile, write_density_csv,
    Boundary, DensityOptions, ObservedOrder, VolumeOptions,
};
use sdelab::expr::{parse_expr, Expr};
use sdelab::mesh::BoxMesh;

fn e(s: &str) -> Expr {
    parse_expr(s, 2).unwrap()
}

fn coefficients(h: [&str; 2]) -> CoefficientSet {
    CoefficientSet::build(
        2,
        &[vec![e("1"), e("0")], vec![e("1")]],
        &[],
        Drift::Divergence(vec![e(h[0]), e(h[1])]),
        &[],
    )
    .unwrap()
}

/// With `A = id`, `H = -x` the flux `½∇ρ − ρH` of `ρ = exp(-‖x‖²)` vanishes.
fn ou() -> CoefficientSet {
    coefficients(["-x1", "-x2"])
}

fn gaussian() -> Expr {
    e("exp(-norm2(x))")
}

fn max_node_error(mesh: &BoxMesh, values: &[f64], exact: &Expr, within: f64) -> f64 {
    let mut multi = [0; 2];
    let mut x = [0.0; 2];
    let mut err = 0.0f64;
    for (i, v) in values.iter().enumerate() {
        mesh.multi(i, &mut multi);
        mesh.point(&multi, &mut x);
        if x.iter().all(|c| c.abs() <= within) {
            err = err.max((v - exact.eval(&x).unwrap()).abs());
        }
    }
    err
}

#[test]
fn manufactured_operator_residual_is_second_order() {
    let cs = ou();
    let boundary = Boundary::Expression(gaussian());
    let residual = |n| {
        let mesh = BoxMesh::new(2, 4.0, n);
        let sys = assemble_system(&cs, &mesh, &boundary).unwrap();
        let mut nodal = vec![0.0; mesh.node_count()];
        let mut multi = [0; 2];
        let mut x = [0.0; 2];
        for (i, v) in nodal.iter_mut().enumerate() {
            mesh.multi(i, &mut multi);
            mesh.point(&multi, &mut x);
            *v = gaussian().eval(&x).unwrap();
        }
        let r = sys.residual(&sys.restrict(&nodal));
        r.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    let (coarse, fine) = (residual(64), residual(128));
    assert!(coarse / fine >= 3.5, "residual ratio {}", coarse / fine);
}

#[test]
fn manufactured_gaussian_converges_at_second_order() {
    let cs = ou();
    let boundary = Boundary::Expression(gaussian());
    let opts = DensityOptions::default();
    let mut errors = Vec::new();
    for n in [128, 256] {
        let rho = solve_density(&cs, 4.0, n, &boundary, &opts).unwrap();
        assert!(rho.valid);
        assert_eq!(rho.value_at(&[0.0, 0.0]), Some(1.0));
        errors.push(max_node_error(&rho.mesh, &rho.values, &gaussian(), 4.0));
    }
    assert!(errors[0] <= 5e-3, "error at n=128: {}", errors[0]);
    assert!(errors[0] / errors[1] >= 3.5, "ratio {}", errors[0] / errors[1]);
    let report = convergence_order(&cs, 4.0, 64, &gaussian(), &opts).unwrap();
    match report.order {
        ObservedOrder::Rate(p) => assert!((1.8..=2.2).contains(&p), "order {p}"),
        ObservedOrder::Exact => panic!("unexpected exact order"),
    }
}

#[test]
fn boundary_ones_construction_is_stable_under_exhaustion() {
    let cs = ou();
    let opts = DensityOptions::default();
    // Same spacing h = 1/16, so nodes of the smaller box are nodes of the larger.
    let small = solve_density(&cs, 6.0, 192, &Boundary::Ones, &opts).unwrap();
    let large = solve_density(&cs, 8.0, 256, &Boundary::Ones, &opts).unwrap();
    assert!(small.valid && large.valid);
    let mut multi = [0; 2];
    let mut x = [0.0; 2];
    let (mut worst, mut lo, mut hi) = (0.0f64, f64::INFINITY, 0.0f64);
    for (i, v) in small.values.iter().enumerate() {
        small.mesh.multi(i, &mut multi);
        small.mesh.point(&multi, &mut x);
        if x.iter().any(|c| c.abs() > 2.0) {
            continue;
        }
        let w = large.value_at(&x).unwrap();
        worst = worst.max((v - w).abs() / w);
        let ratio = v / gaussian().eval(&x).unwrap();
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    assert!(worst <= 0.05, "nested boxes differ by {worst}");
    assert!((hi - lo) / lo <= 0.05, "ratio spread {}", (hi - lo) / lo);
}

#[test]
fn symmetric_flat_case_is_exact_on_nested_boxes() {
    let cs = coefficients(["0", "0"]);
    let opts = DensityOptions::default();
    let a = solve_density(&cs, 2.0, 32, &Boundary::Ones, &opts).unwrap();
    let b = solve_density(&cs, 4.0, 64, &Boundary::Ones, &opts).unwrap();
    for v in a.values.iter().chain(&b.values) {
        assert!((v - 1.0).abs() <= 1e-10);
    }
    for x in [[0.5, -1.0], [2.0, 2.0], [-1.25, 0.75]] {
        assert!((a.value_at(&x).unwrap() - b.value_at(&x).unwrap()).abs() <= 1e-10);
    }
}

#[test]
fn linear_oracle_is_reproduced_exactly() {
    let cs = coefficients(["0", "0"]);
    let report =
        convergence_order(&cs, 1.0, 16, &e("1 + x1"), &DensityOptions::default()).unwrap();
    assert_eq!(report.order, ObservedOrder::Exact, "{report:?}");
}

#[test]
fn advection_dominated_case_still_converges() {
    let cs = coefficients(["-10*x1", "-10*x2"]);
    let oracle = e("exp(-10*norm2(x))");
    let report = convergence_order(&cs, 2.0, 64, &oracle, &DensityOptions::default()).unwrap();
    match report.order {
        ObservedOrder::Rate(p) => assert!((1.5..=2.2).contains(&p), "order {p}"),
        ObservedOrder::Exact => panic!("unexpected exact order"),
    }
    let coarse = solve_density(&cs, 2.0, 16, &Boundary::Ones, &DensityOptions::default()).unwrap();
    assert!(coarse.peclet_max > 2.0);
    assert!(!coarse.warnings.is_empty());
}

#[test]
fn solved_density_is_infinitesimally_invariant() {
    let cs = ou();
    let rule = QuadratureRule::centered(2, 3.0, 241, Scheme::Simpson).unwrap();
    let boundary = Boundary::Expression(gaussian());
    let opts = DensityOptions::default();
    let mut worst = Vec::new();
    for n in [64, 128] {
        let rho = solve_density(&cs, 4.0, n, &boundary, &opts).unwrap();
        let summary = invariance_of_solution(&cs, &rho, &rule).unwrap();
        worst.push(summary.max_relative);
    }
    assert!(worst[1] <= 1e-3, "relative residual {}", worst[1]);
    assert!(worst[0] / worst[1] >= 3.5, "decrease {}", worst[0] / worst[1]);

    let flat = coefficients(["0", "0"]);
    let rho = solve_density(&flat, 4.0, 32, &Boundary::Ones, &opts).unwrap();
    let summary = invariance_of_solution(&flat, &rho, &rule).unwrap();
    assert!(summary.max_abs <= 1e-8);
}

#[test]
fn computed_densities_are_bit_reproducible() {
    let cs = ou();
    let opts = DensityOptions::default();
    let a = solve_density(&cs, 3.0, 48, &Boundary::Ones, &opts).unwrap();
    let b = solve_density(&cs, 3.0, 48, &Boundary::Ones, &opts).unwrap();
    assert!(a.values.iter().zip(&b.values).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn grid_file_round_trip() {
    let cs = ou();
    let rho = solve_density(&cs, 2.0, 8, &Boundary::Ones, &DensityOptions::default()).unwrap();
    let mut buf = Vec::new();
    write_density_csv(&rho, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("R,n,d\n2,8,2\nindex,x1,x2,value\n"));
    let (mesh, values) = read_density_csv(buf.as_slice()).unwrap();
    assert_eq!(mesh, rho.mesh);
    assert_eq!(values, rho.values);
    let diag = rho.diagnostics_json();
    assert!(diag["positivity_min"].as_f64().unwrap() > 0.0);
    assert!(diag["solver"]["backward_error"].as_f64().unwrap() <= 1e-12);
}

#[test]
fn flat_density_ball_measure_matches_area() {
    let rho = DensityField::analytic(e("1"), 2).unwrap();
    let v = ball_measures(&rho, &[2.0], &VolumeOptions::default()).unwrap();
    assert!((v[0] - 4.0 * PI).abs() <= 0.02 * 4.0 * PI);
}

#[test]
fn bounded_density_has_at_most_quadratic_volume_growth() {
    // ρ = 1 + bumps centered at k e1 with ‖ρ‖∞ ≤ 2.
    let bump = |k: i32| {
        format!("max(0, min(sqrt(sqrt((x1 - {k})^2 + x2^2)), 2*(0.5 - sqrt((x1 - {k})^2 + x2^2))))")
    };
    let src = format!("1 + {}", (1..=12).map(bump).collect::<Vec<_>>().join(" + "));
    let rho = DensityField::analytic(e(&src), 2).unwrap();
    let radii = [1.0, 2.0, 4.0, 8.0, 12.0];
    let v = ball_measures(&rho, &radii, &VolumeOptions::default()).unwrap();
    for (r, m) in radii.iter().zip(&v) {
        assert!(*m >= PI * r * r * 0.999 && *m <= 2.0 * PI * r * r, "r={r}: {m}");
    }
}

#[test]
fn planar_brownian_volume_sequence_grows_logarithmically() {
    let cs = coefficients(["0", "0"]);
    let rho = DensityField::analytic(e("1"), 2).unwrap();
    let levels = [10.0, 1e3, 1e6];
    let rows = recurrence_sequence(&cs, &rho, &levels, &VolumeOptions::default()).unwrap();
    for row in &rows {
        let exact = row.n.ln() / PI;
        assert!((row.a_n - exact).abs() <= 0.01 * exact, "{row:?}");
        assert!((row.v1 - PI * row.n * row.n).abs() <= 1e-9 * row.v1);
        assert_eq!(row.v2, 0.0);
    }
    let profile =
        volume_profile(Some(&cs), &rho, &[1.0, 3.0], &[1.0, 2.0], &VolumeOptions::default())
            .unwrap();
    assert!((profile.balls[1].v1.unwrap() - 9.0 * PI).abs() < 1e-9);
    assert!((profile.annuli[0].mu_annulus - 12.0 * PI).abs() < 1e-9);
}

#[test]
fn grid_density_radius_outside_mesh_is_rejected() {
    let cs = ou();
    let rho = solve_density(&cs, 2.0, 16, &Boundary::Ones, &DensityOptions::default()).unwrap();
    assert!(ball_measures(&rho.field(), &[2.5], &VolumeOptions::default()).is_err());
    assert!(ball_measures(&rho.field(), &[1.5], &VolumeOptions::default()).is_ok());
}
