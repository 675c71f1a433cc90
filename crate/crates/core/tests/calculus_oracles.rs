use sdelab::calculus::{
    bump_library, decompose_drift, divergence_report, invariance_residual, seeded_probes,
    CoefficientSet, DensityField, Drift, Generator, GeneratorMode, QuadratureRule, ResidualForm,
    Scheme, SmoothFunction,
};
use sdelab::expr::{parse_expr, DiffMode, Expr};

fn e(s: &str) -> Expr {
    parse_expr(s, 2).unwrap()
}

fn identity() -> Vec<Vec<Expr>> {
    vec![vec![e("1"), e("0")], vec![e("1")]]
}

fn unit_drift() -> CoefficientSet {
    CoefficientSet::build(
        2,
        &identity(),
        &[],
        Drift::Direct(vec![e("1"), e("0")]),
        &seeded_probes(2, 10.0, 1000, 1),
    )
    .unwrap()
}

fn rule() -> QuadratureRule {
    QuadratureRule::centered(2, 3.0, 241, Scheme::Simpson).unwrap()
}

/// Composite Simpson on [a, b] with a very fine grid; serves as a reference
/// for one-dimensional factors of the bump integrals.
fn reference_integral(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let n = 200_000;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn unit_drift_decomposes_against_both_invariant_measures() {
    let cs = unit_drift();
    let probes = seeded_probes(2, 10.0, 1000, 99);
    let mut out = [0.0; 2];
    let flat = DensityField::analytic(e("1"), 2).unwrap();
    let b = decompose_drift(&cs, &flat);
    for p in &probes {
        b.eval(p, &mut out).unwrap();
        assert!((out[0] - 1.0).abs() <= 1e-10 && out[1].abs() <= 1e-10);
    }
    let tilted = DensityField::analytic(e("exp(2*x1)"), 2).unwrap();
    let b = decompose_drift(&cs, &tilted);
    for p in &probes {
        b.eval(p, &mut out).unwrap();
        assert!(out[0].abs() <= 1e-10 && out[1].abs() <= 1e-10);
    }
    for rho in [&flat, &tilted] {
        let rep = divergence_report(&cs, rho, &rule()).unwrap();
        assert!(rep.max_abs <= 1e-8, "{rep:?}");
        assert!(rep.all_pass);
    }
}

#[test]
fn invariance_residual_vanishes_for_both_measures() {
    let cs = unit_drift();
    for density in ["1", "exp(2*x1)"] {
        let rho = DensityField::analytic(e(density), 2).unwrap();
        for bump in bump_library(&rule()).unwrap() {
            let rep =
                invariance_residual(&cs, &rho, bump.expr(), &rule(), ResidualForm::Weak).unwrap();
            assert!(!rep.cutoff_applied);
            assert!(rep.passes, "density {density}: {rep:?}");
        }
    }
}

#[test]
fn non_invariant_pair_matches_integration_by_parts() {
    // L = ½Δ, ρ = exp(x1): ∫ L f ρ = ½ ∫ f exp(x1).
    let cs = CoefficientSet::build(2, &identity(), &[], Drift::Direct(vec![e("0"), e("0")]), &[])
        .unwrap();
    let rho = DensityField::analytic(e("exp(x1)"), 2).unwrap();
    for bump in bump_library(&rule()).unwrap() {
        let rep = invariance_residual(&cs, &rho, bump.expr(), &rule(), ResidualForm::Weak).unwrap();
        let factor = |c: f64, w: f64, weight: &dyn Fn(f64) -> f64| {
            reference_integral(
                |x| {
                    let t = (x - c) / w;
                    (1.0 - t * t).powi(3) * weight(x)
                },
                c - w,
                c + w,
            )
        };
        let (c, w) = (&bump.center, &bump.half_width);
        let oracle = 0.5 * factor(c[0], w[0], &|x| x.exp()) * factor(c[1], w[1], &|_| 1.0);
        assert!(
            (rep.value - oracle).abs() <= 1e-6 * oracle.abs(),
            "residual {} vs oracle {oracle}",
            rep.value
        );
        assert!(!rep.passes);
    }
}

#[test]
fn strong_and_weak_forms_agree_to_quadrature_accuracy() {
    let cs = unit_drift();
    let rho = DensityField::analytic(e("exp(-norm2(x)/4)"), 2).unwrap();
    let f = e("exp(-2*norm2(x))");
    let weak = invariance_residual(&cs, &rho, &f, &rule(), ResidualForm::Weak).unwrap();
    let strong = invariance_residual(&cs, &rho, &f, &rule(), ResidualForm::Strong).unwrap();
    assert!((weak.value - strong.value).abs() < 1e-6 * weak.scale);
}

#[test]
fn generator_identities_hold_pointwise() {
    let a = vec![vec![e("1 + x1^2"), e("0.3*x2")], vec![e("2")]];
    let cs = CoefficientSet::build(
        2,
        &a,
        &[vec![e("x1*x2")]],
        Drift::Divergence(vec![e("-x1"), e("x2 - x2^3")]),
        &seeded_probes(2, 1.0, 100, 5),
    )
    .unwrap();
    let rho = DensityField::analytic(e("exp(-norm2(x)) * (2 + x1)"), 2).unwrap();
    let f = SmoothFunction::new(&e("x1^2*x2 + exp(x2)"), 2, DiffMode::Smooth).unwrap();
    let l = Generator::new(&cs, Some(&rho), GeneratorMode::L).unwrap();
    let adj = Generator::new(&cs, Some(&rho), GeneratorMode::Adjoint).unwrap();
    let sym = Generator::new(&cs, Some(&rho), GeneratorMode::Symmetric).unwrap();
    let b = decompose_drift(&cs, &rho);
    let mut bx = [0.0; 2];
    let mut grad = [0.0; 2];
    for p in seeded_probes(2, 1.0, 500, 6) {
        let (lf, af, sf) = (
            l.apply(&f, &p).unwrap(),
            adj.apply(&f, &p).unwrap(),
            sym.apply(&f, &p).unwrap(),
        );
        b.eval(&p, &mut bx).unwrap();
        f.gradient(&p, &mut grad).unwrap();
        let bgrad = bx[0] * grad[0] + bx[1] * grad[1];
        let scale = 1.0 + lf.abs() + sf.abs();
        assert!((lf - sf - bgrad).abs() <= 1e-10 * scale);
        assert!((lf + af - 2.0 * sf).abs() <= 1e-10 * scale);
    }
}

#[test]
fn symmetric_case_has_vanishing_remainder() {
    let cs = CoefficientSet::build(
        2,
        &identity(),
        &[],
        Drift::Direct(vec![e("-x1"), e("-x2")]),
        &[],
    )
    .unwrap();
    let rho = DensityField::analytic(e("exp(-norm2(x))"), 2).unwrap();
    let b = decompose_drift(&cs, &rho);
    let mut out = [0.0; 2];
    for p in seeded_probes(2, 5.0, 1000, 8) {
        b.eval(&p, &mut out).unwrap();
        assert!(out[0].abs().max(out[1].abs()) <= 1e-9);
    }
}
