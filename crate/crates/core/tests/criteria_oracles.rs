use std::sync::Arc;

use proptest::prelude::*;
use sdelab::calculus::{
    seeded_probes, CoefficientSet, DensityField, Drift, Generator, GeneratorMode, SmoothFunction,
};
use sdelab::criteria::{
    evaluate_at, evaluate_criterion, operator_terms, recurrence_volume_test, smallest_constant,
    BuiltinCandidate, ConstantName, CriterionId, CriterionInputs, CriterionRequest, MarginField,
    OperatorRhs, Region, Side, Template, Variant, Verdict, DEFAULT_ROUNDING,
};
use sdelab::density::VolumeOptions;
use sdelab::expr::{parse_expr, DiffMode, Expr};

fn exprs(dim: usize, items: &[&str]) -> Vec<Expr> {
    items.iter().map(|s| parse_expr(s, dim).unwrap()).collect()
}

/// `a_upper` lists the rows of the upper triangle.
fn coefficients(dim: usize, a_upper: &[&[&str]], g: &[&str]) -> CoefficientSet {
    let a: Vec<Vec<Expr>> = a_upper.iter().map(|row| exprs(dim, row)).collect();
    CoefficientSet::build(dim, &a, &[], Drift::Direct(exprs(dim, g)), &seeded_probes(dim, 10.0, 200, 7))
        .unwrap()
}

fn planar_bm() -> CoefficientSet {
    coefficients(2, &[&["1", "0"], &["1"]], &["0", "0"])
}

fn ou_2d() -> CoefficientSet {
    coefficients(2, &[&["1", "0"], &["1"]], &["-x1", "-x2"])
}

fn density(dim: usize, s: &str) -> DensityField {
    DensityField::analytic(parse_expr(s, dim).unwrap(), dim).unwrap()
}

fn all_margins(field: &MarginField) -> impl Iterator<Item = (&Vec<f64>, f64)> {
    field
        .points
        .iter()
        .zip(&field.margins)
        .map(|(x, m)| (x, m.expect("every point evaluates").margin))
}

#[test]
fn catalog_has_thirteen_distinct_round_tripping_ids() {
    assert_eq!(CriterionId::ALL.len(), 13);
    let mut names: Vec<&str> = CriterionId::ALL.iter().map(|id| id.name()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), 13);
    for id in CriterionId::ALL {
        let json = serde_json::to_string(&id).unwrap();
        assert_eq!(json, format!("\"{}\"", id.name()));
        assert_eq!(serde_json::from_str::<CriterionId>(&json).unwrap(), id);
        assert_eq!(CriterionId::from_name(id.name()), Some(id));
        let entry = id.entry();
        assert!(!entry.template.is_empty() && !entry.conclusion.is_empty());
    }
}

#[test]
fn ou_quadratic_lyapunov_margin_is_four_norm_squared() {
    // Lφ = 2 − 2‖x‖² for φ = ‖x‖² + 1, so Mφ − Lφ = 4‖x‖² at M = 2.
    let cs = ou_2d();
    let inputs = CriterionInputs::new(&cs, None);
    let v = evaluate_criterion(&CriterionRequest::new(CriterionId::LyapunovL).m(2.0), &inputs).unwrap();
    assert_eq!(v.verdict, Verdict::HoldsOnGrid, "{:?}", v.notes);
    let field = v.grid.as_ref().unwrap();
    assert_eq!(field.evaluated, 256 * 200 + 1);
    for (x, m) in all_margins(field) {
        let n2 = x[0] * x[0] + x[1] * x[1];
        assert!((m - 4.0 * n2).abs() <= 1e-12 * (1.0 + n2), "{x:?}: {m}");
    }
}

#[test]
fn planar_bm_log_candidate_is_harmonic_outside_the_ball() {
    let cs = planar_bm();
    let inputs = CriterionInputs::new(&cs, None);
    let req = CriterionRequest::new(CriterionId::RecurrenceSupersolution)
        .n0(3.0)
        .region(Region::annulus(3.0, 40.0));
    let v = evaluate_criterion(&req, &inputs).unwrap();
    assert_eq!(v.verdict, Verdict::HoldsOnGrid, "{:?}", v.notes);
    assert_eq!(v.conclusion.as_deref(), Some("recurrent"));
    let field = v.grid.as_ref().unwrap();
    for x in &field.points {
        let m = evaluate_at(&req, &inputs, x).unwrap();
        assert!(m.lhs.abs() <= 1e-10, "Lg = {} at {x:?}", m.lhs);
    }
}

#[test]
fn default_log_candidate_matches_the_closed_form_generator() {
    // For g = ln‖x‖² + 2 outside the ball:
    // Lg = −2⟨Ax,x⟩/‖x‖⁴ + tr A/‖x‖² + 2⟨G,x⟩/‖x‖².
    let cs = coefficients(2, &[&["2 + x2^2", "0.5"], &["1 + x1^2"]], &["x2 - x1^3", "-x2"]);
    let inputs = CriterionInputs::new(&cs, None);
    let req = CriterionRequest::new(CriterionId::LyapunovExterior).m(0.0).n0(1.0);
    for x in seeded_probes(2, 8.0, 500, 11) {
        let n2 = x[0] * x[0] + x[1] * x[1];
        if n2 <= 1.0 {
            continue;
        }
        let (x1, x2) = (x[0], x[1]);
        let (a11, a12, a22) = (2.0 + x2 * x2, 0.5, 1.0 + x1 * x1);
        let axx = a11 * x1 * x1 + 2.0 * a12 * x1 * x2 + a22 * x2 * x2;
        let gx = (x2 - x1.powi(3)) * x1 - x2 * x2;
        let expected = -2.0 * axx / (n2 * n2) + (a11 + a22) / n2 + 2.0 * gx / n2;
        let got = evaluate_at(&req, &inputs, &x).unwrap().lhs;
        let scale = 2.0 * axx / (n2 * n2) + (a11 + a22) / n2 + 2.0 * gx.abs() / n2;
        assert!((got - expected).abs() <= 1e-10 * scale, "{x:?}: {got} vs {expected}");
    }
}

#[test]
fn ou_log_growth_ergodicity_margin_is_half_norm_squared() {
    // −⟨Ax,x⟩/‖x‖² + ½tr A + ⟨G,x⟩ = −‖x‖², so the margin against −½‖x‖² is ½‖x‖².
    let cs = ou_2d();
    let inputs = CriterionInputs::new(&cs, None);
    let req = CriterionRequest::new(CriterionId::ErgodicDrift)
        .variant(Variant::LogGrowth)
        .m(0.5)
        .n0(1.0);
    let v = evaluate_criterion(&req, &inputs).unwrap();
    assert_eq!(v.verdict, Verdict::HoldsOnGrid);
    for (x, m) in all_margins(v.grid.as_ref().unwrap()) {
        let n2 = x[0] * x[0] + x[1] * x[1];
        assert!(n2 > 1.0);
        assert!(m >= 0.5 * n2 * (1.0 - 1e-12), "{x:?}: {m}");
    }
}

#[test]
fn ou_satisfies_the_growth_nonexplosion_bound() {
    let cs = ou_2d();
    let inputs = CriterionInputs::new(&cs, None);
    let req = CriterionRequest::new(CriterionId::GrowthNonexplosion).m(1.0).n0(1.0);
    let v = evaluate_criterion(&req, &inputs).unwrap();
    assert_eq!(v.verdict, Verdict::HoldsOnGrid);
    assert_eq!(v.conclusion.as_deref(), Some("non-explosive"));
}

#[test]
fn eigengap_cancels_the_inward_drift() {
    // A = diag(1, 1 + ‖x‖⁴), G = −½‖x‖²x: half the eigengap is ½‖x‖⁴ = −⟨G,x⟩.
    let cs = coefficients(2, &[&["1", "0"], &["1 + norm2(x)^2"]], &["-0.5*norm2(x)*x1", "-0.5*norm2(x)*x2"]);
    let inputs = CriterionInputs::new(&cs, None);
    let req = CriterionRequest::new(CriterionId::Eigengap2d).m(1.0).n0(1.0);
    let v = evaluate_criterion(&req, &inputs).unwrap();
    assert_eq!(v.verdict, Verdict::HoldsOnGrid);
    let field = v.grid.as_ref().unwrap();
    for x in field.points.iter().step_by(97) {
        let m = evaluate_at(&req, &inputs, x).unwrap();
        let n2 = x[0] * x[0] + x[1] * x[1];
        assert!(m.lhs.abs() <= 1e-12 * n2 * n2, "{x:?}: {}", m.lhs);
    }
}

/// Composite Simpson reference for `∫_{−12}^x e^{−t²} dt`.
fn gaussian_primitive_reference(x: f64) -> f64 {
    let (a, n) = (-12.0, 400_000);
    let h = (x - a) / n as f64;
    let f = |t: f64| (-t * t).exp();
    let mut s = f(a) + f(x);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn gaussian_primitive_fails_invariance_with_margin_above_a_tenth() {
    // ρ = e^{−x²}, G = −x − 2e^{x²}; the adjoint drift is −x + 2e^{x²} and
    // L′h = 2 − 2x e^{−x²}, so L′h − h/√π ≥ 1 − 2 max(x e^{−x²}) > 0.14.
    let cs = coefficients(1, &[&["1"]], &["-x1 - 2*exp(x1^2)"]);
    let rho = density(1, "exp(-x1^2)");
    let inputs = CriterionInputs::new(&cs, Some(&rho));
    let alpha = 1.0 / std::f64::consts::PI.sqrt();
    let req = CriterionRequest::new(CriterionId::NonInvariance)
        .builtin(BuiltinCandidate::GaussianPrimitive)
        .mode(GeneratorMode::Adjoint)
        .alpha(alpha)
        .region(Region::Box {
            lo: vec![-10.0],
            hi: vec![10.0],
            counts: Some(vec![10_000]),
        });
    let v = evaluate_criterion(&req, &inputs).unwrap();
    assert_eq!(v.verdict, Verdict::HoldsOnGrid, "{:?}", v.notes);
    assert!(v.min_margin.unwrap() >= 0.1, "{:?}", v.min_margin);
    assert!(v.conclusion.unwrap().contains("not conservative"));

    let generator = Generator::new(&cs, Some(&rho), GeneratorMode::Adjoint).unwrap();
    let h = sdelab::calculus::GaussianPrimitive;
    for x in [-3.0, -1.0, -0.3, 0.0, 0.7071, 1.5, 4.0] {
        let (u, op, _) = operator_terms(&generator, &h, &[x]).unwrap();
        let expected = 2.0 - 2.0 * x * (-x * x).exp();
        assert!((op - expected).abs() <= 1e-12 * (1.0 + (x * x).exp()), "{x}: {op} vs {expected}");
        assert!((u - gaussian_primitive_reference(x)).abs() <= 1e-10, "{x}: {u}");
    }
}

const PSI: &str = "max(x1^2*(6 - x1), 54 - 81/x1)";

/// `(Ψ'' + Ψ')y² − ½Ψ`, branchwise by hand.
fn psi_margin(y: f64) -> f64 {
    if y <= 3.0 {
        9.0 * y * y + 6.5 * y.powi(3) - 3.0 * y.powi(4)
    } else {
        54.0 - 121.5 / y
    }
}

#[test]
fn dual_candidate_satisfies_the_lower_bound_in_y_space() {
    // In y = e^{−x} the adjoint of the ½ d²/dx² + (½ + ½e^{−x}) d/dx operator
    // acts as ½y²(Ψ'' + Ψ'); compared with Ψ/4 its margin is half of
    // (Ψ'' + Ψ')y² − ½Ψ.
    let probes: Vec<Vec<f64>> = (1..=100).map(|i| vec![0.5 * i as f64]).collect();
    let cs = CoefficientSet::build(
        1,
        &[exprs(1, &["x1^2"])],
        &[],
        Drift::Direct(exprs(1, &["0.5*x1^2"])),
        &probes,
    )
    .unwrap();
    let psi = parse_expr(PSI, 1).unwrap();
    let template = Template::Operator {
        generator: Generator::new(&cs, None, GeneratorMode::L).unwrap(),
        candidate: Arc::new(SmoothFunction::new(&psi, 1, DiffMode::Piecewise).unwrap()),
        rhs: OperatorRhs::Multiple(0.25),
        side: Side::AtLeast,
    };
    let points = Region::Box {
        lo: vec![0.005],
        hi: vec![50.0],
        counts: Some(vec![10_000]),
    }
    .points(1)
    .unwrap();
    let field = MarginField::evaluate(points, DEFAULT_ROUNDING, |x| template.at(x));
    assert_eq!(field.evaluated, 10_000);
    assert_eq!(field.violations, 0);
    assert!(field.min_margin.unwrap() >= 0.0);
    for (x, m) in all_margins(&field) {
        let expected = 0.5 * psi_margin(x[0]);
        assert!((m - expected).abs() <= 1e-9 * (1.0 + expected.abs()), "{x:?}: {m} vs {expected}");
    }
}

#[test]
fn dual_candidate_fails_invariance_in_x_space() {
    let cs = coefficients(1, &[&["1"]], &["0.5 + 0.5*exp(-x1)"]);
    let rho = density(1, "exp(x1)");
    let inputs = CriterionInputs::new(&cs, Some(&rho));
    let req = CriterionRequest::new(CriterionId::NonInvariance)
        .candidate("max(exp(-2*x1)*(6 - exp(-x1)), 54 - 81*exp(x1))")
        .mode(GeneratorMode::Adjoint)
        .alpha(0.25);
    let v = evaluate_criterion(&req, &inputs).unwrap();
    assert_eq!(v.verdict, Verdict::HoldsOnGrid, "{:?}", v.notes);
    assert!(v.conclusion.unwrap().contains("dual semigroup"));
    for x in v.grid.as_ref().unwrap().points.iter().step_by(53) {
        let y = (-x[0]).exp();
        let m = evaluate_at(&req, &inputs, x).unwrap().margin;
        let expected = 0.5 * psi_margin(y);
        assert!((m - expected).abs() <= 1e-8 * (1.0 + expected.abs()), "{x:?}: {m} vs {expected}");
    }

    // The same data with the operator itself: 1 + x² is a conservativeness candidate.
    let req = CriterionRequest::new(CriterionId::InvarianceLyapunov)
        .mode(GeneratorMode::L)
        .alpha(2.0)
        .candidate("1 + x1^2");
    let v = evaluate_criterion(&req, &inputs).unwrap();
    assert_eq!(v.verdict, Verdict::HoldsOnGrid, "{:?}", v.notes);
}

#[test]
fn witness_reproduces_in_isolation() {
    let cs = coefficients(2, &[&["1", "0"], &["1"]], &["x1*norm2(x)", "x2*norm2(x)"]);
    let inputs = CriterionInputs::new(&cs, None);
    let req = CriterionRequest::new(CriterionId::LyapunovL).m(1.0);
    let v = evaluate_criterion(&req, &inputs).unwrap();
    assert_eq!(v.verdict, Verdict::FailsWithWitness);
    assert!(v.conclusion.is_none());
    let witness = v.witness.unwrap();
    let again = evaluate_at(&req, &inputs, &witness).unwrap();
    assert_eq!(Some(again), v.witness_margin);
    assert!(again.margin < 0.0);
    assert_eq!(Some(again.margin), v.min_margin);
}

#[test]
fn bisection_finds_the_smallest_lyapunov_constant() {
    // max over x of (2 − 2‖x‖²)/(‖x‖² + 1) is 2, attained at the origin.
    let cs = ou_2d();
    let inputs = CriterionInputs::new(&cs, None);
    let req = CriterionRequest::new(CriterionId::LyapunovL).m(0.0);
    let m = smallest_constant(&req, &inputs, ConstantName::M, 0.0, 10.0, 1e-6).unwrap().unwrap();
    assert!((m - 2.0).abs() <= 2e-6, "{m}");
    assert_eq!(smallest_constant(&req, &inputs, ConstantName::M, 0.0, 1.0, 1e-6).unwrap(), None);
}

#[test]
fn missing_inputs_are_reported() {
    let cs = ou_2d();
    let inputs = CriterionInputs::new(&cs, None);
    assert!(evaluate_criterion(&CriterionRequest::new(CriterionId::LyapunovL), &inputs).is_err());
    let req = CriterionRequest::new(CriterionId::NonInvariance).alpha(1.0).candidate("1");
    assert!(evaluate_criterion(&req, &inputs).is_err(), "adjoint mode needs a density");
    let one_d = coefficients(1, &[&["1"]], &["0"]);
    let inputs = CriterionInputs::new(&one_d, None);
    let req = CriterionRequest::new(CriterionId::Eigengap2d).m(1.0).n0(1.0);
    assert!(evaluate_criterion(&req, &inputs).is_err());
}

#[test]
fn integrability_trend_separates_gaussian_from_flat_weight() {
    let cs = ou_2d();
    let gauss = density(2, "exp(-norm2(x))");
    let v = evaluate_criterion(
        &CriterionRequest::new(CriterionId::IntegrableCoeffs),
        &CriterionInputs::new(&cs, Some(&gauss)),
    )
    .unwrap();
    assert_eq!(v.verdict, Verdict::HoldsOnGrid, "{:?}", v.notes);
    assert!(v.conclusion.is_some());

    let bm = planar_bm();
    let flat = density(2, "1");
    let v = evaluate_criterion(
        &CriterionRequest::new(CriterionId::IntegrableCoeffs),
        &CriterionInputs::new(&bm, Some(&flat)),
    )
    .unwrap();
    assert_eq!(v.verdict, Verdict::Inconclusive);
    assert!(v.trend_table.is_some() && !v.notes.is_empty());
}

#[test]
fn planar_bm_volume_sequence_grows_like_log_over_pi() {
    let cs = planar_bm();
    let rho = density(2, "1");
    let v = recurrence_volume_test(&cs, &rho, 1e6, &VolumeOptions::default()).unwrap();
    assert_eq!(v.verdict, Verdict::HoldsOnGrid, "{:?}", v.notes);
    assert_eq!(v.conclusion.as_deref(), Some("recurrent"));
    let table = v.trend_table.unwrap();
    for row in &table.rows {
        let (n, a_n) = (row[0], row[1]);
        let expected = n.ln() / std::f64::consts::PI;
        assert!((a_n - expected).abs() <= 0.01 * expected, "n = {n}: {a_n} vs {expected}");
    }
}

#[test]
fn spatial_bm_volume_sequence_converges() {
    let cs = coefficients(3, &[&["1", "0", "0"], &["1", "0"], &["1"]], &["0", "0", "0"]);
    let rho = density(3, "1");
    let v = recurrence_volume_test(&cs, &rho, 1e4, &VolumeOptions::default()).unwrap();
    assert_eq!(v.verdict, Verdict::Inconclusive);
    assert!(v.notes.iter().any(|n| n.contains("converge")), "{:?}", v.notes);
}

#[test]
fn ou_volume_sequence_is_recurrent() {
    let cs = ou_2d();
    let rho = density(2, "exp(-norm2(x))");
    let v = recurrence_volume_test(&cs, &rho, 1e3, &VolumeOptions::default()).unwrap();
    assert_eq!(v.verdict, Verdict::HoldsOnGrid, "{:?}", v.notes);
}

#[test]
fn volume_conservative_accepts_ou_with_polynomial_annuli() {
    // B = 0, so the pointwise part reads 1 ≤ ‖x‖² ln(‖x‖ + 1), true for ‖x‖ ≥ 1.2.
    let cs = ou_2d();
    let rho = density(2, "exp(-norm2(x))");
    let inputs = CriterionInputs::new(&cs, Some(&rho));
    let req = CriterionRequest::new(CriterionId::VolumeConservative)
        .m(1.0)
        .c(1.0)
        .n0(2.0)
        .n1(1.0);
    let v = evaluate_criterion(&req, &inputs).unwrap();
    assert_eq!(v.verdict, Verdict::HoldsOnGrid, "{:?}", v.notes);
    assert!(v.trend_table.is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Scaling A, G and M by a power of two scales every radial margin by it exactly.
    #[test]
    fn radial_margins_scale_with_the_coefficients(
        k in -6i32..6,
        a in 0.25f64..4.0,
        g in -3.0f64..3.0,
        x in prop::collection::vec(-20.0f64..20.0, 2),
    ) {
        prop_assume!(x[0] * x[0] + x[1] * x[1] > 1.0);
        let s = 2f64.powi(k);
        let build = |f: f64| {
            let a11 = format!("{}*(1 + x2^2)", a * f);
            let a22 = format!("{}", a * f);
            let g1 = format!("{}*x1", g * f);
            let g2 = format!("{}*x2^3", g * f);
            coefficients(2, &[&[a11.as_str(), "0"], &[a22.as_str()]], &[g1.as_str(), g2.as_str()])
        };
        let (base, scaled) = (build(1.0), build(s));
        for (id, variant) in [
            (CriterionId::GrowthNonexplosion, None),
            (CriterionId::Eigengap2d, None),
            (CriterionId::ErgodicDrift, Some(Variant::Quadratic)),
        ] {
            let mut req = CriterionRequest::new(id).m(0.7).n0(1.0);
            req.variant = variant;
            let m1 = evaluate_at(&req, &CriterionInputs::new(&base, None), &x).unwrap();
            let m2 = evaluate_at(&req.clone().m(0.7 * s), &CriterionInputs::new(&scaled, None), &x).unwrap();
            prop_assert_eq!(m2.margin, s * m1.margin, "{:?}", id);
        }
    }
}
