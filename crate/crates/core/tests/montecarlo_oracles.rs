use sdelab::calculus::{seeded_probes, CoefficientSet, DensityField, Drift};
use sdelab::expr::{parse_expr, Expr};
use sdelab::montecarlo::{
    ergodic_average, exit_statistics, krylov_functional, krylov_refinement, moment_curve,
    simulate_ensemble, transition_histogram, MonteCarloError, PathStatus, ReferenceOptions,
    SimulationConfig,
};

fn e(dim: usize, s: &str) -> Expr {
    parse_expr(s, dim).unwrap()
}

fn isotropic(dim: usize, g: &[&str]) -> CoefficientSet {
    let a: Vec<Vec<Expr>> = (0..dim)
        .map(|i| (i..dim).map(|j| e(dim, if i == j { "1" } else { "0" })).collect())
        .collect();
    let g = g.iter().map(|s| e(dim, s)).collect();
    CoefficientSet::build(dim, &a, &[], Drift::Direct(g), &seeded_probes(dim, 10.0, 100, 3)).unwrap()
}

fn bm() -> CoefficientSet {
    isotropic(2, &["0", "0"])
}

fn ou() -> CoefficientSet {
    isotropic(2, &["-x1", "-x2"])
}

/// Composite Simpson on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn brownian_second_moment_grows_linearly() {
    let cfg = SimulationConfig::new(1e-3, 1.0, 4000, 11);
    let ens = simulate_ensemble(&bm(), &[0.0, 0.0], &cfg).unwrap();
    assert_eq!(ens.clips(), 0);
    let rows = moment_curve(&ens, &e(2, "norm2(x) + 1"), &[0.25, 0.5, 1.0], None).unwrap();
    for row in rows {
        // E‖X_t‖² = d·t for planar BM from the origin
        let exact = 2.0 * row.t + 1.0;
        assert!(row.estimate.within(exact, 3.0), "t = {}: {:?}", row.t, row.estimate);
    }
}

#[test]
fn ou_moments_decay_and_respect_the_lyapunov_bound() {
    let cfg = SimulationConfig::new(1e-3, 5.0, 3000, 12).radii(&[50.0]);
    let ens = simulate_ensemble(&ou(), &[2.0, 0.0], &cfg).unwrap();
    assert_eq!(ens.clips(), 0);
    let times: Vec<f64> = ens.record_times.clone();
    let rows = moment_curve(&ens, &e(2, "norm2(x) + 1"), &times, Some(2.0)).unwrap();
    assert!(rows.iter().all(|r| r.ratio.unwrap() <= 1.0));
    // stationary E‖X‖² + 1 = d·½ + 1; at t = 5 the transient is e^{−10}·4
    let last = rows.last().unwrap();
    assert!(last.estimate.within(2.0 + 4.0 * (-10f64).exp(), 3.0), "{:?}", last.estimate);
    let mean = moment_curve(&ens, &e(2, "x1"), &[1.0], None).unwrap().remove(0);
    assert!(mean.estimate.within(2.0 * (-1f64).exp(), 3.0), "{:?}", mean.estimate);
}

#[test]
fn brownian_exit_time_matches_the_classical_identity() {
    let cfg = SimulationConfig::new(1e-3, 20.0, 3000, 13).radii(&[1.0, 2.0]);
    let ens = simulate_ensemble(&bm(), &[0.0, 0.0], &cfg).unwrap();
    let rows = exit_statistics(&ens).unwrap();
    for row in &rows {
        let mean = row.mean.as_ref().expect("every path exits by T = 20");
        let exact = row.radius * row.radius / 2.0;
        assert!((mean.estimate - exact).abs() <= 0.1 * exact, "{row:?}");
    }
    for p in &ens.paths {
        assert!(p.exit_times[0] <= p.exit_times[1]);
        for o in p.overshoot.iter().flatten() {
            assert!(*o >= 0.0 && *o <= p.max_step);
        }
    }
}

#[test]
fn ou_exit_probability_stays_below_the_moment_bound() {
    let cfg = SimulationConfig::new(1e-3, 5.0, 1000, 14).radii(&[4.0]);
    let ens = simulate_ensemble(&ou(), &[0.0, 0.0], &cfg).unwrap();
    let row = &exit_statistics(&ens).unwrap()[0];
    // P(σ₄ ≤ T) ≤ e^{MT} φ(0) / inf_{∂B₄} φ with φ = ‖x‖² + 1, M = 2
    let bound = (2.0f64 * 5.0).exp() / 17.0;
    assert!(row.probability <= bound);
    assert!(row.ci_low <= row.probability && row.probability <= row.ci_high);
}

#[test]
fn superlinear_drift_blows_up_and_brownian_motion_does_not() {
    let cubic = isotropic(2, &["norm2(x)*x1", "norm2(x)*x2"]);
    let cfg = SimulationConfig::new(1e-3, 2.0, 2000, 15).radii(&[4.0, 8.0, 10.0]);
    let ens = simulate_ensemble(&cubic, &[1.0, 0.0], &cfg).unwrap();
    let rows = exit_statistics(&ens).unwrap();
    // A 10⁵-path reference run (Δ = 1e-3 and 2.5e-4) gives P(σ₁₀ ≤ 2) ≈ 0.9904 and
    // P(σ₈ ≤ 2) ≈ 0.9905, so a smaller ensemble can only be checked for consistency.
    for row in &rows[1..] {
        assert!(row.ci_low <= 0.9904 && 0.9904 <= row.ci_high + 2e-3, "{row:?}");
        assert!(row.probability > 0.98);
    }
    let (m4, m8) = (rows[0].median.unwrap(), rows[1].median.unwrap());
    assert!((m8 - m4).abs() < 0.1, "{m4} vs {m8}");

    let cfg = SimulationConfig::new(1e-3, 2.0, 2000, 16).radii(&[8.0]);
    let ens = simulate_ensemble(&bm(), &[0.0, 0.0], &cfg).unwrap();
    assert!(exit_statistics(&ens).unwrap()[0].probability <= 0.01);
}

#[test]
fn occupation_of_the_unit_disc_matches_the_heat_kernel() {
    let cfg = SimulationConfig::new(1e-3, 1.0, 4000, 17);
    let f = e(2, "ifge(1, norm2(x), 1, 0)");
    let report = krylov_functional(&bm(), &f, 1.0, &[vec![0.0, 0.0]], &[], &cfg).unwrap();
    // P₀(‖X_s‖ ≤ 1) = 1 − e^{−1/(2s)} for planar BM
    let exact = simpson(|s| if s == 0.0 { 1.0 } else { 1.0 - (-0.5 / s).exp() }, 0.0, 1.0, 20_000);
    let row = &report.rows[0];
    assert!(row.estimate.within(exact, 3.0), "{:?} vs {exact}", row.estimate);

    let one = krylov_functional(&bm(), &e(2, "1"), 1.0, &[vec![0.0, 0.0], vec![0.5, 0.5]], &[], &cfg).unwrap();
    for row in &one.rows {
        assert_eq!(row.estimate.estimate, 1.0);
        assert_eq!(row.estimate.std_error, 0.0);
    }
}

#[test]
fn singular_occupation_is_stable_under_refinement() {
    let cfg = SimulationConfig::new(1e-3, 1.0, 2000, 18);
    let f = e(2, "ifge(1, norm2(x), norm2(x)^(-1/4), 0)");
    let origin = vec![0.0, 0.0];
    let r = krylov_refinement(&bm(), &f, 1.0, &origin, std::slice::from_ref(&origin), &cfg).unwrap();
    assert!(r.stable, "{r:?}");
    assert!(r.coarse.estimate.is_finite() && r.coarse.estimate > 0.0);
    // without the declared singular point the start evaluation is an error
    assert!(krylov_functional(&bm(), &f, 1.0, &[origin], &[], &cfg).is_err());
}

#[test]
fn ou_time_average_converges_and_brownian_occupation_drifts() {
    let cfg = SimulationConfig::new(1e-3, 200.0, 1, 19);
    let curve = ergodic_average(&ou(), &[0.0, 0.0], &e(2, "norm2(x)"), 10.0, &cfg).unwrap();
    assert!((curve.terminal - 1.0).abs() <= 0.05, "{}", curve.terminal);
    assert!(curve.settled);
    let ones = ergodic_average(&ou(), &[0.0, 0.0], &e(2, "1"), 10.0, &cfg).unwrap();
    assert!(ones.averages.iter().all(|&a| a == 1.0));

    let curve = ergodic_average(&bm(), &[0.0, 0.0], &e(2, "ifge(1, norm2(x), 1, 0)"), 0.0, &cfg).unwrap();
    assert!(curve.terminal < 0.2, "{}", curve.terminal);
    assert!(!curve.settled, "{:?}", curve);
}

#[test]
fn ou_marginals_approach_the_stationary_density() {
    let cfg = SimulationConfig::new(1e-3, 6.0, 3000, 20);
    let rho = DensityField::analytic(e(2, "exp(-norm2(x))"), 2).unwrap();
    let report =
        transition_histogram(&ou(), &[0.0, 0.0], 6.0, &cfg, Some(&rho), &ReferenceOptions::default()).unwrap();
    for row in &report.ks {
        assert!(row.distance < row.critical_5, "{row:?}");
    }
}

#[test]
fn constant_drift_translates_the_mean_and_has_no_normalizable_reference() {
    let cs = isotropic(2, &["1", "0"]);
    let cfg = SimulationConfig::new(1e-3, 1.0, 2000, 21);
    let x0 = [0.5, -0.5];
    let report = transition_histogram(&cs, &x0, 1.0, &cfg, None, &ReferenceOptions::default()).unwrap();
    assert!(report.means[0].within(1.5, 3.0) && report.means[1].within(-0.5, 3.0));
    let short = transition_histogram(&cs, &x0, 0.01, &cfg, None, &ReferenceOptions::default()).unwrap();
    assert!(short.means[0].within(0.51, 3.0) && short.means[1].within(-0.5, 3.0));
    let flat = DensityField::analytic(e(2, "1"), 2).unwrap();
    let err = transition_histogram(&cs, &x0, 1.0, &cfg, Some(&flat), &ReferenceOptions::default());
    assert!(matches!(err, Err(MonteCarloError::NotNormalizable(_))), "{err:?}");
}

#[test]
fn ensembles_do_not_depend_on_the_thread_count() {
    let cs = isotropic(2, &["norm2(x)*x1", "-x2"]);
    let cfg = SimulationConfig::new(1e-3, 1.0, 64, 22).radii(&[2.0, 5.0]);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_ensemble(&cs, &[0.3, 0.1], &cfg).unwrap())
    };
    assert_eq!(run(1), run(8));
}

#[test]
fn halving_the_step_keeps_ou_moments_within_sampling_error() {
    let x0 = [2.0, 0.0];
    let phi = e(2, "norm2(x)");
    let estimate = |dt: f64| {
        let ens = simulate_ensemble(&ou(), &x0, &SimulationConfig::new(dt, 1.0, 2000, 23)).unwrap();
        moment_curve(&ens, &phi, &[1.0], None).unwrap().remove(0).estimate
    };
    let (a, b) = (estimate(2e-3), estimate(1e-3));
    let combined = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    assert!((a.estimate - b.estimate).abs() < 2.0 * combined, "{a:?} {b:?}");
}

#[test]
fn degenerate_diffusion_stops_the_path_with_a_status() {
    let probes = vec![vec![1.0], vec![-2.0]];
    let cs = CoefficientSet::build(1, &[vec![e(1, "x1^2")]], &[], Drift::Direct(vec![e(1, "0")]), &probes).unwrap();
    let ens = simulate_ensemble(&cs, &[0.0], &SimulationConfig::new(1e-3, 0.1, 4, 24)).unwrap();
    assert!(ens.paths.iter().all(|p| p.status == PathStatus::Degenerate && p.stopped_at == Some(0.0)));
    assert!(matches!(exit_statistics(&ens), Err(MonteCarloError::AllPathsFailed(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let cs = bm();
    let bad = [
        SimulationConfig::new(0.0, 1.0, 10, 1),
        SimulationConfig::new(1e-2, 1e-3, 10, 1),
        SimulationConfig::new(1e-3, 1.0, 10, 1).radii(&[2.0, 1.0]),
    ];
    for cfg in bad {
        assert!(matches!(simulate_ensemble(&cs, &[0.0, 0.0], &cfg), Err(MonteCarloError::Config(_))));
    }
    let cfg = SimulationConfig::new(1e-3, 1.0, 10, 1).radii(&[1.0]);
    assert!(matches!(
        simulate_ensemble(&cs, &[1.0, 0.0], &cfg),
        Err(MonteCarloError::StartOutside { .. })
    ));
}
