//! Stage execution in the fixed order density → criteria → simulation →
//! ergodic → krylov → comparisons. A failing stage is recorded in its block
//! and later stages that need its output are skipped with an error of their own.

use std::collections::BTreeMap;
use std::time::Instant;

use sdelab::calculus::{
    decompose_drift, integrate_many, seeded_probes, CalculusError, DensityField, QuadratureRule,
    Scheme,
};
use sdelab::criteria::{
    evaluate_criterion, recurrence_volume_test, smallest_constant, ConstantName, CriterionInputs,
    CriterionVerdict, Verdict,
};
use sdelab::density::{
    ball_measures, invariance_of_field, solve_density, Boundary, DensityApproximation,
    DensityOptions, InvarianceSummary, SolverChoice, VolumeOptions,
};
use sdelab::expr::{parse_expr, Expr};
use sdelab::montecarlo::{
    ergodic_average, exit_statistics, krylov_functional, krylov_refinement, lq_norms,
    moment_curve, simulate_ensemble, transition_histogram, ErgodicCurve, ExitRow, KrylovReport,
    MomentRow, MonteCarloError, PathEnsemble, PathStatus, ReferenceOptions, RefinementReport,
    SimulationConfig, TransitionReport,
};
use serde::Serialize;

use crate::config::{
    BoundarySpec, Prepared, Scenario, SolverSpec, Stepping, SCHEMA_VERSION, SOLVED,
};

/// Which stages a subcommand runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSet {
    pub density: bool,
    pub criteria: bool,
    pub simulation: bool,
    pub ergodic: bool,
    pub krylov: bool,
    pub comparisons: bool,
}

impl StageSet {
    pub fn all() -> Self {
        StageSet {
            density: true,
            criteria: true,
            simulation: true,
            ergodic: true,
            krylov: true,
            comparisons: true,
        }
    }

    pub fn none() -> Self {
        StageSet {
            density: false,
            criteria: false,
            simulation: false,
            ergodic: false,
            krylov: false,
            comparisons: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Worker threads for grid evaluation and path simulation; 0 lets rayon decide.
    pub threads: usize,
    pub stages: StageSet,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            threads: 0,
            stages: StageSet::all(),
        }
    }
}

pub mod exit_code {
    pub const GREEN: i32 = 0;
    pub const CRITERION_FAILED: i32 = 2;
    pub const STAGE_ERROR: i32 = 3;
    pub const CONFIG_ERROR: i32 = 4;
}

#[derive(Debug, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Stage<T> {
    Skipped,
    Ok { result: T },
    Error { message: String },
}

impl<T> Stage<T> {
    pub fn result(&self) -> Option<&T> {
        match self {
            Stage::Ok { result } => Some(result),
            _ => None,
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self, Stage::Error { .. })
    }

    fn from_result<E: std::fmt::Display>(r: Result<T, E>) -> Self {
        match r {
            Ok(result) => Stage::Ok { result },
            Err(e) => Stage::Error {
                message: e.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub name: &'static str,
    pub version: &'static str,
}

/// Seeds actually used; each stochastic stage offsets the master seed.
#[derive(Debug, Clone, Serialize)]
pub struct SeedRecord {
    pub master: u64,
    pub simulation: u64,
    pub transition: u64,
    pub ergodic: u64,
    pub krylov: u64,
}

impl SeedRecord {
    pub fn new(master: u64) -> Self {
        SeedRecord {
            master,
            simulation: master,
            transition: master.wrapping_add(1),
            ergodic: master.wrapping_add(2),
            krylov: master.wrapping_add(3),
        }
    }
}

/// `B = G − β` sampled at probe points.
#[derive(Debug, Clone, Serialize)]
pub struct RemainderRange {
    pub probes: usize,
    pub skipped: usize,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyticDensityReport {
    pub name: String,
    pub expr: String,
    pub drift_remainder: Option<RemainderRange>,
    pub invariance: Option<InvarianceSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolvedBox {
    pub half_width: f64,
    pub cells: usize,
    pub approximation: DensityApproximation,
    pub invariance: Option<InvarianceSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityOutcome {
    pub analytic: Vec<AnalyticDensityReport>,
    pub solved: Vec<SolvedBox>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchOutcome {
    pub id: String,
    pub constant: ConstantName,
    pub lo: f64,
    pub hi: f64,
    /// `None` when the check fails even at `hi`.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VolumeRow {
    pub radius: f64,
    pub mu_ball: f64,
    /// `μ(B_r) / r^d`.
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CriteriaOutcome {
    pub density: Option<String>,
    pub verdicts: Vec<CriterionVerdict>,
    pub searches: Vec<SearchOutcome>,
    pub volume_recurrence: Option<CriterionVerdict>,
    pub volume_profile: Vec<VolumeRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentCurve {
    pub phi: String,
    pub m: Option<f64>,
    pub rows: Vec<MomentRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub paths: usize,
    pub usable: usize,
    pub failed: usize,
    pub absorbed: usize,
    pub clips: u64,
    pub steps: usize,
    pub record_times: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransitionOutcome {
    pub reference: Option<String>,
    /// `"compared"`, `"none"`, or why the reference could not be used.
    pub reference_status: String,
    pub report: TransitionReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationOutcome {
    pub x0: Vec<f64>,
    pub config: SimulationConfig,
    pub ensemble: EnsembleSummary,
    pub moments: Vec<MomentCurve>,
    pub exits: Vec<ExitRow>,
    pub transition: Option<TransitionOutcome>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LqRow {
    pub radius: f64,
    pub norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KrylovOutcome {
    pub f: String,
    pub report: KrylovReport,
    pub refinement: Option<RefinementReport>,
    pub lq: Vec<LqRow>,
}

/// One analytic prediction against a computed or simulated quantity.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub name: String,
    pub observed: f64,
    pub reference: f64,
    pub consistent: bool,
    pub detail: String,
}

#[derive(Debug, Serialize)]
pub struct Stages {
    pub density: Stage<DensityOutcome>,
    pub criteria: Stage<CriteriaOutcome>,
    pub simulation: Stage<SimulationOutcome>,
    pub ergodic: Stage<ErgodicCurve>,
    pub krylov: Stage<KrylovOutcome>,
    pub comparisons: Stage<Vec<Comparison>>,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct VerdictCounts {
    pub holds_on_grid: usize,
    pub fails_with_witness: usize,
    pub inconclusive: usize,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub artifact: Artifact,
    pub scenario: Scenario,
    pub seeds: SeedRecord,
    pub stages: Stages,
    pub verdicts: VerdictCounts,
    /// Conclusions of the criteria that hold on their grids.
    pub conclusions: Vec<String>,
    pub notes: Vec<String>,
    pub exit_code: i32,
    /// Wall-clock milliseconds per stage; the only non-reproducible numbers.
    pub timings_ms: BTreeMap<&'static str, f64>,
    pub threads: usize,
}

/// Bulk data written to CSV but not embedded in the JSON report.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub density: Option<DensityApproximation>,
    pub ensemble: Option<PathEnsemble>,
}

impl Report {
    fn all_verdicts(&self) -> Vec<&CriterionVerdict> {
        match self.stages.criteria.result() {
            Some(c) => c.verdicts.iter().chain(c.volume_recurrence.as_ref()).collect(),
            None => Vec::new(),
        }
    }
}

fn stage_error(msg: impl Into<String>) -> String {
    msg.into()
}

struct Densities<'a> {
    prepared: &'a Prepared,
    solved: Option<DensityField>,
}

impl Densities<'_> {
    fn field(&self, name: &str) -> Result<DensityField, String> {
        if name == SOLVED {
            return self
                .solved
                .clone()
                .ok_or_else(|| stage_error("the solved density is unavailable (density stage did not produce it)"));
        }
        let (_, e) = self
            .prepared
            .analytic
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| format!("unknown density {name:?}"))?;
        DensityField::analytic(e.clone(), self.prepared.scenario.dimension).map_err(|e| e.to_string())
    }
}

fn sim_config(s: &Stepping, paths: usize, seed: u64) -> SimulationConfig {
    let mut cfg = SimulationConfig::new(s.dt, s.horizon, paths, seed).radii(&s.radii);
    if let Some(k) = s.kappa {
        cfg.kappa = k;
    }
    if let Some(n) = s.samples {
        cfg.samples = n;
    }
    cfg
}

fn remainder_range(prepared: &Prepared, rho: &DensityField, half_width: f64) -> RemainderRange {
    let d = prepared.scenario.dimension;
    let b = decompose_drift(&prepared.coefficients, rho);
    let probes = seeded_probes(d, half_width, 1000, 99);
    let mut out = vec![0.0; d];
    let (mut min, mut max) = (vec![f64::INFINITY; d], vec![f64::NEG_INFINITY; d]);
    let mut skipped = 0;
    for p in &probes {
        if b.eval(p, &mut out).is_err() || out.iter().any(|v| !v.is_finite()) {
            skipped += 1;
            continue;
        }
        for k in 0..d {
            min[k] = min[k].min(out[k]);
            max[k] = max[k].max(out[k]);
        }
    }
    RemainderRange {
        probes: probes.len(),
        skipped,
        min,
        max,
    }
}

/// Spread of `ρ₂/ρ₁` over probe points, as `(min, max)`.
fn ratio_range(a: &Expr, b: &Expr, dim: usize, half_width: f64) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in seeded_probes(dim, half_width, 200, 7) {
        let (Ok(x), Ok(y)) = (a.eval(&p), b.eval(&p)) else { continue };
        if x > 0.0 && y > 0.0 {
            lo = lo.min(y / x);
            hi = hi.max(y / x);
        }
    }
    lo.is_finite().then_some((lo, hi))
}

fn run_density(prepared: &Prepared, artifacts: &mut Artifacts) -> Result<DensityOutcome, String> {
    let sc = &prepared.scenario;
    let req = sc.density.as_ref().expect("density stage requested");
    let cs = &prepared.coefficients;
    let d = sc.dimension;
    let mut outcome = DensityOutcome {
        analytic: Vec::new(),
        solved: Vec::new(),
        notes: Vec::new(),
    };
    for (name, e) in &prepared.analytic {
        let rho = DensityField::analytic(e.clone(), d).map_err(|e| format!("density {name:?}: {e}"))?;
        let half = req.invariance.map_or(3.0, |i| i.half_width);
        let invariance = match req.invariance {
            Some(inv) => {
                let rule = QuadratureRule::centered(d, inv.half_width, inv.nodes, Scheme::Simpson)
                    .map_err(|e| e.to_string())?;
                Some(invariance_of_field(cs, &rho, &rule).map_err(|e| format!("density {name:?}: {e}"))?)
            }
            None => None,
        };
        outcome.analytic.push(AnalyticDensityReport {
            name: name.clone(),
            expr: e.to_string(),
            drift_remainder: Some(remainder_range(prepared, &rho, half)),
            invariance,
        });
    }
    let passing: Vec<_> = outcome
        .analytic
        .iter()
        .zip(&prepared.analytic)
        .filter(|(r, _)| r.invariance.as_ref().is_some_and(|i| i.all_pass))
        .map(|(_, (n, e))| (n, e))
        .collect();
    for (i, (n1, e1)) in passing.iter().enumerate() {
        for (n2, e2) in &passing[i + 1..] {
            if let Some((lo, hi)) = ratio_range(e1, e2, d, 3.0) {
                if hi - lo > 1e-6 * hi.abs() {
                    outcome.notes.push(format!(
                        "densities {n1:?} and {n2:?} both pass the invariance check, but their ratio ranges over [{lo:.6e}, {hi:.6e}]; they are not constant multiples of each other, so the infinitesimally invariant measure is not unique"
                    ));
                }
            }
        }
    }

    if let Some(s) = &req.solve {
        let boundary = match &s.boundary {
            BoundarySpec::Ones => Boundary::Ones,
            BoundarySpec::Expression(src) => Boundary::Expression(parse_expr(src, d).map_err(|e| e.to_string())?),
        };
        let options = DensityOptions {
            solver: match s.solver {
                SolverSpec::Auto => SolverChoice::Auto,
                SolverSpec::Direct => SolverChoice::Direct,
                SolverSpec::Iterative => SolverChoice::Iterative,
            },
            singular_points: s.singular_points.clone(),
            ..DensityOptions::default()
        };
        for (&r, n) in s.half_widths.iter().zip(s.cell_ladder()) {
            let approx = solve_density(cs, r, n, &boundary, &options).map_err(|e| format!("box R = {r}, n = {n}: {e}"))?;
            let invariance = match req.invariance {
                Some(inv) => {
                    let half = inv.half_width.min(0.5 * r);
                    let rule = QuadratureRule::centered(d, half, inv.nodes, Scheme::Simpson)
                        .map_err(|e| e.to_string())?;
                    Some(invariance_of_field(cs, &approx.field(), &rule).map_err(|e| format!("box R = {r}: {e}"))?)
                }
                None => None,
            };
            if !approx.valid {
                outcome.notes.push(format!("solution on R = {r} is not strictly positive; flagged invalid"));
            }
            outcome.solved.push(SolvedBox {
                half_width: r,
                cells: n,
                approximation: approx,
                invariance,
            });
        }
        artifacts.density = outcome.solved.last().map(|b| b.approximation.clone());
    }
    Ok(outcome)
}

fn run_criteria(prepared: &Prepared, densities: &Densities) -> Result<CriteriaOutcome, String> {
    let req = prepared.scenario.criteria.as_ref().expect("criteria stage requested");
    let cs = &prepared.coefficients;
    let rho = req.density.as_deref().map(|n| densities.field(n)).transpose()?;
    let volume = VolumeOptions::default();
    let inputs = CriterionInputs::new(cs, rho.as_ref());
    let mut outcome = CriteriaOutcome {
        density: req.density.clone(),
        verdicts: Vec::new(),
        searches: Vec::new(),
        volume_recurrence: None,
        volume_profile: Vec::new(),
    };
    for (i, check) in req.checks.iter().enumerate() {
        let v = evaluate_criterion(check, &inputs)
            .map_err(|e| format!("criteria.checks[{i}] ({}): {e}", check.id.name()))?;
        outcome.verdicts.push(v);
    }
    for (i, s) in req.searches.iter().enumerate() {
        let value = smallest_constant(&s.check, &inputs, s.constant, s.lo, s.hi, s.tolerance)
            .map_err(|e| format!("criteria.searches[{i}]: {e}"))?;
        outcome.searches.push(SearchOutcome {
            id: s.check.id.name().to_string(),
            constant: s.constant,
            lo: s.lo,
            hi: s.hi,
            value,
        });
    }
    if let (Some(v), Some(rho)) = (&req.volume_recurrence, &rho) {
        outcome.volume_recurrence =
            Some(recurrence_volume_test(cs, rho, v.n_max, &volume).map_err(|e| format!("volume recurrence: {e}"))?);
    }
    if let (Some(radii), Some(rho)) = (&req.volume_profile, &rho) {
        let mu = ball_measures(rho, radii, &volume).map_err(|e| format!("volume profile: {e}"))?;
        let d = prepared.scenario.dimension as i32;
        outcome.volume_profile = radii
            .iter()
            .zip(mu)
            .map(|(&radius, mu_ball)| VolumeRow {
                radius,
                mu_ball,
                ratio: mu_ball / radius.powi(d),
            })
            .collect();
    }
    Ok(outcome)
}

fn run_simulation(
    prepared: &Prepared,
    densities: &Densities,
    seeds: &SeedRecord,
    artifacts: &mut Artifacts,
) -> Result<SimulationOutcome, String> {
    let s = prepared.scenario.simulation.as_ref().expect("simulation stage requested");
    let cs = &prepared.coefficients;
    let d = prepared.scenario.dimension;
    let cfg = sim_config(&s.stepping(), s.paths, seeds.simulation);
    let ens = simulate_ensemble(cs, &s.x0, &cfg).map_err(|e| e.to_string())?;
    let mut moments = Vec::new();
    for m in &s.moments {
        let phi = parse_expr(&m.phi, d).map_err(|e| e.to_string())?;
        let rows = moment_curve(&ens, &phi, &ens.record_times, m.m).map_err(|e| format!("moment {}: {e}", m.phi))?;
        moments.push(MomentCurve {
            phi: m.phi.clone(),
            m: m.m,
            rows,
        });
    }
    let exits = if cfg.radii.is_empty() {
        Vec::new()
    } else {
        exit_statistics(&ens).map_err(|e| e.to_string())?
    };
    let transition = match &s.transition {
        Some(t) => {
            let mut tcfg = cfg.clone();
            tcfg.seed = seeds.transition;
            let rho = t.reference.as_deref().map(|n| densities.field(n)).transpose()?;
            let opts = ReferenceOptions::default();
            let (report, status) = match transition_histogram(cs, &s.x0, t.t, &tcfg, rho.as_ref(), &opts) {
                Ok(r) => {
                    let status = if rho.is_some() { "compared" } else { "none" };
                    (r, status.to_string())
                }
                Err(MonteCarloError::NotNormalizable(why)) => {
                    let r = transition_histogram(cs, &s.x0, t.t, &tcfg, None, &opts).map_err(|e| e.to_string())?;
                    (r, format!("reference not normalizable: {why}"))
                }
                Err(e) => return Err(e.to_string()),
            };
            Some(TransitionOutcome {
                reference: t.reference.clone(),
                reference_status: status,
                report,
            })
        }
        None => None,
    };
    let ensemble = EnsembleSummary {
        paths: ens.paths.len(),
        usable: ens.usable().count(),
        failed: ens.failed(),
        absorbed: ens
            .paths
            .iter()
            .filter(|p| p.status == PathStatus::ExitedLargestRadius)
            .count(),
        clips: ens.clips(),
        steps: cfg.steps(),
        record_times: ens.record_times.len(),
    };
    let outcome = SimulationOutcome {
        x0: s.x0.clone(),
        config: cfg,
        ensemble,
        moments,
        exits,
        transition,
    };
    artifacts.ensemble = Some(ens);
    Ok(outcome)
}

fn run_ergodic(prepared: &Prepared, seeds: &SeedRecord) -> Result<ErgodicCurve, String> {
    let e = prepared.scenario.ergodic.as_ref().expect("ergodic stage requested");
    let f = parse_expr(&e.f, prepared.scenario.dimension).map_err(|e| e.to_string())?;
    let cfg = sim_config(&e.stepping(), 1, seeds.ergodic);
    ergodic_average(&prepared.coefficients, &e.x0, &f, e.burn_in, &cfg).map_err(|e| e.to_string())
}

fn run_krylov(prepared: &Prepared, densities: &Densities, seeds: &SeedRecord) -> Result<KrylovOutcome, String> {
    let k = prepared.scenario.krylov.as_ref().expect("krylov stage requested");
    let cs = &prepared.coefficients;
    let f = parse_expr(&k.f, prepared.scenario.dimension).map_err(|e| e.to_string())?;
    let mut cfg = SimulationConfig::new(k.dt, k.t, k.paths, seeds.krylov);
    if let Some(r) = &k.radii {
        cfg = cfg.radii(r);
    }
    let report = krylov_functional(cs, &f, k.t, &k.starts, &k.singular, &cfg).map_err(|e| e.to_string())?;
    let refinement = if k.refine {
        Some(krylov_refinement(cs, &f, k.t, &k.starts[0], &k.singular, &cfg).map_err(|e| e.to_string())?)
    } else {
        None
    };
    let lq = match &k.lq {
        Some(l) => {
            let rho = densities.field(&l.density)?;
            let norms = lq_norms(&f, &rho, l.q, &l.radii, &VolumeOptions::default()).map_err(|e| e.to_string())?;
            l.radii
                .iter()
                .zip(norms)
                .map(|(&radius, norm)| LqRow { radius, norm })
                .collect()
        }
        None => Vec::new(),
    };
    Ok(KrylovOutcome {
        f: k.f.clone(),
        report,
        refinement,
        lq,
    })
}

/// Points on the sphere of radius `r`.
fn sphere_points(dim: usize, r: f64) -> Vec<Vec<f64>> {
    match dim {
        1 => vec![vec![-r], vec![r]],
        2 => (0..512)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / 512.0;
                vec![r * t.cos(), r * t.sin()]
            })
            .collect(),
        _ => {
            // Fibonacci lattice
            let n = 2000;
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|k| {
                    let z = 1.0 - (2.0 * k as f64 + 1.0) / n as f64;
                    let s = (1.0 - z * z).sqrt();
                    let t = golden * k as f64;
                    vec![r * s * t.cos(), r * s * t.sin(), r * z]
                })
                .collect()
        }
    }
}

/// `∫fρ / ∫ρ` by Simpson quadrature on the reference box.
fn space_average(f: &Expr, rho: &DensityField, dim: usize) -> Result<f64, CalculusError> {
    let (half, nodes) = match rho {
        DensityField::Grid(g) => (g.mesh().half_width, if dim == 3 { 81 } else { 241 }),
        DensityField::Analytic { .. } => (8.0, if dim == 3 { 81 } else { 241 }),
    };
    let rule = QuadratureRule::centered(dim, half, nodes, Scheme::Simpson)?;
    let sums = integrate_many(&rule, 2, |x, out| -> Result<(), CalculusError> {
        let w = rho.weight(x)?;
        out[0] = if w == 0.0 { 0.0 } else { f.eval(x)? * w };
        out[1] = w;
        Ok(())
    })?;
    Ok(sums[0] / sums[1])
}

/// Largest relative deviation between `ρ_h/ρ_h(0)` and `ρ_ref/ρ_ref(0)` over
/// mesh nodes in the box of half-width `within`.
fn relative_deviation(
    approx: &DensityApproximation,
    reference: impl Fn(&[f64]) -> Option<f64>,
    within: f64,
) -> Option<f64> {
    let mesh = &approx.mesh;
    let d = mesh.dim;
    let r0 = reference(&vec![0.0; d])?;
    let mut multi = vec![0; d];
    let mut x = vec![0.0; d];
    let mut worst = 0.0f64;
    for (i, v) in approx.values.iter().enumerate() {
        mesh.multi(i, &mut multi);
        mesh.point(&multi, &mut x);
        if x.iter().any(|c| c.abs() > within + 1e-12) {
            continue;
        }
        let w = reference(&x)? / r0;
        worst = worst.max((v - w).abs() / w.abs());
    }
    Some(worst)
}

fn run_comparisons(prepared: &Prepared, stages: &Stages, densities: &Densities) -> Result<Vec<Comparison>, String> {
    let sc = &prepared.scenario;
    let d = sc.dimension;
    let mut out = Vec::new();
    if let Some(dens) = stages.density.result() {
        let solve = sc.density.as_ref().and_then(|r| r.solve.as_ref());
        if let (Some(last), Some(s)) = (dens.solved.last(), solve) {
            let inner = 0.25 * last.half_width;
            for pair in dens.solved.windows(2) {
                let (small, large) = (&pair[0], &pair[1]);
                let within = inner.min(small.half_width);
                if let Some(dev) = relative_deviation(&small.approximation, |x| large.approximation.value_at(x), within) {
                    out.push(Comparison {
                        name: format!("nested boxes R = {} vs R = {}", small.half_width, large.half_width),
                        observed: dev,
                        reference: 0.05,
                        consistent: dev <= 0.05,
                        detail: format!("largest relative difference on [-{within}, {within}]^{d}"),
                    });
                }
            }
            if let Some(name) = &s.reference {
                let e = &prepared.analytic.iter().find(|(n, _)| n == name).expect("validated").1;
                if let Some(dev) = relative_deviation(&last.approximation, |x| e.eval(x).ok(), inner) {
                    out.push(Comparison {
                        name: format!("solved density vs {name}"),
                        observed: dev,
                        reference: 0.05,
                        consistent: dev <= 0.05,
                        detail: format!("largest relative difference after normalizing at the origin, on [-{inner}, {inner}]^{d}"),
                    });
                }
            }
        }
    }
    if let (Some(sim), Some(req)) = (stages.simulation.result(), sc.simulation.as_ref()) {
        for curve in &sim.moments {
            let Some(m) = curve.m else { continue };
            let worst = curve
                .rows
                .iter()
                .map(|r| (r.estimate.estimate - 3.0 * r.estimate.std_error) / r.bound.expect("bound with M"))
                .fold(f64::NEG_INFINITY, f64::max);
            out.push(Comparison {
                name: format!("moment bound for φ = {}", curve.phi),
                observed: worst,
                reference: 1.0,
                consistent: worst <= 1.0,
                detail: format!("largest (estimate − 3 SE) / (e^({m}·t)·φ(x₀)) over recorded times"),
            });
            let phi = parse_expr(&curve.phi, d).map_err(|e| e.to_string())?;
            let phi0 = phi.eval(&req.x0).map_err(|e| e.to_string())?;
            for row in &sim.exits {
                let inf = sphere_points(d, row.radius)
                    .iter()
                    .filter_map(|p| phi.eval(p).ok())
                    .fold(f64::INFINITY, f64::min);
                if !(inf > 0.0) {
                    continue;
                }
                let bound = ((m * sim.config.horizon).exp() * phi0 / inf).min(1.0);
                out.push(Comparison {
                    name: format!("exit bound P(σ_{} ≤ {}) for φ = {}", row.radius, sim.config.horizon, curve.phi),
                    observed: row.probability,
                    reference: bound,
                    consistent: row.ci_low <= bound,
                    detail: "e^(MT)·φ(x₀)/inf φ on the sphere, against the Wilson lower limit".into(),
                });
            }
        }
        if let Some(t) = &sim.transition {
            if t.reference_status == "compared" {
                for ks in &t.report.ks {
                    out.push(Comparison {
                        name: format!("KS distance of coordinate {} at t = {}", ks.coordinate, t.report.t),
                        observed: ks.distance,
                        reference: ks.critical_5,
                        consistent: ks.distance < ks.critical_5,
                        detail: "against the normalized reference marginal, 5% critical value".into(),
                    });
                }
            }
        }
    }
    if let (Some(curve), Some(req)) = (stages.ergodic.result(), sc.ergodic.as_ref()) {
        if let Some(name) = &req.reference {
            let rho = densities.field(name)?;
            let f = parse_expr(&req.f, d).map_err(|e| e.to_string())?;
            let target = space_average(&f, &rho, d).map_err(|e| e.to_string())?;
            let tol = req.tolerance.unwrap_or(0.05);
            out.push(Comparison {
                name: format!("time average of {} vs space average under {name}", req.f),
                observed: curve.terminal,
                reference: target,
                consistent: (curve.terminal - target).abs() <= tol,
                detail: format!("absolute tolerance {tol}"),
            });
        }
    }
    if let Some(k) = stages.krylov.result() {
        if let Some(r) = &k.refinement {
            out.push(Comparison {
                name: format!("occupation of {} under Δ → Δ/4", k.f),
                observed: r.relative_change,
                reference: 0.05,
                consistent: r.stable,
                detail: "relative change of the first start's estimate".into(),
            });
        }
    }
    Ok(out)
}

fn timed<T>(timings: &mut BTreeMap<&'static str, f64>, name: &'static str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    timings.insert(name, start.elapsed().as_secs_f64() * 1e3);
    out
}

fn run_stages(prepared: &Prepared, opts: &RunOptions) -> (Report, Artifacts) {
    let sc = &prepared.scenario;
    let seeds = SeedRecord::new(sc.seed);
    let mut artifacts = Artifacts::default();
    let mut timings = BTreeMap::new();
    let want = opts.stages;
    let needs_density = want.density || (sc.needs_solved_density() && want != StageSet::none());

    let density = if needs_density && sc.density.is_some() {
        Stage::from_result(timed(&mut timings, "density", || run_density(prepared, &mut artifacts)))
    } else {
        Stage::Skipped
    };
    let solved = density
        .result()
        .and_then(|d: &DensityOutcome| d.solved.last())
        .map(|b| b.approximation.field());
    let densities = Densities { prepared, solved };

    let criteria = if want.criteria && sc.criteria.is_some() {
        Stage::from_result(timed(&mut timings, "criteria", || run_criteria(prepared, &densities)))
    } else {
        Stage::Skipped
    };
    let simulation = if want.simulation && sc.simulation.is_some() {
        Stage::from_result(timed(&mut timings, "simulation", || {
            run_simulation(prepared, &densities, &seeds, &mut artifacts)
        }))
    } else {
        Stage::Skipped
    };
    let ergodic = if want.ergodic && sc.ergodic.is_some() {
        Stage::from_result(timed(&mut timings, "ergodic", || run_ergodic(prepared, &seeds)))
    } else {
        Stage::Skipped
    };
    let krylov = if want.krylov && sc.krylov.is_some() {
        Stage::from_result(timed(&mut timings, "krylov", || run_krylov(prepared, &densities, &seeds)))
    } else {
        Stage::Skipped
    };
    let mut stages = Stages {
        density,
        criteria,
        simulation,
        ergodic,
        krylov,
        comparisons: Stage::Skipped,
    };
    if want.comparisons {
        let c = timed(&mut timings, "comparisons", || run_comparisons(prepared, &stages, &densities));
        stages.comparisons = match c {
            Ok(v) if v.is_empty() => Stage::Skipped,
            other => Stage::from_result(other),
        };
    }

    let mut report = Report {
        schema_version: SCHEMA_VERSION,
        artifact: Artifact {
            name: "sdelab",
            version: env!("CARGO_PKG_VERSION"),
        },
        scenario: sc.clone(),
        seeds,
        stages,
        verdicts: VerdictCounts::default(),
        conclusions: Vec::new(),
        notes: sc.notes.clone(),
        exit_code: exit_code::GREEN,
        timings_ms: timings,
        threads: opts.threads,
    };
    let mut counts = VerdictCounts::default();
    let mut conclusions = Vec::new();
    for v in report.all_verdicts() {
        match v.verdict {
            Verdict::HoldsOnGrid => {
                counts.holds_on_grid += 1;
                if let Some(c) = &v.conclusion {
                    conclusions.push(format!("{}: {c}", v.id));
                }
            }
            Verdict::FailsWithWitness => counts.fails_with_witness += 1,
            Verdict::Inconclusive => counts.inconclusive += 1,
        }
    }
    report.verdicts = counts;
    report.conclusions = conclusions;
    if let Some(d) = report.stages.density.result() {
        report.notes.extend(d.notes.iter().cloned());
    }
    if let Some(t) = report.stages.simulation.result().and_then(|s| s.transition.as_ref()) {
        if t.reference_status.starts_with("reference not normalizable") {
            report.notes.push(format!("transition law: {}", t.reference_status));
        }
    }
    let s = &report.stages;
    let errored = s.density.is_error()
        || s.criteria.is_error()
        || s.simulation.is_error()
        || s.ergodic.is_error()
        || s.krylov.is_error()
        || s.comparisons.is_error();
    report.exit_code = if errored {
        exit_code::STAGE_ERROR
    } else if counts.fails_with_witness > 0 {
        exit_code::CRITERION_FAILED
    } else {
        exit_code::GREEN
    };
    (report, artifacts)
}

/// Run the requested stages under a thread budget.
pub fn run_scenario(prepared: &Prepared, opts: &RunOptions) -> Result<(Report, Artifacts), rayon::ThreadPoolBuildError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.threads).build()?;
    Ok(pool.install(|| run_stages(prepared, opts)))
}
