use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{CoefficientSet, DensityField};
use crate::density::volume::{ball_integrals, check_radii, sorted};
use crate::density::VolumeOptions;
use crate::expr::Expr;

use super::{
    check_start, norm, path_rng, simulate_ensemble, MonteCarloError, PathEnsemble, PathStatus,
    SimulationConfig, Stepper,
};

/// Two-sided 95% normal quantile used for Wilson intervals.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorResult {
    pub estimate: f64,
    /// Sample standard deviation over `√paths`.
    pub std_error: f64,
    pub paths: usize,
    pub aggregation: String,
}

impl EstimatorResult {
    pub fn from_values(values: &[f64], aggregation: impl Into<String>) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        EstimatorResult {
            estimate: mean,
            std_error: (var / n as f64).sqrt(),
            paths: n,
            aggregation: aggregation.into(),
        }
    }

    /// `|estimate − target| ≤ k·SE`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.estimate - target).abs() <= k * self.std_error
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    pub t: f64,
    pub estimate: EstimatorResult,
    /// `e^{Mt} φ(x₀)` when a constant `M` is given.
    pub bound: Option<f64>,
    /// `estimate / bound`.
    pub ratio: Option<f64>,
}

/// `E[φ(X_{t∧σ_N})]` at each time of `times` (which must lie on the record grid),
/// with `N` the largest localization radius.
pub fn moment_curve(
    ens: &PathEnsemble,
    phi: &Expr,
    times: &[f64],
    m: Option<f64>,
) -> Result<Vec<MomentRow>, MonteCarloError> {
    let phi0 = phi.eval(&ens.x0).map_err(crate::calculus::CalculusError::from)?;
    let mut rows = Vec::with_capacity(times.len());
    for &t in times {
        let k = ens.record_index(t)?;
        let values = ens
            .usable()
            .map(|p| phi.eval(ens.sample(p, k)))
            .collect::<Result<Vec<f64>, _>>()
            .map_err(crate::calculus::CalculusError::from)?;
        if values.is_empty() {
            return Err(all_failed(ens));
        }
        let estimate = EstimatorResult::from_values(&values, "mean of φ(X_{t∧σ_N}) over paths");
        let bound = m.map(|m| (m * t).exp() * phi0);
        let ratio = bound.map(|b| estimate.estimate / b);
        rows.push(MomentRow {
            t,
            estimate,
            bound,
            ratio,
        });
    }
    Ok(rows)
}

fn all_failed(ens: &PathEnsemble) -> MonteCarloError {
    MonteCarloError::AllPathsFailed(
        ens.paths
            .iter()
            .find_map(|p| p.message.clone())
            .unwrap_or_else(|| "no paths".into()),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitRow {
    pub radius: f64,
    pub paths: usize,
    pub exited: usize,
    /// `P(σ_n ≤ T)`.
    pub probability: f64,
    /// Wilson 95% interval.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Median of `σ_n`; `None` when at most half the paths exited.
    pub median: Option<f64>,
    /// Mean of `σ_n`; `None` unless every path exited.
    pub mean: Option<EstimatorResult>,
}

fn wilson(k: usize, n: usize) -> (f64, f64) {
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let z2 = Z95 * Z95;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = Z95 / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let low = if k == 0.0 { 0.0 } else { (centre - half).max(0.0) };
    let high = if k == n { 1.0 } else { (centre + half).min(1.0) };
    (low, high)
}

/// Exit probabilities before the horizon and exit-time summaries per radius.
pub fn exit_statistics(ens: &PathEnsemble) -> Result<Vec<ExitRow>, MonteCarloError> {
    let paths: Vec<_> = ens.usable().collect();
    if paths.is_empty() {
        return Err(all_failed(ens));
    }
    let n = paths.len();
    let rows: Vec<ExitRow> = ens
        .config
        .radii
        .iter()
        .enumerate()
        .map(|(i, &radius)| {
            let mut times: Vec<f64> = paths.iter().filter_map(|p| p.exit_times[i]).collect();
            times.sort_by(f64::total_cmp);
            let exited = times.len();
            let (ci_low, ci_high) = wilson(exited, n);
            // the median of all n paths is observed once more than half have exited
            let median = (2 * exited > n).then(|| {
                if n % 2 == 1 {
                    times[n / 2]
                } else if n / 2 < exited {
                    0.5 * (times[n / 2 - 1] + times[n / 2])
                } else {
                    times[n / 2 - 1]
                }
            });
            let mean = (exited == n).then(|| EstimatorResult::from_values(&times, "mean of σ_n"));
            ExitRow {
                radius,
                paths: n,
                exited,
                probability: exited as f64 / n as f64,
                ci_low,
                ci_high,
                median,
                mean,
            }
        })
        .collect();
    debug_assert!(rows.windows(2).all(|w| w[1].exited <= w[0].exited));
    Ok(rows)
}

/// Quadrature settings for a reference density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOptions {
    /// Half-width of the quadrature box for analytic densities.
    pub half_width: f64,
    /// Simpson nodes per axis; `nodes − 1` must be a multiple of 4.
    pub nodes: usize,
    /// Largest admissible relative mass outside the inner half box.
    pub tail_tolerance: f64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        ReferenceOptions {
            half_width: 8.0,
            nodes: 241,
            tail_tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsRow {
    /// 1-based.
    pub coordinate: usize,
    /// `sup |F_n − F|` against the normalized reference marginal.
    pub distance: f64,
    /// Asymptotic critical values `1.3581/√n` (5%) and `1.6276/√n` (1%).
    pub critical_5: f64,
    pub critical_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionReport {
    pub t: f64,
    pub paths: usize,
    pub absorbed: usize,
    pub means: Vec<EstimatorResult>,
    pub ks: Vec<KsRow>,
}

/// Per-coordinate marginal CDFs of the normalized reference on a node grid.
struct Marginals {
    nodes: Vec<f64>,
    cdfs: Vec<Vec<f64>>,
}

fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let w = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * h / 3.0
        })
        .collect()
}

fn reference_marginals(rho: &DensityField, opts: &ReferenceOptions) -> Result<Marginals, MonteCarloError> {
    let d = rho.dim();
    let n = opts.nodes;
    if n < 5 || (n - 1) % 4 != 0 {
        return Err(MonteCarloError::Config(format!(
            "reference nodes must be 1 mod 4 and at least 5, got {n}"
        )));
    }
    let r = match rho {
        DensityField::Grid(g) => g.mesh().half_width,
        DensityField::Analytic { .. } => opts.half_width,
    };
    let h = 2.0 * r / (n - 1) as f64;
    let nodes: Vec<f64> = (0..n).map(|i| -r + i as f64 * h).collect();
    let w = simpson_weights(n, h);
    let inner = (n - 1) / 4..=3 * (n - 1) / 4;
    let wi = simpson_weights(n / 2 + 1, h);
    let total = n.pow(d as u32);
    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let mut x = vec![0.0; d];
            let mut rest = flat;
            for k in (0..d).rev() {
                x[k] = nodes[rest % n];
                rest /= n;
            }
            rho.weight(&x)
        })
        .collect::<Result<_, _>>()?;
    let mut marg = vec![vec![0.0; n]; d];
    let (mut mass, mut inner_mass) = (0.0, 0.0);
    for (flat, v) in values.iter().enumerate() {
        let mut idx = vec![0; d];
        let mut rest = flat;
        for k in (0..d).rev() {
            idx[k] = rest % n;
            rest /= n;
        }
        let weight: f64 = idx.iter().map(|&i| w[i]).product();
        mass += weight * v;
        if idx.iter().all(|i| inner.contains(i)) {
            let wv: f64 = idx.iter().map(|&i| wi[i - inner.start()]).product();
            inner_mass += wv * v;
        }
        for k in 0..d {
            let others: f64 = (0..d).filter(|&j| j != k).map(|j| w[idx[j]]).product();
            marg[k][idx[k]] += others * v;
        }
    }
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(MonteCarloError::NotNormalizable(format!("mass {mass} on [−{r}, {r}]^{d}")));
    }
    let tail = (mass - inner_mass) / mass;
    if tail > opts.tail_tolerance {
        return Err(MonteCarloError::NotNormalizable(format!(
            "{:.3}% of the mass on [−{r}, {r}]^{d} lies outside the half box",
            100.0 * tail
        )));
    }
    let cdfs = marg
        .into_iter()
        .map(|m| {
            let mut c = vec![0.0; n];
            for i in 1..n {
                c[i] = c[i - 1] + 0.5 * h * (m[i - 1] + m[i]);
            }
            let last = c[n - 1];
            c.iter().map(|v| v / last).collect()
        })
        .collect();
    Ok(Marginals { nodes, cdfs })
}

fn interpolate_cdf(nodes: &[f64], cdf: &[f64], x: f64) -> f64 {
    if x <= nodes[0] {
        return 0.0;
    }
    if x >= nodes[nodes.len() - 1] {
        return 1.0;
    }
    let h = nodes[1] - nodes[0];
    let i = (((x - nodes[0]) / h) as usize).min(nodes.len() - 2);
    let s = (x - nodes[i]) / h;
    cdf[i] + s * (cdf[i + 1] - cdf[i])
}

fn ks_distance(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Law of `X_t` from `x0`: coordinate means, and Kolmogorov–Smirnov distances
/// of the coordinate marginals to those of `reference / ∫reference`.
pub fn transition_histogram(
    cs: &CoefficientSet,
    x0: &[f64],
    t: f64,
    cfg: &SimulationConfig,
    reference: Option<&DensityField>,
    opts: &ReferenceOptions,
) -> Result<TransitionReport, MonteCarloError> {
    let marginals = reference.map(|rho| reference_marginals(rho, opts)).transpose()?;
    let mut cfg = cfg.clone();
    cfg.horizon = t;
    cfg.samples = 1;
    let ens = simulate_ensemble(cs, x0, &cfg)?;
    let last = ens.record_times.len() - 1;
    let paths: Vec<_> = ens.usable().collect();
    if paths.is_empty() {
        return Err(all_failed(&ens));
    }
    let d = ens.dim;
    let coords: Vec<Vec<f64>> = (0..d)
        .map(|k| paths.iter().map(|p| ens.sample(p, last)[k]).collect())
        .collect();
    let means = coords
        .iter()
        .map(|c| EstimatorResult::from_values(c, "mean of X_t coordinate"))
        .collect();
    let n = paths.len() as f64;
    let ks = match marginals {
        Some(m) => coords
            .into_iter()
            .enumerate()
            .map(|(k, mut c)| KsRow {
                coordinate: k + 1,
                distance: ks_distance(&mut c, |x| interpolate_cdf(&m.nodes, &m.cdfs[k], x)),
                critical_5: 1.3581 / n.sqrt(),
                critical_1: 1.6276 / n.sqrt(),
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(TransitionReport {
        t,
        paths: paths.len(),
        absorbed: paths.iter().filter(|p| p.status == PathStatus::ExitedLargestRadius).count(),
        means,
        ks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KrylovRow {
    pub start: Vec<f64>,
    pub estimate: EstimatorResult,
    /// Evaluations skipped at declared singular points.
    pub skipped: u64,
    pub clips: u64,
    pub absorbed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KrylovReport {
    pub t: f64,
    pub rows: Vec<KrylovRow>,
    /// Largest estimate over the start points.
    pub sup: f64,
}

/// `∫₀^t |f|(X_s) ds` by left-endpoint sums along one path; `None` on failure.
fn occupation(
    stepper: &mut Stepper,
    f: &Expr,
    singular: &[Vec<f64>],
    x0: &[f64],
    cfg: &SimulationConfig,
    steps: usize,
    stream: u64,
) -> Result<Option<(f64, u64, u64, bool)>, MonteCarloError> {
    let mut rng = path_rng(cfg.seed, stream);
    let mut x = x0.to_vec();
    let (mut sum, mut skipped, mut clips) = (0.0, 0u64, 0u64);
    let big = cfg.radii.last().copied();
    for _ in 0..steps {
        match f.eval(&x) {
            Ok(v) => sum += v.abs(),
            Err(_) if singular.iter().any(|s| s.as_slice() == x.as_slice()) => skipped += 1,
            Err(e) => return Err(crate::calculus::CalculusError::from(e).into()),
        }
        match stepper.step(&mut x, &mut rng) {
            Ok((c, _)) => clips += c as u64,
            Err(_) => return Ok(None),
        }
        if big.is_some_and(|b| norm(&x) >= b) {
            // killed: the functional collects nothing afterwards
            return Ok(Some((sum * cfg.dt, skipped, clips, true)));
        }
    }
    Ok(Some((sum * cfg.dt, skipped, clips, false)))
}

/// `E_x[∫₀^t |f|(X_s) ds]` for each start point. Evaluation failures of `f`
/// exactly at a declared singular point are skipped and counted.
pub fn krylov_functional(
    cs: &CoefficientSet,
    f: &Expr,
    t: f64,
    starts: &[Vec<f64>],
    singular: &[Vec<f64>],
    cfg: &SimulationConfig,
) -> Result<KrylovReport, MonteCarloError> {
    let mut cfg = cfg.clone();
    cfg.horizon = t;
    let steps = cfg.steps();
    let stepper = Stepper::new(cs, cfg.dt, cfg.kappa)?;
    let mut rows = Vec::with_capacity(starts.len());
    for (s, x0) in starts.iter().enumerate() {
        check_start(x0, cs, &cfg)?;
        let results: Vec<_> = (0..cfg.paths as u64)
            .into_par_iter()
            .map_init(
                || stepper.clone(),
                |st, i| occupation(st, f, singular, x0, &cfg, steps, s as u64 * cfg.paths as u64 + i),
            )
            .collect::<Result<_, _>>()?;
        let ok: Vec<_> = results.into_iter().flatten().collect();
        if ok.is_empty() {
            return Err(MonteCarloError::AllPathsFailed(format!("every path from {x0:?} failed")));
        }
        let values: Vec<f64> = ok.iter().map(|r| r.0).collect();
        rows.push(KrylovRow {
            start: x0.clone(),
            estimate: EstimatorResult::from_values(&values, "mean of left-endpoint ∫|f|(X_s)ds"),
            skipped: ok.iter().map(|r| r.1).sum(),
            clips: ok.iter().map(|r| r.2).sum(),
            absorbed: ok.iter().filter(|r| r.3).count(),
        });
    }
    let sup = rows.iter().map(|r| r.estimate.estimate).fold(f64::NEG_INFINITY, f64::max);
    Ok(KrylovReport { t, rows, sup })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementReport {
    pub coarse: EstimatorResult,
    pub fine: EstimatorResult,
    /// `|fine − coarse| / |coarse|`.
    pub relative_change: f64,
    /// Change below 5%; a larger change flags possible non-integrable accumulation.
    pub stable: bool,
}

/// Occupation functional at `Δ` and `Δ/4` from one start point.
pub fn krylov_refinement(
    cs: &CoefficientSet,
    f: &Expr,
    t: f64,
    start: &[f64],
    singular: &[Vec<f64>],
    cfg: &SimulationConfig,
) -> Result<RefinementReport, MonteCarloError> {
    let starts = [start.to_vec()];
    let coarse = krylov_functional(cs, f, t, &starts, singular, cfg)?.rows.remove(0).estimate;
    let mut fine_cfg = cfg.clone();
    fine_cfg.dt = cfg.dt / 4.0;
    let fine = krylov_functional(cs, f, t, &starts, singular, &fine_cfg)?.rows.remove(0).estimate;
    let relative_change = (fine.estimate - coarse.estimate).abs() / coarse.estimate.abs();
    Ok(RefinementReport {
        stable: relative_change < 0.05,
        coarse,
        fine,
        relative_change,
    })
}

/// `(∫_{B_r} |f|^q ρ dx)^{1/q}` for each radius.
pub fn lq_norms(
    f: &Expr,
    rho: &DensityField,
    q: f64,
    radii: &[f64],
    opts: &VolumeOptions,
) -> Result<Vec<f64>, MonteCarloError> {
    check_radii(rho, radii, opts)?;
    let s = sorted(radii);
    let v = ball_integrals(rho.dim(), &s, 1, opts, |x, out| {
        let w = rho.weight(x)?;
        out[0] = if w == 0.0 { 0.0 } else { f.eval(x)?.abs().powf(q) * w };
        Ok(())
    })?;
    Ok(radii
        .iter()
        .map(|r| {
            let i = s.binary_search_by(|p| p.total_cmp(r)).expect("radius is listed");
            v[i][0].powf(1.0 / q)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErgodicCurve {
    pub burn_in: f64,
    /// Times at which the running average is reported.
    pub times: Vec<f64>,
    /// `(1/(t − b)) ∫_b^t f(X_s) ds`.
    pub averages: Vec<f64>,
    pub terminal: f64,
    /// Averages over the first and second halves of `[b, T]`.
    pub first_half: f64,
    pub second_half: f64,
    /// Halves agree within a factor of two.
    pub settled: bool,
    pub clips: u64,
    /// Time at which the path left the largest radius, if it did.
    pub exited_at: Option<f64>,
    pub notes: Vec<String>,
}

/// Running time average of `f` along one long path (stream 0 of the seed).
pub fn ergodic_average(
    cs: &CoefficientSet,
    x0: &[f64],
    f: &Expr,
    burn_in: f64,
    cfg: &SimulationConfig,
) -> Result<ErgodicCurve, MonteCarloError> {
    check_start(x0, cs, cfg)?;
    if !(burn_in >= 0.0 && burn_in < cfg.horizon) {
        return Err(MonteCarloError::Config(format!(
            "burn-in {burn_in} must lie in [0, horizon {})",
            cfg.horizon
        )));
    }
    let mut stepper = Stepper::new(cs, cfg.dt, cfg.kappa)?;
    let mut rng = path_rng(cfg.seed, 0);
    let n = cfg.steps();
    let kb = (burn_in / cfg.dt).round() as usize;
    let mid = kb + (n - kb) / 2;
    let every = (n - kb).div_ceil(cfg.samples).max(1);
    let mut x = x0.to_vec();
    let (mut sum, mut first, mut clips) = (0.0, 0.0, 0u64);
    let mut curve = ErgodicCurve {
        burn_in,
        times: Vec::new(),
        averages: Vec::new(),
        terminal: f64::NAN,
        first_half: f64::NAN,
        second_half: f64::NAN,
        settled: false,
        clips: 0,
        exited_at: None,
        notes: Vec::new(),
    };
    let big = cfg.radii.last().copied();
    let mut end = n;
    for k in 0..n {
        if k >= kb {
            sum += f.eval(&x).map_err(crate::calculus::CalculusError::from)?;
            let done = k + 1 - kb;
            if done % every == 0 || k + 1 == n {
                curve.times.push((k + 1) as f64 * cfg.dt);
                curve.averages.push(sum / done as f64);
            }
            if k + 1 == mid {
                first = sum;
            }
        }
        match stepper.step(&mut x, &mut rng) {
            Ok((c, _)) => clips += c as u64,
            Err(e) => {
                let (_, message) = e.status();
                return Err(MonteCarloError::AllPathsFailed(message));
            }
        }
        if big.is_some_and(|b| norm(&x) >= b) {
            let time = (k + 1) as f64 * cfg.dt;
            if k + 1 <= kb {
                return Err(MonteCarloError::ExitedBeforeBurnIn { time, burn_in });
            }
            curve.exited_at = Some(time);
            curve.notes.push(format!("path left the largest radius at t = {time}; average truncated"));
            end = k + 1;
            break;
        }
    }
    curve.clips = clips;
    let count = end - kb;
    curve.terminal = sum / count as f64;
    if end == n && mid > kb {
        curve.first_half = first / (mid - kb) as f64;
        curve.second_half = (sum - first) / (n - mid) as f64;
        let (a, b) = (curve.first_half, curve.second_half);
        curve.settled = a == b || (a.signum() == b.signum() && a.abs().max(b.abs()) <= 2.0 * a.abs().min(b.abs()));
        if !curve.settled {
            curve.notes.push(format!(
                "average not settled: first half {a:.4}, second half {b:.4}"
            ));
        }
    }
    Ok(curve)
}
