//! Euler–Maruyama simulation with localization radii, and estimators for
//! moments, exit times, occupation functionals, time averages and
//! transition laws.
//!
//! Every path draws from its own ChaCha8 stream (master seed, stream = path
//! index), so ensembles are bit-identical for any thread count.

mod estimators;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;
use thiserror::Error;

use crate::calculus::{CalculusError, CoefficientSet, DiffusionRoot};
use crate::density::DensityError;

pub use estimators::{
    ergodic_average, exit_statistics, krylov_functional, krylov_refinement, lq_norms,
    moment_curve, transition_histogram, ErgodicCurve, EstimatorResult, ExitRow, KrylovReport,
    KrylovRow, KsRow, MomentRow, ReferenceOptions, RefinementReport, TransitionReport,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MonteCarloError {
    #[error("simulation config: {0}")]
    Config(String),
    #[error("start point {x0:?} is not inside the smallest localization radius {radius}")]
    StartOutside { x0: Vec<f64>, radius: f64 },
    #[error("reference density is not normalizable: {0}")]
    NotNormalizable(String),
    #[error("path left the largest radius at t = {time} before the burn-in {burn_in}")]
    ExitedBeforeBurnIn { time: f64, burn_in: f64 },
    #[error("all paths failed; first failure: {0}")]
    AllPathsFailed(String),
    #[error(transparent)]
    Calculus(#[from] CalculusError),
    #[error(transparent)]
    Density(#[from] DensityError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[default]
    #[serde(rename = "euler-maruyama")]
    EulerMaruyama,
}

fn default_kappa() -> f64 {
    10.0
}

fn default_samples() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Time step `Δ`.
    pub dt: f64,
    /// Horizon `T`.
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
    /// Localization radii `n₁ < n₂ < …`; paths are absorbed at the largest.
    #[serde(default)]
    pub radii: Vec<f64>,
    /// The drift is clipped to norm `κ/Δ` whenever `‖G‖Δ > κ`.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Number of recorded trajectory intervals (the record grid has `samples + 1` points at most).
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl SimulationConfig {
    pub fn new(dt: f64, horizon: f64, paths: usize, seed: u64) -> Self {
        SimulationConfig {
            dt,
            horizon,
            paths,
            seed,
            radii: Vec::new(),
            kappa: default_kappa(),
            scheme: Scheme::EulerMaruyama,
            samples: default_samples(),
        }
    }

    pub fn radii(mut self, radii: &[f64]) -> Self {
        self.radii = radii.to_vec();
        self
    }

    pub fn validate(&self) -> Result<(), MonteCarloError> {
        let bad = |m: String| Err(MonteCarloError::Config(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.horizon >= self.dt && self.horizon.is_finite()) {
            return bad(format!("horizon {} must be at least dt {}", self.horizon, self.dt));
        }
        if self.paths == 0 {
            return bad("paths must be at least 1".into());
        }
        if !(self.kappa > 0.0) {
            return bad(format!("kappa must be positive, got {}", self.kappa));
        }
        if self.samples == 0 {
            return bad("samples must be at least 1".into());
        }
        if self.radii.iter().any(|r| !(*r > 0.0 && r.is_finite()))
            || self.radii.windows(2).any(|w| w[1] <= w[0])
        {
            return bad(format!("radii must be positive and strictly increasing, got {:?}", self.radii));
        }
        Ok(())
    }

    /// Number of Euler steps covering the horizon.
    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt).round() as usize).max(1)
    }

    /// Steps between recorded samples.
    pub fn record_every(&self) -> usize {
        self.steps().div_ceil(self.samples).max(1)
    }

    /// Step indices on the record grid, always including the last step.
    pub fn record_steps(&self) -> Vec<usize> {
        let (n, every) = (self.steps(), self.record_every());
        let mut out: Vec<usize> = (0..=n).step_by(every).collect();
        if *out.last().unwrap() != n {
            out.push(n);
        }
        out
    }
}

/// Random stream of one path.
pub fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal by inverse CDF of the uniform `((u >> 11) + ½)·2⁻⁵³`.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathStatus {
    Alive,
    /// Absorbed at the largest localization radius.
    ExitedLargestRadius,
    /// `σ(x)` could not be factorized along the path.
    Degenerate,
    /// A coefficient could not be evaluated along the path.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathRecord {
    pub index: u64,
    /// Positions on the record grid, row-major (`record_steps × d`), frozen after absorption.
    #[serde(skip)]
    pub samples: Vec<f64>,
    /// `σ_n` for each radius: first step time with `‖X‖ ≥ n`.
    pub exit_times: Vec<Option<f64>>,
    /// `‖X_{σ_n}‖ − n`.
    pub overshoot: Vec<Option<f64>>,
    pub clips: u64,
    /// Largest single-step displacement norm.
    pub max_step: f64,
    pub status: PathStatus,
    /// Time at which a failed or degenerate path stopped.
    pub stopped_at: Option<f64>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathEnsemble {
    pub dim: usize,
    pub x0: Vec<f64>,
    pub config: SimulationConfig,
    pub record_times: Vec<f64>,
    pub paths: Vec<PathRecord>,
}

impl PathEnsemble {
    /// Paths that ran to the horizon or were absorbed; failed paths are excluded.
    pub fn usable(&self) -> impl Iterator<Item = &PathRecord> {
        self.paths
            .iter()
            .filter(|p| matches!(p.status, PathStatus::Alive | PathStatus::ExitedLargestRadius))
    }

    pub fn failed(&self) -> usize {
        self.paths.len() - self.usable().count()
    }

    pub fn clips(&self) -> u64 {
        self.paths.iter().map(|p| p.clips).sum()
    }

    /// Index on the record grid of time `t`.
    pub fn record_index(&self, t: f64) -> Result<usize, MonteCarloError> {
        let tol = 1e-9 * self.config.horizon.max(1.0);
        self.record_times
            .iter()
            .position(|s| (s - t).abs() <= tol)
            .ok_or_else(|| {
                MonteCarloError::Config(format!(
                    "time {t} is not on the record grid (every {} steps of {})",
                    self.config.record_every(),
                    self.config.dt
                ))
            })
    }

    pub fn sample<'a>(&self, path: &'a PathRecord, k: usize) -> &'a [f64] {
        &path.samples[k * self.dim..(k + 1) * self.dim]
    }
}

/// One Euler–Maruyama step with drift clipping; per-path scratch space.
#[derive(Clone)]
pub(crate) struct Stepper<'a> {
    cs: &'a CoefficientSet,
    root: DiffusionRoot,
    dt: f64,
    sqrt_dt: f64,
    kappa: f64,
    g: Vec<f64>,
    a: Vec<f64>,
    sigma: Vec<f64>,
    xi: Vec<f64>,
}

pub(crate) enum StepError {
    Degenerate(CalculusError),
    Failed(CalculusError),
}

impl StepError {
    fn status(&self) -> (PathStatus, String) {
        match self {
            StepError::Degenerate(e) => (PathStatus::Degenerate, e.to_string()),
            StepError::Failed(e) => (PathStatus::Failed, e.to_string()),
        }
    }
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(cs: &'a CoefficientSet, dt: f64, kappa: f64) -> Result<Self, CalculusError> {
        let d = cs.dim();
        Ok(Stepper {
            cs,
            root: DiffusionRoot::new(cs)?,
            dt,
            sqrt_dt: dt.sqrt(),
            kappa,
            g: vec![0.0; d],
            a: vec![0.0; d * d],
            sigma: vec![0.0; d * d],
            xi: vec![0.0; d],
        })
    }

    /// Advances `x` by one step; returns whether the drift was clipped and
    /// the displacement norm.
    pub(crate) fn step(&mut self, x: &mut [f64], rng: &mut ChaCha8Rng) -> Result<(bool, f64), StepError> {
        let d = x.len();
        self.cs.eval_g(x, &mut self.g).map_err(|e| StepError::Failed(e.into()))?;
        self.root
            .eval(self.cs, x, &mut self.a, &mut self.sigma)
            .map_err(|e| match e {
                CalculusError::DegenerateDiffusion { .. } | CalculusError::NotElliptic { .. } => {
                    StepError::Degenerate(e)
                }
                other => StepError::Failed(other),
            })?;
        let gnorm = self.g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let clipped = gnorm * self.dt > self.kappa;
        let gscale = if clipped { self.kappa / (gnorm * self.dt) } else { 1.0 };
        for v in self.xi.iter_mut() {
            *v = standard_normal(rng);
        }
        let mut size = 0.0;
        for i in 0..d {
            let noise: f64 = (0..d).map(|j| self.sigma[i * d + j] * self.xi[j]).sum();
            let dx = self.g[i] * gscale * self.dt + noise * self.sqrt_dt;
            x[i] += dx;
            size += dx * dx;
        }
        Ok((clipped, size.sqrt()))
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_start(x0: &[f64], cs: &CoefficientSet, cfg: &SimulationConfig) -> Result<(), MonteCarloError> {
    cfg.validate()?;
    if x0.len() != cs.dim() {
        return Err(MonteCarloError::Config(format!(
            "start point has {} coordinates, coefficients have dimension {}",
            x0.len(),
            cs.dim()
        )));
    }
    if let Some(&r) = cfg.radii.first() {
        if !(norm(x0) < r) {
            return Err(MonteCarloError::StartOutside { x0: x0.to_vec(), radius: r });
        }
    }
    Ok(())
}

fn simulate_path(stepper: &mut Stepper, x0: &[f64], cfg: &SimulationConfig, index: u64) -> PathRecord {
    let d = x0.len();
    let n = cfg.steps();
    let record = cfg.record_steps();
    let mut rng = path_rng(cfg.seed, index);
    let mut x = x0.to_vec();
    let mut p = PathRecord {
        index,
        samples: Vec::with_capacity(record.len() * d),
        exit_times: vec![None; cfg.radii.len()],
        overshoot: vec![None; cfg.radii.len()],
        clips: 0,
        max_step: 0.0,
        status: PathStatus::Alive,
        stopped_at: None,
        message: None,
    };
    p.samples.extend_from_slice(&x);
    let mut next_record = 1;
    for k in 1..=n {
        match stepper.step(&mut x, &mut rng) {
            Ok((clipped, size)) => {
                p.clips += clipped as u64;
                p.max_step = p.max_step.max(size);
            }
            Err(e) => {
                let (status, message) = e.status();
                p.status = status;
                p.message = Some(message);
                p.stopped_at = Some((k - 1) as f64 * cfg.dt);
                return p;
            }
        }
        let r = norm(&x);
        let t = k as f64 * cfg.dt;
        for (i, &radius) in cfg.radii.iter().enumerate() {
            if p.exit_times[i].is_none() && r >= radius {
                p.exit_times[i] = Some(t);
                p.overshoot[i] = Some(r - radius);
            }
        }
        let absorbed = cfg.radii.last().is_some_and(|&big| r >= big);
        if next_record < record.len() && record[next_record] == k {
            p.samples.extend_from_slice(&x);
            next_record += 1;
        }
        if absorbed {
            p.status = PathStatus::ExitedLargestRadius;
            // the stopped process stays at its exit position
            while next_record < record.len() {
                p.samples.extend_from_slice(&x);
                next_record += 1;
            }
            return p;
        }
    }
    p
}

/// Simulates `cfg.paths` independent paths from `x0`.
pub fn simulate_ensemble(
    cs: &CoefficientSet,
    x0: &[f64],
    cfg: &SimulationConfig,
) -> Result<PathEnsemble, MonteCarloError> {
    check_start(x0, cs, cfg)?;
    let template = Stepper::new(cs, cfg.dt, cfg.kappa)?;
    let paths: Vec<PathRecord> = (0..cfg.paths as u64)
        .into_par_iter()
        .map_init(|| template.clone(), |stepper, i| simulate_path(stepper, x0, cfg, i))
        .collect();
    let record_times = cfg.record_steps().iter().map(|&k| k as f64 * cfg.dt).collect();
    Ok(PathEnsemble {
        dim: cs.dim(),
        x0: x0.to_vec(),
        config: cfg.clone(),
        record_times,
        paths,
    })
}
