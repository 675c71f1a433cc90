//! Scenario files: JSON documents with a declared schema version.
//!
//! Every stage block is optional; an absent block means the stage is skipped.
//! Expressions use the coefficient language of `sdelab::expr` with coordinates
//! `x1..xd`.

use std::collections::BTreeSet;
use std::path::Path;

use sdelab::calculus::{seeded_probes, CoefficientSet, Drift};
use sdelab::criteria::{ConstantName, CriterionRequest};
use sdelab::expr::{parse_expr, Expr};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// Name under which the solved density can be referenced by other stages.
pub const SOLVED: &str = "solved";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("unknown built-in scenario {0:?} (see `sdelab catalog`)")]
    UnknownBuiltin(String),
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub dimension: usize,
    /// Master seed; each stochastic stage derives its own seed from it.
    #[serde(default)]
    pub seed: u64,
    pub coefficients: Coefficients,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensityRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criteria: Option<CriteriaRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ergodic: Option<ErgodicRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub krylov: Option<KrylovRequest>,
    /// Free-form remarks copied into the report.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    /// Upper triangle of the symmetric diffusion matrix, row by row.
    pub a: Vec<Vec<String>>,
    /// Strict upper triangle of the antisymmetric matrix; empty for `C = 0`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub c: Vec<Vec<String>>,
    pub drift: DriftSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<ProbeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    /// Non-divergence drift `G`.
    G(Vec<String>),
    /// Divergence-form vector `H`.
    H(Vec<String>),
    /// `H = (A + C^T)∇ρ/(2ρ) + B̄`; `density` is an expression or the name of an analytic density.
    FromDensity { density: String, bbar: Vec<String> },
}

/// Seeded uniform points in `[-half_width, half_width]^d` where ellipticity is checked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub half_width: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            half_width: 10.0,
            count: 1000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedDensity {
    pub name: String,
    pub expr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityRequest {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub analytic: Vec<NamedDensity>,
    /// Weak-form invariance residuals against the bump library.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invariance: Option<InvarianceRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveRequest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvarianceRequest {
    /// Half-width of the quadrature box for analytic densities; solved
    /// densities use at most half their mesh.
    pub half_width: f64,
    /// Simpson nodes per axis (odd).
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundarySpec {
    Ones,
    Expression(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverSpec {
    #[default]
    Auto,
    Direct,
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveRequest {
    /// Increasing box half-widths `R`.
    pub half_widths: Vec<f64>,
    /// Cells per axis on the first box; larger boxes keep its spacing.
    pub cells: usize,
    #[serde(default = "ones")]
    pub boundary: BoundarySpec,
    #[serde(default)]
    pub solver: SolverSpec,
    /// Analytic density the solution is compared with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub singular_points: Vec<Vec<f64>>,
}

fn ones() -> BoundarySpec {
    BoundarySpec::Ones
}

impl SolveRequest {
    /// Cell counts per box: the spacing of the first box, rounded to an even count.
    pub fn cell_ladder(&self) -> Vec<usize> {
        let r0 = self.half_widths[0];
        self.half_widths
            .iter()
            .map(|r| {
                let n = (self.cells as f64 * r / r0 / 2.0).round() as usize * 2;
                n.max(2)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriteriaRequest {
    /// Density used by every check; an analytic name or `"solved"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CriterionRequest>,
    /// Smallest constants making a check hold on its grid.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub searches: Vec<SearchRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume_recurrence: Option<VolumeRecurrenceRequest>,
    /// `μ(B_r)` table at the given radii.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume_profile: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub check: CriterionRequest,
    pub constant: ConstantName,
    pub lo: f64,
    pub hi: f64,
    #[serde(default = "default_search_tolerance")]
    pub tolerance: f64,
}

fn default_search_tolerance() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeRecurrenceRequest {
    pub n_max: f64,
}

/// Time stepping shared by the simulation and ergodic stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Stepping {
    pub dt: f64,
    pub horizon: f64,
    pub radii: Vec<f64>,
    pub kappa: Option<f64>,
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentRequest {
    pub phi: String,
    /// Constant of the bound `e^{Mt} φ(x₀)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionRequest {
    pub t: f64,
    /// Density whose normalized marginals the empirical ones are compared with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationRequest {
    pub x0: Vec<f64>,
    pub paths: usize,
    pub dt: f64,
    pub horizon: f64,
    /// Localization radii; paths are absorbed at the largest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub radii: Vec<f64>,
    /// Drift clip threshold `‖G‖Δ > κ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Record intervals of the stored trajectories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub moments: Vec<MomentRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<TransitionRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErgodicRequest {
    pub x0: Vec<f64>,
    pub f: String,
    pub burn_in: f64,
    pub dt: f64,
    pub horizon: f64,
    /// Localization radii; paths are absorbed at the largest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub radii: Vec<f64>,
    /// Drift clip threshold `‖G‖Δ > κ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Record intervals of the stored trajectories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Density whose space average `∫fρ/∫ρ` the time average is compared with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    /// Absolute tolerance of that comparison.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqRequest {
    pub q: f64,
    pub radii: Vec<f64>,
    pub density: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrylovRequest {
    pub f: String,
    pub t: f64,
    pub starts: Vec<Vec<f64>>,
    /// Points where `f` may fail to evaluate; such evaluations are skipped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub singular: Vec<Vec<f64>>,
    pub dt: f64,
    pub paths: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    /// Repeat the first start with `Δ/4`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub refine: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lq: Option<LqRequest>,
}

macro_rules! stepping {
    ($t:ty) => {
        impl $t {
            pub fn stepping(&self) -> Stepping {
                Stepping {
                    dt: self.dt,
                    horizon: self.horizon,
                    radii: self.radii.clone(),
                    kappa: self.kappa,
                    samples: self.samples,
                }
            }
        }
    };
}

stepping!(SimulationRequest);
stepping!(ErgodicRequest);

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            schema(if path == "." { "(document)".into() } else { path }, e.into_inner().to_string())
        })?;
        if scenario.schema_version != SCHEMA_VERSION {
            return Err(schema(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", scenario.schema_version),
            ));
        }
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Canonical JSON: keys sorted, defaults omitted.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("scenario serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    /// Names of the densities other stages may reference.
    pub fn density_names(&self) -> BTreeSet<String> {
        let mut names = BTreeSet::new();
        if let Some(d) = &self.density {
            names.extend(d.analytic.iter().map(|n| n.name.clone()));
            if d.solve.is_some() {
                names.insert(SOLVED.to_string());
            }
        }
        names
    }

    pub fn needs_solved_density(&self) -> bool {
        let solved = Some(SOLVED);
        self.criteria.as_ref().is_some_and(|c| c.density.as_deref() == solved)
            || self
                .simulation
                .as_ref()
                .and_then(|s| s.transition.as_ref())
                .is_some_and(|t| t.reference.as_deref() == solved)
            || self.ergodic.as_ref().is_some_and(|e| e.reference.as_deref() == solved)
            || self
                .krylov
                .as_ref()
                .and_then(|k| k.lq.as_ref())
                .is_some_and(|l| l.density == SOLVED)
    }
}

/// A scenario with every expression parsed and the coefficient set built.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub coefficients: CoefficientSet,
    pub analytic: Vec<(String, Expr)>,
}

struct Checker {
    dim: usize,
}

impl Checker {
    fn expr(&self, path: &str, src: &str) -> Result<Expr, ConfigError> {
        parse_expr(src, self.dim).map_err(|e| schema(path, e.to_string()))
    }

    fn exprs(&self, path: &str, srcs: &[String]) -> Result<Vec<Expr>, ConfigError> {
        srcs.iter()
            .enumerate()
            .map(|(i, s)| self.expr(&format!("{path}[{i}]"), s))
            .collect()
    }

    fn point(&self, path: &str, p: &[f64]) -> Result<(), ConfigError> {
        if p.len() != self.dim {
            return Err(schema(path, format!("needs {} coordinates, got {}", self.dim, p.len())));
        }
        if p.iter().any(|c| !c.is_finite()) {
            return Err(schema(path, "coordinates must be finite"));
        }
        Ok(())
    }

    fn positive(&self, path: &str, v: f64) -> Result<(), ConfigError> {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(schema(path, format!("must be positive and finite, got {v}")))
        }
    }

    fn increasing(&self, path: &str, v: &[f64]) -> Result<(), ConfigError> {
        for (i, r) in v.iter().enumerate() {
            self.positive(&format!("{path}[{i}]"), *r)?;
        }
        if v.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(schema(path, "must be strictly increasing"));
        }
        Ok(())
    }

    fn stepping(&self, path: &str, s: &Stepping) -> Result<(), ConfigError> {
        self.positive(&format!("{path}.dt"), s.dt)?;
        self.positive(&format!("{path}.horizon"), s.horizon)?;
        if s.horizon < s.dt {
            return Err(schema(format!("{path}.horizon"), "must be at least dt"));
        }
        self.increasing(&format!("{path}.radii"), &s.radii)?;
        if let Some(k) = s.kappa {
            self.positive(&format!("{path}.kappa"), k)?;
        }
        if s.samples == Some(0) {
            return Err(schema(format!("{path}.samples"), "must be at least 1"));
        }
        Ok(())
    }

    fn stochastic_dim(&self, path: &str) -> Result<(), ConfigError> {
        if self.dim < 2 {
            return Err(schema(path, "simulation needs dimension at least 2"));
        }
        Ok(())
    }
}

fn density_ref(path: &str, name: &str, names: &BTreeSet<String>) -> Result<(), ConfigError> {
    if names.contains(name) {
        Ok(())
    } else {
        Err(schema(
            path,
            format!("unknown density {name:?} (declared: {:?})", names.iter().collect::<Vec<_>>()),
        ))
    }
}

impl Prepared {
    /// Check everything that can be checked without running a stage.
    pub fn new(scenario: Scenario) -> Result<Self, ConfigError> {
        let dim = scenario.dimension;
        if !(1..=3).contains(&dim) {
            return Err(schema("dimension", format!("must be 1, 2 or 3, got {dim}")));
        }
        if scenario.name.trim().is_empty() {
            return Err(schema("name", "must not be empty"));
        }
        let ck = Checker { dim };
        let coeffs = &scenario.coefficients;
        let a = coeffs
            .a
            .iter()
            .enumerate()
            .map(|(i, row)| ck.exprs(&format!("coefficients.a[{i}]"), row))
            .collect::<Result<Vec<_>, _>>()?;
        let c = coeffs
            .c
            .iter()
            .enumerate()
            .map(|(i, row)| ck.exprs(&format!("coefficients.c[{i}]"), row))
            .collect::<Result<Vec<_>, _>>()?;
        let drift = match &coeffs.drift {
            DriftSpec::G(g) => Drift::Direct(ck.exprs("coefficients.drift.g", g)?),
            DriftSpec::H(h) => Drift::Divergence(ck.exprs("coefficients.drift.h", h)?),
            DriftSpec::FromDensity { density, bbar } => Drift::FromDensity {
                // a declared analytic density may be named instead of written out
                density: match scenario
                    .density
                    .iter()
                    .flat_map(|d| &d.analytic)
                    .find(|nd| &nd.name == density)
                {
                    Some(nd) => ck.expr("coefficients.drift.from_density.density", &nd.expr)?,
                    None => ck.expr("coefficients.drift.from_density.density", density)?,
                },
                bbar: ck.exprs("coefficients.drift.from_density.bbar", bbar)?,
            },
        };
        let probe = coeffs.probes.unwrap_or_default();
        ck.positive("coefficients.probes.half_width", probe.half_width)?;
        let probes = seeded_probes(dim, probe.half_width, probe.count, probe.seed);
        let coefficients = CoefficientSet::build(dim, &a, &c, drift, &probes)
            .map_err(|e| schema("coefficients", e.to_string()))?;

        let names = scenario.density_names();
        let mut analytic = Vec::new();
        if let Some(d) = &scenario.density {
            let mut seen = BTreeSet::new();
            for (i, nd) in d.analytic.iter().enumerate() {
                let path = format!("density.analytic[{i}]");
                if nd.name == SOLVED || !seen.insert(nd.name.clone()) {
                    return Err(schema(
                        format!("{path}.name"),
                        format!("{:?} is reserved or already declared", nd.name),
                    ));
                }
                analytic.push((nd.name.clone(), ck.expr(&format!("{path}.expr"), &nd.expr)?));
            }
            if let Some(inv) = &d.invariance {
                ck.positive("density.invariance.half_width", inv.half_width)?;
                if inv.nodes < 3 || inv.nodes % 2 == 0 {
                    return Err(schema("density.invariance.nodes", "Simpson needs an odd count ≥ 3"));
                }
            }
            if let Some(s) = &d.solve {
                if s.half_widths.is_empty() {
                    return Err(schema("density.solve.half_widths", "needs at least one box"));
                }
                ck.increasing("density.solve.half_widths", &s.half_widths)?;
                if s.cells < 2 || s.cells % 2 != 0 {
                    return Err(schema("density.solve.cells", "must be even and at least 2"));
                }
                if let BoundarySpec::Expression(e) = &s.boundary {
                    ck.expr("density.solve.boundary.expression", e)?;
                }
                if let Some(r) = &s.reference {
                    if !analytic.iter().any(|(n, _)| n == r) {
                        return Err(schema("density.solve.reference", format!("unknown analytic density {r:?}")));
                    }
                }
                for (i, p) in s.singular_points.iter().enumerate() {
                    ck.point(&format!("density.solve.singular_points[{i}]"), p)?;
                }
            }
        }

        if let Some(cr) = &scenario.criteria {
            if let Some(name) = &cr.density {
                density_ref("criteria.density", name, &names)?;
            }
            for (i, s) in cr.searches.iter().enumerate() {
                if !(s.lo < s.hi) || !(s.tolerance > 0.0) {
                    return Err(schema(format!("criteria.searches[{i}]"), "needs lo < hi and a positive tolerance"));
                }
            }
            if let Some(v) = &cr.volume_recurrence {
                if !(v.n_max >= 10.0) {
                    return Err(schema("criteria.volume_recurrence.n_max", "must be at least 10"));
                }
                if cr.density.is_none() {
                    return Err(schema("criteria.density", "the volume recurrence test needs a density"));
                }
            }
            if let Some(radii) = &cr.volume_profile {
                ck.increasing("criteria.volume_profile", radii)?;
                if cr.density.is_none() {
                    return Err(schema("criteria.density", "the volume profile needs a density"));
                }
            }
        }

        if let Some(s) = &scenario.simulation {
            ck.stochastic_dim("simulation")?;
            ck.point("simulation.x0", &s.x0)?;
            ck.stepping("simulation", &s.stepping())?;
            if s.paths == 0 {
                return Err(schema("simulation.paths", "must be at least 1"));
            }
            for (i, m) in s.moments.iter().enumerate() {
                ck.expr(&format!("simulation.moments[{i}].phi"), &m.phi)?;
            }
            if let Some(t) = &s.transition {
                ck.positive("simulation.transition.t", t.t)?;
                if let Some(r) = &t.reference {
                    density_ref("simulation.transition.reference", r, &names)?;
                }
            }
        }
        if let Some(e) = &scenario.ergodic {
            ck.stochastic_dim("ergodic")?;
            ck.point("ergodic.x0", &e.x0)?;
            ck.expr("ergodic.f", &e.f)?;
            ck.stepping("ergodic", &e.stepping())?;
            if !(e.burn_in >= 0.0 && e.burn_in < e.horizon) {
                return Err(schema("ergodic.burn_in", "must lie in [0, horizon)"));
            }
            if let Some(r) = &e.reference {
                density_ref("ergodic.reference", r, &names)?;
            }
        }
        if let Some(k) = &scenario.krylov {
            ck.stochastic_dim("krylov")?;
            ck.expr("krylov.f", &k.f)?;
            ck.positive("krylov.t", k.t)?;
            ck.positive("krylov.dt", k.dt)?;
            if k.paths == 0 || k.starts.is_empty() {
                return Err(schema("krylov", "needs at least one path and one start"));
            }
            for (i, p) in k.starts.iter().enumerate() {
                ck.point(&format!("krylov.starts[{i}]"), p)?;
            }
            for (i, p) in k.singular.iter().enumerate() {
                ck.point(&format!("krylov.singular[{i}]"), p)?;
            }
            if let Some(r) = &k.radii {
                ck.increasing("krylov.radii", r)?;
            }
            if let Some(lq) = &k.lq {
                ck.positive("krylov.lq.q", lq.q)?;
                ck.increasing("krylov.lq.radii", &lq.radii)?;
                density_ref("krylov.lq.density", &lq.density, &names)?;
            }
        }
        Ok(Prepared {
            scenario,
            coefficients,
            analytic,
        })
    }
}
