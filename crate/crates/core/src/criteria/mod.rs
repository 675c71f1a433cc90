//! Sufficient conditions for conservativeness, non-explosion, invariance,
//! recurrence and ergodicity, evaluated as sampled inequality checks.
//!
//! Every catalog entry is an inequality `lhs ≤ rhs` with margin `rhs − lhs`.
//! A point violates it when the margin is below `−rounding · scale`, where the
//! scale sums the magnitudes of the terms on both sides. Verdicts describe the
//! sampled points only: "holds-on-grid" is not a certificate.

mod grid;
mod templates;
mod trend;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calculus::{
    CalculusError, CoefficientSet, DensityField, DiffusionRoot, GaussianPrimitive, Generator,
    GeneratorMode, SmoothFunction, TwiceDifferentiable, VectorField,
};
use crate::density::{DensityError, VolumeOptions};
use crate::expr::{parse_expr, DiffMode, Expr, ParseError};

pub use grid::{
    default_annulus_counts, default_box_counts, directions, MarginField, PointMargin, Region,
    SkippedPoint,
};
pub use templates::{operator_terms, GrowthBound, OperatorRhs, RadialLhs, RadialRhs, Side, Template};
pub use trend::{
    fit_line, geometric_ladder, integrability_trend, recurrence_levels, recurrence_volume_test,
    LineFit, NamedFit, TrendTable, MIN_R2, VOLUME_RECURRENCE,
};

/// Relative allowance for rounding in margin comparisons.
pub const DEFAULT_ROUNDING: f64 = 1e-12;

/// Outer radius of default regions.
pub const DEFAULT_OUTER: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CriteriaError {
    #[error("{id} needs {what}")]
    MissingInput { id: &'static str, what: String },
    #[error("{id} needs dimension {need}, got {got}")]
    Dimension {
        id: &'static str,
        need: String,
        got: usize,
    },
    #[error("region: {0}")]
    Region(String),
    #[error("variant {variant:?} is not available for {id}")]
    Variant { id: &'static str, variant: Variant },
    #[error("expression `{text}`: {source}")]
    Parse { text: String, source: ParseError },
    #[error("{0} is not a pointwise template")]
    NotPointwise(&'static str),
    #[error(transparent)]
    Calculus(#[from] CalculusError),
    #[error(transparent)]
    Density(#[from] DensityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CriterionId {
    #[serde(rename = "LYAPUNOV_L")]
    LyapunovL,
    #[serde(rename = "LYAPUNOV_EXTERIOR")]
    LyapunovExterior,
    #[serde(rename = "GROWTH_NONEXPLOSION")]
    GrowthNonexplosion,
    #[serde(rename = "EIGENGAP_2D")]
    Eigengap2d,
    #[serde(rename = "LINEAR_GROWTH_MOMENT")]
    LinearGrowthMoment,
    #[serde(rename = "INTEGRABLE_COEFFS")]
    IntegrableCoeffs,
    #[serde(rename = "INVARIANCE_LYAPUNOV")]
    InvarianceLyapunov,
    #[serde(rename = "INVARIANCE_LOG_GROWTH")]
    InvarianceLogGrowth,
    #[serde(rename = "NON_INVARIANCE")]
    NonInvariance,
    #[serde(rename = "RECURRENCE_SUPERSOLUTION")]
    RecurrenceSupersolution,
    #[serde(rename = "RECURRENCE_GROWTH")]
    RecurrenceGrowth,
    #[serde(rename = "VOLUME_CONSERVATIVE")]
    VolumeConservative,
    #[serde(rename = "ERGODIC_DRIFT")]
    ErgodicDrift,
}

/// A catalog entry as listed by [`CriterionId::entry`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CatalogEntry {
    pub id: &'static str,
    pub template: &'static str,
    pub conclusion: &'static str,
    pub inputs: &'static str,
}

impl CriterionId {
    pub const ALL: [CriterionId; 13] = [
        CriterionId::LyapunovL,
        CriterionId::LyapunovExterior,
        CriterionId::GrowthNonexplosion,
        CriterionId::Eigengap2d,
        CriterionId::LinearGrowthMoment,
        CriterionId::IntegrableCoeffs,
        CriterionId::InvarianceLyapunov,
        CriterionId::InvarianceLogGrowth,
        CriterionId::NonInvariance,
        CriterionId::RecurrenceSupersolution,
        CriterionId::RecurrenceGrowth,
        CriterionId::VolumeConservative,
        CriterionId::ErgodicDrift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CriterionId::LyapunovL => "LYAPUNOV_L",
            CriterionId::LyapunovExterior => "LYAPUNOV_EXTERIOR",
            CriterionId::GrowthNonexplosion => "GROWTH_NONEXPLOSION",
            CriterionId::Eigengap2d => "EIGENGAP_2D",
            CriterionId::LinearGrowthMoment => "LINEAR_GROWTH_MOMENT",
            CriterionId::IntegrableCoeffs => "INTEGRABLE_COEFFS",
            CriterionId::InvarianceLyapunov => "INVARIANCE_LYAPUNOV",
            CriterionId::InvarianceLogGrowth => "INVARIANCE_LOG_GROWTH",
            CriterionId::NonInvariance => "NON_INVARIANCE",
            CriterionId::RecurrenceSupersolution => "RECURRENCE_SUPERSOLUTION",
            CriterionId::RecurrenceGrowth => "RECURRENCE_GROWTH",
            CriterionId::VolumeConservative => "VOLUME_CONSERVATIVE",
            CriterionId::ErgodicDrift => "ERGODIC_DRIFT",
        }
    }

    pub fn from_name(name: &str) -> Option<CriterionId> {
        CriterionId::ALL.into_iter().find(|id| id.name() == name)
    }

    pub fn entry(self) -> CatalogEntry {
        let (template, conclusion, inputs) = match self {
            CriterionId::LyapunovL => (
                "Lφ ≤ Mφ on R^d, φ ≥ 0, inf_{∂B_r} φ → ∞",
                "non-explosive, E_x[φ(X_t)] ≤ e^{Mt} φ(x)",
                "candidate φ (default ‖x‖²+1), M",
            ),
            CriterionId::LyapunovExterior => (
                "Lg ≤ Mg outside B̄_{N₀}, inf_{∂B_r} g → ∞",
                "non-explosive",
                "candidate g (default ln(‖x‖²∨N₀²)+2), M, N₀",
            ),
            CriterionId::GrowthNonexplosion => (
                "−⟨Ax,x⟩/‖x‖² + ½tr A + ⟨G,x⟩ ≤ M‖x‖²(ln‖x‖+1) outside B̄_{N₀}",
                "non-explosive",
                "M, N₀",
            ),
            CriterionId::Eigengap2d => (
                "|Ψ₁−Ψ₂|/2 + ⟨G,x⟩ ≤ M‖x‖²(ln‖x‖+1) outside B̄_{N₀}, Ψ₁, Ψ₂ the eigenvalues of A, d = 2",
                "non-explosive",
                "M, N₀",
            ),
            CriterionId::LinearGrowthMoment => (
                "separate: max|σ_ij| ≤ |h₁| + M(√‖x‖+1) and max|g_i| ≤ |h₂| + M(‖x‖+1); \
                 joint: max|σ_ij| + max|g_i| ≤ |h₁| + M(‖x‖+1)",
                "non-explosive with E_x[sup_{s≤t}‖X_s‖] ≤ D e^{Et} (separate) or \
                 E_x[sup_{s≤t}‖X_s‖²] ≤ D e^{Et} (joint)",
                "M, optional h₁, h₂",
            ),
            CriterionId::IntegrableCoeffs => (
                "a_ij, g_i − β_i ∈ L¹(μ)",
                "μ is invariant for the semigroup and for its dual: both are conservative",
                "density ρ",
            ),
            CriterionId::InvarianceLyapunov => (
                "L′u ≤ αu (mode L_adjoint) or Lu ≤ αu (mode L), u → ∞",
                "L_adjoint: μ is invariant, the dual semigroup is conservative; \
                 L: the semigroup is conservative",
                "candidate u (default ‖x‖²+1), α, density ρ for L_adjoint",
            ),
            CriterionId::InvarianceLogGrowth => (
                "−⟨Ax,x⟩/(‖x‖²+1) + ½tr A + ⟨b,x⟩ ≤ M(‖x‖²+1)(ln(‖x‖²+1)+1), \
                 b = β − B (mode L_adjoint) or G (mode L)",
                "L_adjoint: μ is invariant, the dual semigroup is conservative; \
                 L: the semigroup is conservative",
                "M, density ρ for L_adjoint",
            ),
            CriterionId::NonInvariance => (
                "L′u ≥ αu (mode L_adjoint) or Lu ≥ αu (mode L), u bounded, nonnegative, nonzero",
                "L_adjoint: μ is not invariant, the dual semigroup is not conservative; \
                 L: the semigroup is not conservative",
                "candidate u, α, density ρ for L_adjoint",
            ),
            CriterionId::RecurrenceSupersolution => (
                "Lg ≤ 0 outside B̄_{N₀}, inf_{∂B_r} g → ∞",
                "recurrent",
                "candidate g (default ln(‖x‖²∨N₀²)+2), N₀",
            ),
            CriterionId::RecurrenceGrowth => (
                "−⟨Ax,x⟩/‖x‖² + ½tr A + ⟨G,x⟩ ≤ 0 outside B̄_{N₀} (eigengap variant: \
                 |Ψ₁−Ψ₂|/2 + ⟨G,x⟩ ≤ 0, d = 2)",
                "recurrent",
                "N₀",
            ),
            CriterionId::VolumeConservative => (
                "polynomial: ⟨Ax,x⟩/‖x‖² + |⟨Bx,x⟩| ≤ M‖x‖² ln(‖x‖+1) outside B̄_{N₀} and \
                 μ(B_{4n}∖B_{2n}) ≤ (4n)^c for n ≥ N₁; exponential: ⟨Ax,x⟩ + |⟨Bx,x⟩| ≤ M‖x‖² \
                 and μ(B_{4n}∖B_{2n}) ≤ e^{c(4n)²}",
                "both semigroups are conservative and μ is invariant for both",
                "M, c, N₀, N₁, density ρ",
            ),
            CriterionId::ErgodicDrift => (
                "supersolution: Lg ≤ −c outside B̄_{N₀}, g → ∞; log_growth: −⟨Ax,x⟩/‖x‖² + ½tr A \
                 + ⟨G,x⟩ ≤ −M‖x‖²; quadratic: ½tr A + ⟨G,x⟩ ≤ −M; eigengap: |Ψ₁−Ψ₂|/2 + ⟨G,x⟩ \
                 ≤ −M‖x‖² (d = 2)",
                "μ is a finite invariant measure; the process is ergodic",
                "c or M, N₀, candidate g for supersolution",
            ),
        };
        CatalogEntry {
            id: self.name(),
            template,
            conclusion,
            inputs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    HoldsOnGrid,
    FailsWithWitness,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Separate,
    Joint,
    Polynomial,
    Exponential,
    Supersolution,
    LogGrowth,
    Quadratic,
    Standard,
    Eigengap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinCandidate {
    /// `∫_{−∞}^x e^{−t²} dt` in one dimension.
    GaussianPrimitive,
    /// `ln(‖x‖² ∨ N₀²) + 2`.
    LogNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CandidateSpec {
    Builtin { builtin: BuiltinCandidate },
    Expression(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n1: Option<f64>,
}

/// Which constant a search varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantName {
    M,
    Alpha,
    C,
}

/// A criterion check as requested by a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionRequest {
    pub id: CriterionId,
    #[serde(default)]
    pub constants: Constants,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<CandidateSpec>,
    /// Reject `max`/`min` kinks in the candidate instead of differentiating branchwise.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub smooth: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<GeneratorMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h2: Option<String>,
    /// Largest radius (INTEGRABLE_COEFFS) or annulus level (VOLUME_CONSERVATIVE).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounding: Option<f64>,
}

impl CriterionRequest {
    pub fn new(id: CriterionId) -> Self {
        CriterionRequest {
            id,
            constants: Constants::default(),
            candidate: None,
            smooth: false,
            mode: None,
            variant: None,
            region: None,
            h1: None,
            h2: None,
            n_max: None,
            rounding: None,
        }
    }

    pub fn m(mut self, m: f64) -> Self {
        self.constants.m = Some(m);
        self
    }

    pub fn alpha(mut self, alpha: f64) -> Self {
        self.constants.alpha = Some(alpha);
        self
    }

    pub fn c(mut self, c: f64) -> Self {
        self.constants.c = Some(c);
        self
    }

    pub fn n0(mut self, n0: f64) -> Self {
        self.constants.n0 = Some(n0);
        self
    }

    pub fn n1(mut self, n1: f64) -> Self {
        self.constants.n1 = Some(n1);
        self
    }

    pub fn candidate(mut self, expr: &str) -> Self {
        self.candidate = Some(CandidateSpec::Expression(expr.into()));
        self
    }

    pub fn builtin(mut self, b: BuiltinCandidate) -> Self {
        self.candidate = Some(CandidateSpec::Builtin { builtin: b });
        self
    }

    pub fn mode(mut self, mode: GeneratorMode) -> Self {
        self.mode = Some(mode);
        self
    }

    pub fn variant(mut self, v: Variant) -> Self {
        self.variant = Some(v);
        self
    }

    pub fn region(mut self, r: Region) -> Self {
        self.region = Some(r);
        self
    }

    fn rounding(&self) -> f64 {
        self.rounding.unwrap_or(DEFAULT_ROUNDING)
    }
}

/// Coefficients (and a density where the template needs one).
#[derive(Clone, Copy)]
pub struct CriterionInputs<'a> {
    pub coefficients: &'a CoefficientSet,
    pub density: Option<&'a DensityField>,
    pub volume: &'a VolumeOptions,
}

impl<'a> CriterionInputs<'a> {
    pub fn new(coefficients: &'a CoefficientSet, density: Option<&'a DensityField>) -> Self {
        static DEFAULT_VOLUME: std::sync::OnceLock<VolumeOptions> = std::sync::OnceLock::new();
        CriterionInputs {
            coefficients,
            density,
            volume: DEFAULT_VOLUME.get_or_init(VolumeOptions::default),
        }
    }
}

/// Candidate values on spheres of geometrically increasing radius.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SphereCheck {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    /// `infimum` for growth checks, `supremum` for boundedness checks.
    pub statistic: &'static str,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionVerdict {
    pub id: String,
    pub region: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<GeneratorMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate: Option<String>,
    pub constants: Constants,
    pub min_margin: Option<f64>,
    pub witness: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness_margin: Option<PointMargin>,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conclusion: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<MarginField>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sphere_checks: Vec<SphereCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trend_table: Option<TrendTable>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl CriterionVerdict {
    pub fn new(id: impl Into<String>, region: String) -> Self {
        CriterionVerdict {
            id: id.into(),
            region,
            mode: None,
            variant: None,
            candidate: None,
            constants: Constants::default(),
            min_margin: None,
            witness: None,
            witness_margin: None,
            verdict: Verdict::Inconclusive,
            conclusion: None,
            grid: None,
            sphere_checks: Vec::new(),
            trend_table: None,
            notes: Vec::new(),
        }
    }
}

/// `ln(max(‖x‖², N₀²)) + 2`.
pub fn log_norm_candidate(n0: f64) -> Expr {
    Expr::add(
        Expr::ln(Expr::max(Expr::norm2(), Expr::constant(n0 * n0))),
        Expr::constant(2.0),
    )
}

fn parse(text: &str, dim: usize) -> Result<Expr, CriteriaError> {
    parse_expr(text, dim).map_err(|source| CriteriaError::Parse {
        text: text.into(),
        source,
    })
}

fn need(id: CriterionId, v: Option<f64>, what: &str) -> Result<f64, CriteriaError> {
    v.ok_or_else(|| CriteriaError::MissingInput {
        id: id.name(),
        what: what.into(),
    })
}

/// Everything needed to evaluate a pointwise template.
struct Prepared {
    template: Template,
    region: Region,
    mode: Option<GeneratorMode>,
    variant: Option<Variant>,
    candidate: Option<Arc<dyn TwiceDifferentiable>>,
    /// Check `inf_{∂B_r} candidate → ∞`.
    growth: bool,
    /// Check the candidate is nonnegative on the grid and bounded on spheres.
    bounded_nonnegative: bool,
    /// Check the candidate is nonnegative on the grid.
    nonnegative: bool,
    conclusion: String,
}

fn prepare(req: &CriterionRequest, inputs: &CriterionInputs) -> Result<Prepared, CriteriaError> {
    let id = req.id;
    let cs = inputs.coefficients;
    let dim = cs.dim();
    let k = &req.constants;
    if let Some(rho) = inputs.density {
        if rho.dim() != dim {
            return Err(CriteriaError::Dimension {
                id: id.name(),
                need: format!("{dim} for the density"),
                got: rho.dim(),
            });
        }
    }
    let density = || {
        inputs.density.ok_or(CriteriaError::MissingInput {
            id: id.name(),
            what: "a density".into(),
        })
    };
    let candidate = |default: Option<Expr>| -> Result<Option<Arc<dyn TwiceDifferentiable>>, CriteriaError> {
        let mode = if req.smooth { DiffMode::Smooth } else { DiffMode::Piecewise };
        let expr = match &req.candidate {
            Some(CandidateSpec::Expression(s)) => parse(s, dim)?,
            Some(CandidateSpec::Builtin {
                builtin: BuiltinCandidate::GaussianPrimitive,
            }) => {
                if dim != 1 {
                    return Err(CriteriaError::Dimension {
                        id: id.name(),
                        need: "1 for gaussian_primitive".into(),
                        got: dim,
                    });
                }
                return Ok(Some(Arc::new(GaussianPrimitive)));
            }
            Some(CandidateSpec::Builtin {
                builtin: BuiltinCandidate::LogNorm,
            }) => log_norm_candidate(need(id, k.n0, "n0 for the ln(‖x‖²∨N₀²)+2 candidate")?),
            None => match default {
                Some(e) => e,
                None => return Ok(None),
            },
        };
        Ok(Some(Arc::new(SmoothFunction::new(&expr, dim, mode)?)))
    };
    let log_default = || -> Result<Expr, CriteriaError> {
        let n0 = need(id, k.n0, "n0")?;
        if !(n0 >= 1.0) {
            return Err(CriteriaError::MissingInput {
                id: id.name(),
                what: "n0 ≥ 1 for the default candidate".into(),
            });
        }
        Ok(log_norm_candidate(n0))
    };
    let exterior = |n0: f64| {
        req.region
            .clone()
            .unwrap_or_else(|| Region::annulus(n0, DEFAULT_OUTER.max(4.0 * n0)))
    };
    let whole = || req.region.clone().unwrap_or_else(|| Region::annulus(0.0, DEFAULT_OUTER));
    let generator = |mode: GeneratorMode| -> Result<Generator, CriteriaError> {
        let rho = match mode {
            GeneratorMode::L => inputs.density,
            _ => Some(density()?),
        };
        Ok(Generator::new(cs, rho, mode)?)
    };
    let only = |allowed: &[Variant], default: Variant| -> Result<Variant, CriteriaError> {
        let v = req.variant.unwrap_or(default);
        if allowed.contains(&v) {
            Ok(v)
        } else {
            Err(CriteriaError::Variant { id: id.name(), variant: v })
        }
    };
    let two_d = || {
        if dim == 2 {
            Ok(())
        } else {
            Err(CriteriaError::Dimension {
                id: id.name(),
                need: "2".into(),
                got: dim,
            })
        }
    };
    let g_field = VectorField::Symbolic(cs.g().to_vec());
    let entry = id.entry();
    let base = |template, region, cand, growth| Prepared {
        template,
        region,
        mode: None,
        variant: None,
        candidate: cand,
        growth,
        bounded_nonnegative: false,
        nonnegative: false,
        conclusion: entry.conclusion.to_string(),
    };
    let operator = |gen: Generator, cand: &Arc<dyn TwiceDifferentiable>, rhs, side| Template::Operator {
        generator: gen,
        candidate: cand.clone(),
        rhs,
        side,
    };
    let radial = |field: VectorField, lhs, rhs| Template::Radial {
        cs: cs.clone(),
        field,
        lhs,
        rhs,
    };
    Ok(match id {
        CriterionId::LyapunovL => {
            let m = need(id, k.m, "M")?;
            let cand = candidate(Some(parse("norm2(x) + 1", dim)?))?.expect("default");
            let t = operator(generator(GeneratorMode::L)?, &cand, OperatorRhs::Multiple(m), Side::AtMost);
            let mut p = base(t, whole(), Some(cand), true);
            p.nonnegative = true;
            p.mode = Some(GeneratorMode::L);
            p
        }
        CriterionId::LyapunovExterior => {
            let m = need(id, k.m, "M")?;
            let n0 = need(id, k.n0, "n0")?;
            let cand = candidate(Some(log_default()?))?.expect("default");
            let t = operator(generator(GeneratorMode::L)?, &cand, OperatorRhs::Multiple(m), Side::AtMost);
            let mut p = base(t, exterior(n0), Some(cand), true);
            p.mode = Some(GeneratorMode::L);
            p
        }
        CriterionId::GrowthNonexplosion => {
            let m = need(id, k.m, "M")?;
            let n0 = need(id, k.n0, "n0")?;
            let t = radial(g_field, RadialLhs::Growth, RadialRhs::LogQuadratic(m));
            base(t, exterior(n0), None, false)
        }
        CriterionId::Eigengap2d => {
            two_d()?;
            let m = need(id, k.m, "M")?;
            let n0 = need(id, k.n0, "n0")?;
            let t = radial(g_field, RadialLhs::Eigengap, RadialRhs::LogQuadratic(m));
            base(t, exterior(n0), None, false)
        }
        CriterionId::LinearGrowthMoment => {
            let m = need(id, k.m, "M")?;
            let v = only(&[Variant::Separate, Variant::Joint], Variant::Separate)?;
            let h1 = req.h1.as_deref().map(|s| parse(s, dim)).transpose()?;
            let h2 = req.h2.as_deref().map(|s| parse(s, dim)).transpose()?;
            let t = Template::LinearGrowth {
                cs: cs.clone(),
                root: DiffusionRoot::new(cs)?,
                h1,
                h2,
                m,
                bound: if v == Variant::Joint { GrowthBound::Joint } else { GrowthBound::Separate },
            };
            let mut p = base(t, whole(), None, false);
            p.variant = Some(v);
            p.conclusion = match v {
                Variant::Joint => "non-explosive, E_x[sup_{s≤t}‖X_s‖²] ≤ D e^{Et}",
                _ => "non-explosive, E_x[sup_{s≤t}‖X_s‖] ≤ D e^{Et}",
            }
            .into();
            p
        }
        CriterionId::InvarianceLyapunov | CriterionId::NonInvariance => {
            let alpha = need(id, k.alpha, "alpha")?;
            let mode = req.mode.unwrap_or(GeneratorMode::Adjoint);
            if mode == GeneratorMode::Symmetric {
                return Err(CriteriaError::MissingInput {
                    id: id.name(),
                    what: "mode L or L_adjoint".into(),
                });
            }
            let gen = generator(mode)?;
            let (cand, side, growth) = if id == CriterionId::InvarianceLyapunov {
                (candidate(Some(parse("norm2(x) + 1", dim)?))?.expect("default"), Side::AtMost, true)
            } else {
                let c = candidate(None)?.ok_or(CriteriaError::MissingInput {
                    id: id.name(),
                    what: "a bounded candidate u".into(),
                })?;
                (c, Side::AtLeast, false)
            };
            let t = operator(gen, &cand, OperatorRhs::Multiple(alpha), side);
            let mut p = base(t, whole(), Some(cand), growth);
            p.mode = Some(mode);
            p.bounded_nonnegative = id == CriterionId::NonInvariance;
            p.conclusion = match (id, mode) {
                (CriterionId::InvarianceLyapunov, GeneratorMode::L) => {
                    "the semigroup (T_t) is conservative"
                }
                (CriterionId::InvarianceLyapunov, _) => {
                    "μ is invariant for the semigroup; the dual semigroup (T′_t) is conservative"
                }
                (_, GeneratorMode::L) => "the semigroup (T_t) is not conservative",
                _ => "μ is not invariant for the semigroup; the dual semigroup (T′_t) is not conservative",
            }
            .into();
            p
        }
        CriterionId::InvarianceLogGrowth => {
            let m = need(id, k.m, "M")?;
            let mode = req.mode.unwrap_or(GeneratorMode::Adjoint);
            let gen = generator(mode)?;
            let t = radial(gen.drift().clone(), RadialLhs::ShiftedGrowth, RadialRhs::ShiftedLogQuadratic(m));
            let mut p = base(t, whole(), None, false);
            p.mode = Some(mode);
            p.conclusion = if mode == GeneratorMode::L {
                "the semigroup (T_t) is conservative"
            } else {
                "μ is invariant for the semigroup; the dual semigroup (T′_t) is conservative"
            }
            .into();
            p
        }
        CriterionId::RecurrenceSupersolution => {
            let n0 = need(id, k.n0, "n0")?;
            let cand = candidate(Some(log_default()?))?.expect("default");
            let t = operator(
                generator(GeneratorMode::L)?,
                &cand,
                OperatorRhs::Expr(Expr::zero()),
                Side::AtMost,
            );
            let mut p = base(t, exterior(n0), Some(cand), true);
            p.mode = Some(GeneratorMode::L);
            p
        }
        CriterionId::RecurrenceGrowth => {
            let n0 = need(id, k.n0, "n0")?;
            let v = only(&[Variant::Standard, Variant::Eigengap], Variant::Standard)?;
            let lhs = if v == Variant::Eigengap {
                two_d()?;
                RadialLhs::Eigengap
            } else {
                RadialLhs::Growth
            };
            let mut p = base(radial(g_field, lhs, RadialRhs::Zero), exterior(n0), None, false);
            p.variant = Some(v);
            p
        }
        CriterionId::VolumeConservative => {
            let m = need(id, k.m, "M")?;
            let n0 = need(id, k.n0, "n0")?;
            let v = only(&[Variant::Polynomial, Variant::Exponential], Variant::Polynomial)?;
            let b = crate::calculus::decompose_drift(cs, density()?);
            let (lhs, rhs) = if v == Variant::Exponential {
                (RadialLhs::VolumeQuadratic, RadialRhs::Quadratic(m))
            } else {
                (RadialLhs::VolumeRatio, RadialRhs::AnnulusLog(m))
            };
            let mut p = base(radial(b, lhs, rhs), exterior(n0), None, false);
            p.variant = Some(v);
            p
        }
        CriterionId::ErgodicDrift => {
            let n0 = need(id, k.n0, "n0")?;
            let v = only(
                &[Variant::Supersolution, Variant::LogGrowth, Variant::Quadratic, Variant::Eigengap],
                Variant::Supersolution,
            )?;
            let mut p = match v {
                Variant::Supersolution => {
                    let c = need(id, k.c, "c")?;
                    let cand = candidate(Some(log_default()?))?.expect("default");
                    let t = operator(
                        generator(GeneratorMode::L)?,
                        &cand,
                        OperatorRhs::Expr(Expr::constant(-c)),
                        Side::AtMost,
                    );
                    let mut p = base(t, exterior(n0), Some(cand), true);
                    p.mode = Some(GeneratorMode::L);
                    p
                }
                _ => {
                    let m = need(id, k.m, "M")?;
                    let (lhs, rhs) = match v {
                        Variant::LogGrowth => (RadialLhs::Growth, RadialRhs::NegQuadratic(m)),
                        Variant::Quadratic => (RadialLhs::HalfTrace, RadialRhs::NegConstant(m)),
                        _ => {
                            two_d()?;
                            (RadialLhs::Eigengap, RadialRhs::NegQuadratic(m))
                        }
                    };
                    base(radial(g_field, lhs, rhs), exterior(n0), None, false)
                }
            };
            p.variant = Some(v);
            p
        }
        CriterionId::IntegrableCoeffs => return Err(CriteriaError::NotPointwise(id.name())),
    })
}

/// Margin field of `(Op φ)(x) ≤ rhs(x)` over a region, where `Op` is `L`,
/// its adjoint `L′` or the symmetric part according to `mode`.
pub fn lyapunov_margin(
    cs: &CoefficientSet,
    rho: Option<&DensityField>,
    candidate: Arc<dyn TwiceDifferentiable>,
    mode: GeneratorMode,
    rhs: OperatorRhs,
    region: &Region,
) -> Result<MarginField, CriteriaError> {
    let template = Template::Operator {
        generator: Generator::new(cs, rho, mode)?,
        candidate,
        rhs,
        side: Side::AtMost,
    };
    let points = region.points(cs.dim())?;
    Ok(MarginField::evaluate(points, DEFAULT_ROUNDING, |x| template.at(x)))
}

/// Re-evaluate a pointwise template at a single point.
pub fn evaluate_at(
    req: &CriterionRequest,
    inputs: &CriterionInputs,
    x: &[f64],
) -> Result<PointMargin, CriteriaError> {
    Ok(prepare(req, inputs)?.template.at(x)?)
}

fn sphere_values(
    f: &dyn TwiceDifferentiable,
    dim: usize,
    start: f64,
    supremum: bool,
) -> SphereCheck {
    let counts = default_annulus_counts(dim);
    let dirs = directions(dim, &counts[1..]);
    let mut radii = Vec::new();
    let mut values = Vec::new();
    let mut r = start.max(1.0);
    for _ in 0..9 {
        let vals: Result<Vec<f64>, CalculusError> = dirs
            .par_iter()
            .map(|d| {
                let x: Vec<f64> = d.iter().map(|c| r * c).collect();
                f.value(&x)
            })
            .collect();
        let Ok(vals) = vals else { break };
        let v = if supremum {
            vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        } else {
            vals.iter().copied().fold(f64::INFINITY, f64::min)
        };
        if v.is_nan() {
            break;
        }
        radii.push(r);
        values.push(v);
        r *= 4.0;
    }
    let passes = if supremum {
        values.len() >= 3 && values.iter().all(|v| v.is_finite())
            && *values.last().unwrap() <= 2.0 * values[0].abs().max(values[1].abs())
    } else {
        values.len() >= 3 && values.windows(2).all(|w| w[1] > w[0])
    };
    SphereCheck {
        radii,
        values,
        statistic: if supremum { "supremum" } else { "infimum" },
        passes,
    }
}

/// Instantiate and evaluate a catalog entry.
pub fn evaluate_criterion(
    req: &CriterionRequest,
    inputs: &CriterionInputs,
) -> Result<CriterionVerdict, CriteriaError> {
    let cs = inputs.coefficients;
    let dim = cs.dim();
    if req.id == CriterionId::IntegrableCoeffs {
        let rho = inputs.density.ok_or(CriteriaError::MissingInput {
            id: req.id.name(),
            what: "a density".into(),
        })?;
        let mut v = integrability_trend(cs, rho, req.n_max.unwrap_or(64.0), inputs.volume)?;
        v.constants = req.constants;
        if v.verdict == Verdict::HoldsOnGrid {
            v.conclusion = Some(req.id.entry().conclusion.into());
        }
        return Ok(v);
    }
    let p = prepare(req, inputs)?;
    let rounding = req.rounding();
    let points = p.region.points(dim)?;
    let field = MarginField::evaluate(points, rounding, |x| p.template.at(x));
    let mut v = CriterionVerdict::new(req.id.name(), p.region.describe());
    v.mode = p.mode;
    v.variant = p.variant;
    v.constants = req.constants;
    v.candidate = p.candidate.as_ref().map(|c| c.describe());
    v.min_margin = field.min_margin;
    let mut worst: Option<(usize, PointMargin)> = None;
    for (i, m) in field.margins.iter().enumerate() {
        if let Some(m) = m.filter(|m| m.violated(rounding)) {
            if worst.is_none_or(|(_, w)| m.margin < w.margin) {
                worst = Some((i, m));
            }
        }
    }
    v.verdict = if let Some((i, m)) = worst {
        v.witness = Some(field.points[i].clone());
        v.witness_margin = Some(m);
        Verdict::FailsWithWitness
    } else if field.evaluated == 0 {
        v.notes.push("no grid point could be evaluated".into());
        Verdict::Inconclusive
    } else {
        v.witness = field.argmin.clone();
        v.witness_margin = field.min_point();
        Verdict::HoldsOnGrid
    };
    if field.skipped > 0 {
        v.notes.push(format!("{} grid points skipped (evaluation failed)", field.skipped));
    }
    if let Some(cand) = &p.candidate {
        if p.nonnegative || p.bounded_nonnegative {
            let min_u = field
                .points
                .par_iter()
                .filter_map(|x| cand.value(x).ok())
                .reduce(|| f64::INFINITY, f64::min);
            if min_u < 0.0 {
                v.notes.push(format!("candidate takes the negative value {min_u:e} on the grid"));
                if v.verdict == Verdict::HoldsOnGrid {
                    v.verdict = Verdict::Inconclusive;
                }
            }
        }
        if p.growth {
            let check = sphere_values(cand.as_ref(), dim, p.region.outer_radius().min(1e3), false);
            if !check.passes {
                v.notes.push("candidate infima over spheres do not increase on the sampled ladder".into());
                if v.verdict == Verdict::HoldsOnGrid {
                    v.verdict = Verdict::Inconclusive;
                }
            } else {
                v.notes.push("growth at infinity sampled on spheres, not certified".into());
            }
            v.sphere_checks.push(check);
        }
        if p.bounded_nonnegative {
            let check = sphere_values(cand.as_ref(), dim, p.region.outer_radius().min(1e3), true);
            if !check.passes {
                v.notes.push("candidate suprema over spheres grow; boundedness is doubtful".into());
                if v.verdict == Verdict::HoldsOnGrid {
                    v.verdict = Verdict::Inconclusive;
                }
            }
            v.sphere_checks.push(check);
        }
    }
    if req.id == CriterionId::VolumeConservative {
        volume_levels(req, inputs, &mut v)?;
    }
    if v.verdict == Verdict::HoldsOnGrid {
        v.conclusion = Some(p.conclusion);
    }
    v.grid = Some(field);
    Ok(v)
}

/// Annulus measures `μ(B_{4n} ∖ B_{2n})` against `(4n)^c` or `e^{c(4n)²}`, compared in log form.
fn volume_levels(
    req: &CriterionRequest,
    inputs: &CriterionInputs,
    v: &mut CriterionVerdict,
) -> Result<(), CriteriaError> {
    let id = req.id;
    let c = need(id, req.constants.c, "c")?;
    let n1 = need(id, req.constants.n1, "n1")?.max(1.0);
    let rho = inputs.density.expect("checked in prepare");
    let mut top = req.n_max.unwrap_or(16.0 * n1);
    if let Some(limit) = inputs.volume.domain.or(match rho {
        DensityField::Grid(g) => Some(g.mesh().half_width),
        DensityField::Analytic { .. } => None,
    }) {
        top = top.min(limit / 4.0);
    }
    if top < n1 {
        v.notes.push("annulus levels do not fit inside the density domain".into());
        v.verdict = Verdict::Inconclusive;
        return Ok(());
    }
    let levels = geometric_ladder(n1, top, 2.0);
    let profile = crate::density::volume_profile(None, rho, &[], &levels, inputs.volume)?;
    let exponential = v.variant == Some(Variant::Exponential);
    let mut rows = Vec::new();
    let mut failing = Vec::new();
    for a in &profile.annuli {
        let bound = if exponential {
            c * (4.0 * a.level).powi(2)
        } else {
            c * (4.0 * a.level).ln()
        };
        let log_mu = a.mu_annulus.ln();
        if log_mu > bound {
            failing.push(a.level);
        }
        rows.push(vec![a.level, a.mu_annulus, log_mu, bound, bound - log_mu]);
    }
    v.trend_table = Some(TrendTable {
        columns: ["n", "mu_annulus", "ln_mu_annulus", "ln_bound", "margin"]
            .map(String::from)
            .to_vec(),
        rows,
        fits: Vec::new(),
    });
    if !failing.is_empty() {
        v.notes.push(format!("annulus bound fails at levels {failing:?}; increase c or N₁"));
        if v.verdict == Verdict::HoldsOnGrid {
            v.verdict = Verdict::Inconclusive;
        }
    } else {
        v.notes.push("annulus bound checked on a finite ladder of levels only".into());
    }
    Ok(())
}

/// Smallest value of one constant in `[lo, hi]` for which no grid point
/// violates the template, by bisection to absolute width `tol`. Assumes the
/// margins are nondecreasing in that constant. `None` when `hi` itself fails.
pub fn smallest_constant(
    req: &CriterionRequest,
    inputs: &CriterionInputs,
    which: ConstantName,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<Option<f64>, CriteriaError> {
    let points = prepare(req, inputs)?.region.points(inputs.coefficients.dim())?;
    let rounding = req.rounding();
    let feasible = |value: f64| -> Result<bool, CriteriaError> {
        let mut r = req.clone();
        match which {
            ConstantName::M => r.constants.m = Some(value),
            ConstantName::Alpha => r.constants.alpha = Some(value),
            ConstantName::C => r.constants.c = Some(value),
        }
        let p = prepare(&r, inputs)?;
        let violated = points
            .par_iter()
            .any(|x| p.template.at(x).is_ok_and(|m| m.violated(rounding)));
        Ok(!violated)
    };
    if !feasible(hi)? {
        return Ok(None);
    }
    if feasible(lo)? {
        return Ok(Some(lo));
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > tol {
        let mid = 0.5 * (a + b);
        if feasible(mid)? {
            b = mid;
        } else {
            a = mid;
        }
    }
    Ok(Some(b))
}
