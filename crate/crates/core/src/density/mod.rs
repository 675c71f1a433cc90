//! Invariant densities from the divergence-form equation
//! `∫ ⟨½(A + C^T)∇u − uH, ∇f⟩ dx = 0` on exhausting boxes.
//!
//! The default boundary value 1 mirrors the construction `u = v + 1` with
//! `v` vanishing on the boundary; the solution is normalized to 1 at the
//! origin.

mod assemble;
mod banded;
mod io;
mod sparse;
pub(crate) mod volume;

use serde::Serialize;
use thiserror::Error;

use crate::calculus::{
    bump_library, invariance_residual, CalculusError, CoefficientSet, DensityField, GridDensity,
    QuadratureRule, ResidualForm, ResidualReport,
};
use crate::expr::{EvalError, Expr};
use crate::mesh::BoxMesh;

pub use assemble::{assemble_system, DiscreteSystem};
pub use banded::{BandedLu, SingularBand};
pub use io::{csv_number, read_density_csv, write_density_csv, GridFileError};
pub use sparse::{backward_error, bicgstab, CsrMatrix, Ilu0, KrylovOutcome, ZeroPivot};
pub use volume::{
    ball_measures, recurrence_sequence, volume_profile, AnnulusRow, RecurrenceRow, VolumeOptions,
    VolumeProfile, VolumeRow,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DensityError {
    #[error(transparent)]
    Calculus(#[from] CalculusError),
    #[error("{0}")]
    Dimension(String),
    #[error("the mesh needs an even cell count so the origin is a node (got {0})")]
    OddCells(usize),
    #[error("coefficients fail to evaluate at face center {point:?}: {source}")]
    FaceEvaluation { point: Vec<f64>, source: EvalError },
    #[error("boundary data fails to evaluate at {point:?}: {source}")]
    BoundaryEvaluation { point: Vec<f64>, source: EvalError },
    #[error("linear solver did not converge after {iterations} iterations (backward error {residual:e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },
    #[error("discrete system is singular: {0}")]
    Singular(String),
    #[error("solution value at the origin is {0}, cannot normalize")]
    NonPositiveNormalization(f64),
    #[error("radius {radius} exceeds the available domain of half-width {limit}")]
    RadiusOutsideDomain { radius: f64, limit: f64 },
}

/// Dirichlet data on the box boundary.
#[derive(Debug, Clone)]
pub enum Boundary {
    Ones,
    Expression(Expr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverChoice {
    /// Banded LU while its storage fits the limit, otherwise BiCGSTAB.
    Auto,
    Direct,
    Iterative,
}

#[derive(Debug, Clone)]
pub struct DensityOptions {
    pub solver: SolverChoice,
    /// Backward-error tolerance of the iterative solver.
    pub tolerance: f64,
    /// Defaults to ten times the number of unknowns.
    pub max_iterations: Option<usize>,
    /// Largest banded-LU storage, in matrix entries, that `Auto` accepts.
    pub direct_storage_limit: usize,
    /// Points where coefficients are singular; a node landing exactly on one
    /// (other than the origin) makes the solver stretch the box slightly.
    pub singular_points: Vec<Vec<f64>>,
}

impl Default for DensityOptions {
    fn default() -> Self {
        DensityOptions {
            solver: SolverChoice::Auto,
            tolerance: 1e-10,
            max_iterations: None,
            direct_storage_limit: 80_000_000,
            singular_points: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverDiagnostics {
    pub method: &'static str,
    pub unknowns: usize,
    pub nonzeros: usize,
    pub iterations: usize,
    /// `‖b − Ax‖∞ / (‖A‖∞‖x‖∞ + ‖b‖∞)` of the final iterate.
    pub backward_error: f64,
    pub history: Vec<f64>,
    pub converged: bool,
}

/// Grid solution normalized to 1 at the origin.
#[derive(Debug, Clone, Serialize)]
pub struct DensityApproximation {
    pub mesh: BoxMesh,
    /// Box half-width before any stretch away from singular points.
    pub requested_half_width: f64,
    #[serde(skip)]
    pub values: Vec<f64>,
    /// Raw solution value at the origin that was divided out.
    pub normalization: f64,
    pub positivity_min: f64,
    pub positivity_argmin: Vec<f64>,
    /// False when some node value is not strictly positive.
    pub valid: bool,
    pub peclet_max: f64,
    pub warnings: Vec<String>,
    pub solver: SolverDiagnostics,
}

impl DensityApproximation {
    pub fn field(&self) -> DensityField {
        DensityField::grid(GridDensity::new(self.mesh.clone(), self.values.clone()))
    }

    /// Multilinear interpolant, `None` outside the box.
    pub fn value_at(&self, x: &[f64]) -> Option<f64> {
        self.mesh.interpolate(&self.values, x)
    }

    /// Diagnostics block as JSON.
    pub fn diagnostics_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("diagnostics serialize")
    }
}

/// Stretch `half_width` by one part in 10⁶ until no node coincides with a
/// singular point. The origin is always a node and is exempt.
fn avoid_singular_nodes(dim: usize, half_width: f64, cells: usize, points: &[Vec<f64>]) -> f64 {
    let mut r = half_width;
    for _ in 0..16 {
        let mesh = BoxMesh::new(dim, r, cells);
        let h = mesh.spacing();
        let hit = points.iter().any(|p| {
            p.iter().any(|c| *c != 0.0)
                && p.iter().all(|&c| {
                    let t = (c + r) / h;
                    let nearest = t.round();
                    nearest >= 0.0
                        && nearest <= cells as f64
                        && (t - nearest).abs() <= 1e-9 * (1.0 + t.abs())
                })
        });
        if !hit {
            return r;
        }
        r *= 1.0 + 1e-6;
    }
    r
}

fn solve_system(
    sys: &DiscreteSystem,
    boundary: &Boundary,
    options: &DensityOptions,
) -> Result<(Vec<f64>, SolverDiagnostics), DensityError> {
    let n = sys.matrix.n;
    let (kl, ku) = sys.matrix.bandwidths();
    let direct = match options.solver {
        SolverChoice::Direct => true,
        SolverChoice::Iterative => false,
        SolverChoice::Auto => BandedLu::storage(n, kl, ku) <= options.direct_storage_limit,
    };
    if direct {
        let lu = BandedLu::factor(&sys.matrix).map_err(|e| DensityError::Singular(e.to_string()))?;
        let x = lu.solve(&sys.rhs);
        let berr = backward_error(&sys.matrix, &x, &sys.rhs);
        return Ok((
            x,
            SolverDiagnostics {
                method: "banded-lu",
                unknowns: n,
                nonzeros: sys.matrix.nnz(),
                iterations: 0,
                backward_error: berr,
                history: vec![berr],
                converged: berr.is_finite(),
            },
        ));
    }
    let ilu = Ilu0::new(&sys.matrix).map_err(|e| DensityError::Singular(e.to_string()))?;
    let mut x = match boundary {
        Boundary::Ones => vec![1.0; n],
        Boundary::Expression(_) => vec![0.0; n],
    };
    let max_iter = options.max_iterations.unwrap_or(10 * n);
    let out = bicgstab(&sys.matrix, &ilu, &sys.rhs, &mut x, options.tolerance, max_iter);
    let berr = backward_error(&sys.matrix, &x, &sys.rhs);
    if !out.converged {
        return Err(DensityError::NotConverged {
            iterations: out.iterations,
            residual: berr,
            history: out.history,
        });
    }
    Ok((
        x,
        SolverDiagnostics {
            method: "bicgstab-ilu0",
            unknowns: n,
            nonzeros: sys.matrix.nnz(),
            iterations: out.iterations,
            backward_error: berr,
            history: out.history,
            converged: true,
        },
    ))
}

/// Raw (unnormalized) nodal solution of the discrete system.
pub fn solve_raw(
    cs: &CoefficientSet,
    mesh: &BoxMesh,
    boundary: &Boundary,
    options: &DensityOptions,
) -> Result<(Vec<f64>, DiscreteSystem, SolverDiagnostics), DensityError> {
    let sys = assemble_system(cs, mesh, boundary)?;
    let (x, diag) = solve_system(&sys, boundary, options)?;
    let full = sys.extend(&x);
    Ok((full, sys, diag))
}

/// Solve on `[-R, R]^d` with `cells` cells per axis and normalize at the origin.
pub fn solve_density(
    cs: &CoefficientSet,
    half_width: f64,
    cells: usize,
    boundary: &Boundary,
    options: &DensityOptions,
) -> Result<DensityApproximation, DensityError> {
    let d = cs.dim();
    if !(1..=3).contains(&d) {
        return Err(DensityError::Dimension(format!(
            "density meshes support dimensions 1 to 3, got {d}"
        )));
    }
    if cells % 2 != 0 || cells < 2 {
        return Err(DensityError::OddCells(cells));
    }
    let r = avoid_singular_nodes(d, half_width, cells, &options.singular_points);
    let mesh = BoxMesh::new(d, r, cells);
    let (raw, sys, solver) = solve_raw(cs, &mesh, boundary, options)?;
    let origin = mesh.origin().expect("even cell count has an origin node");
    let norm = raw[origin];
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(DensityError::NonPositiveNormalization(norm));
    }
    let values: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let (mut min, mut argmin) = (f64::INFINITY, 0);
    for (i, &v) in values.iter().enumerate() {
        if v < min || v.is_nan() {
            min = v;
            argmin = i;
        }
    }
    let mut multi = vec![0; d];
    let mut point = vec![0.0; d];
    mesh.multi(argmin, &mut multi);
    mesh.point(&multi, &mut point);
    let mut warnings = Vec::new();
    if sys.peclet_max > 2.0 {
        warnings.push(format!(
            "cell Péclet number {:.3} exceeds 2; central fluxes may oscillate",
            sys.peclet_max
        ));
    }
    if r != half_width {
        warnings.push(format!("half-width stretched from {half_width} to {r} to avoid a singular node"));
    }
    let valid = min > 0.0;
    if !valid {
        warnings.push(format!("non-positive value {min:e} at {point:?}"));
    }
    Ok(DensityApproximation {
        mesh,
        requested_half_width: half_width,
        values,
        normalization: norm,
        positivity_min: min,
        positivity_argmin: point,
        valid,
        peclet_max: sys.peclet_max,
        warnings,
        solver,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceSummary {
    /// Largest `|residual|`.
    pub max_abs: f64,
    /// Largest `|residual| / scale`.
    pub max_relative: f64,
    pub all_pass: bool,
    pub reports: Vec<ResidualReport>,
}

/// Weak-form invariance residuals of a computed density against the standard
/// bump library of `rule`, whose box must lie inside the mesh.
pub fn invariance_of_solution(
    cs: &CoefficientSet,
    rho: &DensityApproximation,
    rule: &QuadratureRule,
) -> Result<InvarianceSummary, DensityError> {
    let field = rho.field();
    invariance_of_field(cs, &field, rule)
}

/// Weak-form residuals of any density field against the bump library of `rule`.
pub fn invariance_of_field(
    cs: &CoefficientSet,
    field: &DensityField,
    rule: &QuadratureRule,
) -> Result<InvarianceSummary, DensityError> {
    let reports = bump_library(rule)?
        .iter()
        .map(|b| invariance_residual(cs, field, b.expr(), rule, ResidualForm::Weak))
        .collect::<Result<Vec<_>, _>>()?;
    let max_abs = reports.iter().map(|r| r.value.abs()).fold(0.0, f64::max);
    let max_relative = reports
        .iter()
        .map(|r| if r.scale > 0.0 { r.value.abs() / r.scale } else { r.value.abs() })
        .fold(0.0, f64::max);
    Ok(InvarianceSummary {
        max_abs,
        max_relative,
        all_pass: reports.iter().all(|r| r.passes),
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObservedOrder {
    /// Both errors at rounding level.
    Exact,
    Rate(f64),
}

impl Serialize for ObservedOrder {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ObservedOrder::Exact => s.serialize_str("exact"),
            ObservedOrder::Rate(r) => s.serialize_f64(*r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub cells: [usize; 2],
    /// Max-norm errors over interior nodes.
    pub errors: [f64; 2],
    pub order: ObservedOrder,
}

/// Observed order `log₂(err(h) / err(h/2))` against an exact solution, which
/// also supplies the boundary data.
///
/// Both the discrete solution and the oracle are scaled to their values at the
/// origin before comparing. The Dirichlet problem has a near-null mode shaped
/// like the density itself (its eigenvalue decays like the density ratio
/// between boundary and origin), so rounding errors can add an arbitrary
/// multiple of that mode to the raw solution; the normalization removes it.
pub fn convergence_order(
    cs: &CoefficientSet,
    half_width: f64,
    cells: usize,
    oracle: &Expr,
    options: &DensityOptions,
) -> Result<ConvergenceReport, DensityError> {
    if cells % 2 != 0 {
        return Err(DensityError::OddCells(cells));
    }
    let boundary = Boundary::Expression(oracle.clone());
    let eval = |x: &[f64]| {
        oracle.eval(x).map_err(|source| DensityError::BoundaryEvaluation {
            point: x.to_vec(),
            source,
        })
    };
    let at_origin = eval(&vec![0.0; cs.dim()])?;
    let mut errors = [0.0; 2];
    let mut scale = 0.0f64;
    for (slot, n) in errors.iter_mut().zip([cells, 2 * cells]) {
        let mesh = BoxMesh::new(cs.dim(), half_width, n);
        let (raw, sys, _) = solve_raw(cs, &mesh, &boundary, options)?;
        let factor = at_origin / raw[mesh.origin().expect("even cell count")];
        let mut multi = vec![0; mesh.dim];
        let mut x = vec![0.0; mesh.dim];
        let mut err = 0.0f64;
        for &node in &sys.unknowns {
            mesh.multi(node, &mut multi);
            mesh.point(&multi, &mut x);
            let exact = eval(&x)?;
            scale = scale.max(exact.abs());
            err = err.max((raw[node] * factor - exact).abs());
        }
        *slot = err;
    }
    let rounding = 1e-11 * (1.0 + scale);
    let order = if errors[0] <= rounding && errors[1] <= rounding {
        ObservedOrder::Exact
    } else {
        ObservedOrder::Rate((errors[0] / errors[1]).log2())
    };
    Ok(ConvergenceReport {
        cells: [cells, 2 * cells],
        errors,
        order,
    })
}
