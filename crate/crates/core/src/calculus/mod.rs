//! Coefficient sets, drift decomposition, generators and quadrature.
//!
//! A coefficient set describes the operator
//! `L f = ½ Σ a_ij ∂_ij f + Σ g_i ∂_i f`, whose divergence form is
//! `½ ∇·((A + C^T)∇f) + ⟨H, ∇f⟩` with `g_i = ½ Σ_j ∂_j(a_ij + c_ji) + h_i`.

mod fields;
mod generator;
mod quadrature;
mod residual;
mod root;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{DiffMode, EvalError, Expr, NotDifferentiable};

pub use fields::{log_derivative_beta, decompose_drift, DensityField, GridDensity, VectorField};
pub use generator::{
    GaussianPrimitive, Generator, GeneratorMode, SmoothFunction, TwiceDifferentiable,
};
pub use quadrature::{integrate, integrate_many, KahanSum, QuadratureRule, Scheme};
pub use residual::{
    bump_library, divergence_report, invariance_residual, Bump, DivergenceReport, ResidualForm,
    ResidualReport, RESIDUAL_TOLERANCE,
};
pub use root::{diffusion_root, DiffusionRoot};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalculusError {
    #[error("dimension {dim} is not supported here (need at least {min})")]
    Dimension { dim: usize, min: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    NotDifferentiable(#[from] NotDifferentiable),
    #[error("diffusion matrix is not positive definite at {point:?} (smallest eigenvalue {eigenvalue})")]
    NotElliptic { point: Vec<f64>, eigenvalue: f64 },
    #[error("degenerate diffusion at {point:?}: eigenvalue {eigenvalue} at or below {threshold}")]
    DegenerateDiffusion {
        point: Vec<f64>,
        eigenvalue: f64,
        threshold: f64,
    },
    #[error("density is not strictly positive at {point:?} (value {value})")]
    NonPositiveDensity { point: Vec<f64>, value: f64 },
    #[error("point {point:?} lies outside the density mesh")]
    OutsideMesh { point: Vec<f64> },
    #[error("Simpson quadrature needs an odd node count per axis, got {0}")]
    EvenSimpsonNodes(usize),
    #[error("generator mode {0} needs a density")]
    MissingDensity(&'static str),
}

/// How the drift was supplied.
#[derive(Debug, Clone)]
pub enum Drift {
    /// Divergence-form vector `H`.
    Divergence(Vec<Expr>),
    /// Non-divergence drift `G` directly.
    Direct(Vec<Expr>),
    /// Inverse construction from a prescribed density: `H = (A + C^T)∇ρ/(2ρ) + B̄`,
    /// so that `ρ` is infinitesimally invariant whenever `ρB̄` is divergence free.
    FromDensity { density: Expr, bbar: Vec<Expr> },
}

/// Sampled smallest/largest eigenvalues of `A` over the probe points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EllipticityReport {
    pub probes_used: usize,
    pub probes_skipped: usize,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub argmin: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CoefficientSet {
    dim: usize,
    a: Vec<Vec<Expr>>,
    c: Vec<Vec<Expr>>,
    h: Vec<Expr>,
    g: Vec<Expr>,
    div_a: Vec<Expr>,
    a_constant: Option<Vec<f64>>,
    a_diagonal: bool,
    ellipticity: EllipticityReport,
}

/// Fill a full symmetric matrix from its upper triangle (row `i` holds columns `i..d`).
fn symmetric_from_upper(dim: usize, upper: &[Vec<Expr>]) -> Result<Vec<Vec<Expr>>, CalculusError> {
    if upper.len() != dim {
        return Err(CalculusError::Shape(format!(
            "A needs {dim} upper-triangle rows, got {}",
            upper.len()
        )));
    }
    let mut m = vec![vec![Expr::zero(); dim]; dim];
    for (i, row) in upper.iter().enumerate() {
        if row.len() != dim - i {
            return Err(CalculusError::Shape(format!(
                "row {} of A's upper triangle needs {} entries, got {}",
                i + 1,
                dim - i,
                row.len()
            )));
        }
        for (k, e) in row.iter().enumerate() {
            m[i][i + k] = e.clone();
            m[i + k][i] = e.clone();
        }
    }
    Ok(m)
}

/// Fill an antisymmetric matrix from its strict upper triangle (row `i` holds columns `i+1..d`).
fn antisymmetric_from_upper(
    dim: usize,
    upper: &[Vec<Expr>],
) -> Result<Vec<Vec<Expr>>, CalculusError> {
    let mut m = vec![vec![Expr::zero(); dim]; dim];
    if upper.is_empty() {
        return Ok(m);
    }
    if upper.len() != dim.saturating_sub(1) && upper.len() != dim {
        return Err(CalculusError::Shape(format!(
            "C needs {} strict upper-triangle rows, got {}",
            dim - 1,
            upper.len()
        )));
    }
    for (i, row) in upper.iter().enumerate() {
        if row.len() != dim - i - 1 {
            return Err(CalculusError::Shape(format!(
                "row {} of C's strict upper triangle needs {} entries, got {}",
                i + 1,
                dim - i - 1,
                row.len()
            )));
        }
        for (k, e) in row.iter().enumerate() {
            m[i][i + 1 + k] = e.clone();
            m[i + 1 + k][i] = Expr::neg(e.clone());
        }
    }
    Ok(m)
}

fn check_axes(dim: usize, what: &str, exprs: &[&Expr]) -> Result<(), CalculusError> {
    for e in exprs {
        if let Some(axis) = e.max_axis() {
            if axis >= dim {
                return Err(CalculusError::Shape(format!(
                    "{what} references x{} in dimension {dim}",
                    axis + 1
                )));
            }
        }
    }
    Ok(())
}

/// `1000`-style seeded uniform probe points in `[-half_width, half_width]^dim`.
pub fn seeded_probes(dim: usize, half_width: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..dim)
                .map(|_| rng.random_range(-half_width..=half_width))
                .collect()
        })
        .collect()
}

impl CoefficientSet {
    /// Validate the coefficients and derive `G` (or `H`) symbolically.
    ///
    /// `a_upper` holds the upper triangle of `A` row by row, `c_upper` the strict
    /// upper triangle of `C` (empty for `C = 0`). Ellipticity is checked at every
    /// probe point where `A` evaluates; points where it does not are counted as
    /// skipped.
    pub fn build(
        dim: usize,
        a_upper: &[Vec<Expr>],
        c_upper: &[Vec<Expr>],
        drift: Drift,
        probes: &[Vec<f64>],
    ) -> Result<Self, CalculusError> {
        if dim == 0 {
            return Err(CalculusError::Dimension { dim, min: 1 });
        }
        let a = symmetric_from_upper(dim, a_upper)?;
        let c = antisymmetric_from_upper(dim, c_upper)?;
        check_axes(dim, "A", &a.iter().flatten().collect::<Vec<_>>())?;
        check_axes(dim, "C", &c.iter().flatten().collect::<Vec<_>>())?;
        let mode = DiffMode::Piecewise;
        let div_a = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| a[i][j].diff(j, mode))
                    .collect::<Result<Vec<_>, _>>()
                    .map(Expr::sum)
            })
            .collect::<Result<Vec<_>, _>>()?;
        // ½ Σ_j ∂_j (a_ij + c_ji)
        let half_div = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| Expr::add(a[i][j].clone(), c[j][i].clone()).diff(j, mode))
                    .collect::<Result<Vec<_>, _>>()
                    .map(|terms| Expr::mul(Expr::constant(0.5), Expr::sum(terms)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (h, g) = match drift {
            Drift::Divergence(h) => {
                if h.len() != dim {
                    return Err(CalculusError::Shape(format!("H needs {dim} entries")));
                }
                check_axes(dim, "H", &h.iter().collect::<Vec<_>>())?;
                let g = h
                    .iter()
                    .zip(&half_div)
                    .map(|(hi, di)| Expr::add(di.clone(), hi.clone()))
                    .collect();
                (h, g)
            }
            Drift::Direct(g) => {
                if g.len() != dim {
                    return Err(CalculusError::Shape(format!("G needs {dim} entries")));
                }
                check_axes(dim, "G", &g.iter().collect::<Vec<_>>())?;
                let h = g
                    .iter()
                    .zip(&half_div)
                    .map(|(gi, di)| Expr::sub(gi.clone(), di.clone()))
                    .collect();
                (h, g)
            }
            Drift::FromDensity { density, bbar } => {
                if bbar.len() != dim {
                    return Err(CalculusError::Shape(format!("B̄ needs {dim} entries")));
                }
                check_axes(dim, "density", &[&density])?;
                check_axes(dim, "B̄", &bbar.iter().collect::<Vec<_>>())?;
                let grad = density.gradient(dim, mode)?;
                let h: Vec<Expr> = (0..dim)
                    .map(|i| {
                        let flux = Expr::sum((0..dim).map(|j| {
                            Expr::mul(
                                Expr::add(a[i][j].clone(), c[j][i].clone()),
                                grad[j].clone(),
                            )
                        }));
                        Expr::add(
                            Expr::div(flux, Expr::mul(Expr::constant(2.0), density.clone())),
                            bbar[i].clone(),
                        )
                    })
                    .collect();
                let g = h
                    .iter()
                    .zip(&half_div)
                    .map(|(hi, di)| Expr::add(di.clone(), hi.clone()))
                    .collect();
                (h, g)
            }
        };
        let a_constant = a
            .iter()
            .flatten()
            .map(|e| e.as_const())
            .collect::<Option<Vec<f64>>>();
        let a_diagonal = (0..dim).all(|i| (0..dim).all(|j| i == j || a[i][j].is_zero()));
        let mut cs = CoefficientSet {
            dim,
            a,
            c,
            h,
            g,
            div_a,
            a_constant,
            a_diagonal,
            ellipticity: EllipticityReport {
                probes_used: 0,
                probes_skipped: 0,
                min_eigenvalue: f64::INFINITY,
                max_eigenvalue: f64::NEG_INFINITY,
                argmin: Vec::new(),
            },
        };
        cs.ellipticity = cs.probe_ellipticity(probes)?;
        Ok(cs)
    }

    fn probe_ellipticity(&self, probes: &[Vec<f64>]) -> Result<EllipticityReport, CalculusError> {
        let mut report = self.ellipticity.clone();
        let mut a = vec![0.0; self.dim * self.dim];
        for p in probes {
            if p.len() != self.dim {
                return Err(CalculusError::Shape(format!(
                    "probe point {p:?} has the wrong dimension"
                )));
            }
            if self.eval_a(p, &mut a).is_err() {
                report.probes_skipped += 1;
                continue;
            }
            let (lo, hi) = eigen_range(self.dim, &a);
            if !(lo > 0.0) {
                return Err(CalculusError::NotElliptic {
                    point: p.clone(),
                    eigenvalue: lo,
                });
            }
            report.probes_used += 1;
            if lo < report.min_eigenvalue {
                report.min_eigenvalue = lo;
                report.argmin = p.clone();
            }
            report.max_eigenvalue = report.max_eigenvalue.max(hi);
        }
        Ok(report)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn a(&self) -> &[Vec<Expr>] {
        &self.a
    }

    pub fn c(&self) -> &[Vec<Expr>] {
        &self.c
    }

    pub fn h(&self) -> &[Expr] {
        &self.h
    }

    pub fn g(&self) -> &[Expr] {
        &self.g
    }

    /// `(∇·A)_i = Σ_j ∂_j a_ij`.
    pub fn div_a(&self) -> &[Expr] {
        &self.div_a
    }

    pub fn ellipticity(&self) -> &EllipticityReport {
        &self.ellipticity
    }

    /// Entries of `A` when they are all constants (row-major).
    pub fn constant_a(&self) -> Option<&[f64]> {
        self.a_constant.as_deref()
    }

    pub fn a_is_diagonal(&self) -> bool {
        self.a_diagonal
    }

    /// Evaluate `A(x)` row-major into `out` (length `d²`).
    pub fn eval_a(&self, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        if let Some(c) = &self.a_constant {
            out.copy_from_slice(c);
            return Ok(());
        }
        let d = self.dim;
        for i in 0..d {
            for j in i..d {
                let v = if self.a_diagonal && i != j {
                    0.0
                } else {
                    self.a[i][j].eval(x)?
                };
                out[i * d + j] = v;
                out[j * d + i] = v;
            }
        }
        Ok(())
    }

    pub fn eval_g(&self, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        for (o, e) in out.iter_mut().zip(&self.g) {
            *o = e.eval(x)?;
        }
        Ok(())
    }

    pub fn eval_div_a(&self, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        for (o, e) in out.iter_mut().zip(&self.div_a) {
            *o = e.eval(x)?;
        }
        Ok(())
    }

    /// `½(A + C^T)` entry `(i, j)` as an expression, used by divergence-form fluxes.
    pub fn flux_matrix(&self, i: usize, j: usize) -> Expr {
        Expr::mul(
            Expr::constant(0.5),
            Expr::add(self.a[i][j].clone(), self.c[j][i].clone()),
        )
    }
}

/// Smallest and largest eigenvalue of a symmetric row-major matrix.
pub fn eigen_range(dim: usize, a: &[f64]) -> (f64, f64) {
    if dim == 1 {
        return (a[0], a[0]);
    }
    if dim == 2 {
        let (p, q, r) = (a[0], a[1], a[3]);
        let mean = 0.5 * (p + r);
        let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
        return (mean - rad, mean + rad);
    }
    let m = DMatrix::from_row_slice(dim, dim, a);
    let e = SymmetricEigen::new(m).eigenvalues;
    (e.min(), e.max())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    fn e(s: &str) -> Expr {
        parse_expr(s, 2).unwrap()
    }

    fn identity_upper() -> Vec<Vec<Expr>> {
        vec![vec![e("1"), e("0")], vec![e("1")]]
    }

    fn probes() -> Vec<Vec<f64>> {
        seeded_probes(2, 5.0, 1000, 7)
    }

    #[test]
    fn brownian_motion_has_zero_drift() {
        let cs = CoefficientSet::build(
            2,
            &identity_upper(),
            &[],
            Drift::Divergence(vec![e("0"), e("0")]),
            &probes(),
        )
        .unwrap();
        assert!(cs.g().iter().all(|g| g.is_zero()));
        assert_eq!(cs.ellipticity().min_eigenvalue, 1.0);
        assert_eq!(cs.ellipticity().probes_used, 1000);
    }

    #[test]
    fn variable_diffusion_contributes_half_divergence() {
        let a = vec![vec![e("1 + x1^2"), e("0")], vec![e("1")]];
        let cs =
            CoefficientSet::build(2, &a, &[], Drift::Divergence(vec![e("0"), e("0")]), &probes())
                .unwrap();
        let x = [0.7, -1.3];
        assert!((cs.g()[0].eval(&x).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(cs.g()[1].eval(&x).unwrap(), 0.0);
    }

    #[test]
    fn unit_drift_is_kept() {
        let cs = CoefficientSet::build(
            2,
            &identity_upper(),
            &[],
            Drift::Divergence(vec![e("1"), e("0")]),
            &probes(),
        )
        .unwrap();
        assert_eq!(cs.g()[0].as_const(), Some(1.0));
        assert_eq!(cs.g()[1].as_const(), Some(0.0));
    }

    #[test]
    fn rejects_indefinite_diffusion_with_witness() {
        let a = vec![vec![e("1"), e("0")], vec![e("x1")]];
        let err = CoefficientSet::build(
            2,
            &a,
            &[],
            Drift::Divergence(vec![e("0"), e("0")]),
            &[vec![1.0, 0.0], vec![-1.0, 0.0]],
        )
        .unwrap_err();
        match err {
            CalculusError::NotElliptic { point, eigenvalue } => {
                assert_eq!(point, vec![-1.0, 0.0]);
                assert_eq!(eigenvalue, -1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = vec![vec![e("1")], vec![e("1")]];
        assert!(matches!(
            CoefficientSet::build(2, &bad, &[], Drift::Direct(vec![e("0"), e("0")]), &[]),
            Err(CalculusError::Shape(_))
        ));
        assert!(matches!(
            CoefficientSet::build(
                2,
                &identity_upper(),
                &[],
                Drift::Direct(vec![e("0")]),
                &[]
            ),
            Err(CalculusError::Shape(_))
        ));
    }

    #[test]
    fn antisymmetric_part_enters_the_drift() {
        // C = [[0, x1], [-x1, 0]]: g_2 = ½ ∂_1 c_12 = ½.
        let cs = CoefficientSet::build(
            2,
            &identity_upper(),
            &[vec![e("x1")]],
            Drift::Divergence(vec![e("0"), e("0")]),
            &probes(),
        )
        .unwrap();
        assert_eq!(cs.g()[0].eval(&[0.3, 0.2]).unwrap(), 0.0);
        assert_eq!(cs.g()[1].eval(&[0.3, 0.2]).unwrap(), 0.5);
    }

    #[test]
    fn inverse_construction_recovers_ou() {
        let cs = CoefficientSet::build(
            2,
            &identity_upper(),
            &[],
            Drift::FromDensity {
                density: e("exp(-norm2(x))"),
                bbar: vec![e("0"), e("0")],
            },
            &probes(),
        )
        .unwrap();
        let x = [0.4, -1.1];
        assert!((cs.g()[0].eval(&x).unwrap() + 0.4).abs() < 1e-15);
        assert!((cs.g()[1].eval(&x).unwrap() - 1.1).abs() < 1e-15);
    }
}
