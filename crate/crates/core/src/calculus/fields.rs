use std::fmt;
use std::sync::Arc;

use super::{CalculusError, CoefficientSet};
use crate::expr::{DiffMode, Expr};
use crate::mesh::BoxMesh;

/// Density sampled on a mesh, with finite-difference gradients precomputed at
/// the nodes. Values between nodes are multilinear interpolants.
#[derive(Debug, Clone)]
pub struct GridDensity {
    mesh: BoxMesh,
    values: Vec<f64>,
    gradient: Vec<Vec<f64>>,
}

impl GridDensity {
    pub fn new(mesh: BoxMesh, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), mesh.node_count());
        let gradient = mesh.gradient(&values);
        GridDensity {
            mesh,
            values,
            gradient,
        }
    }

    pub fn mesh(&self) -> &BoxMesh {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, CalculusError> {
        self.mesh
            .interpolate(&self.values, x)
            .ok_or_else(|| CalculusError::OutsideMesh { point: x.to_vec() })
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) -> Result<(), CalculusError> {
        for (o, g) in out.iter_mut().zip(&self.gradient) {
            *o = self
                .mesh
                .interpolate(g, x)
                .ok_or_else(|| CalculusError::OutsideMesh { point: x.to_vec() })?;
        }
        Ok(())
    }
}

/// A strictly positive density `ρ`, either closed-form or sampled on a mesh.
#[derive(Clone)]
pub enum DensityField {
    Analytic { rho: Expr, grad: Vec<Expr> },
    Grid(Arc<GridDensity>),
}

impl fmt::Debug for DensityField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensityField::Analytic { rho, .. } => write!(f, "Analytic({rho})"),
            DensityField::Grid(g) => write!(
                f,
                "Grid(R={}, n={}, d={})",
                g.mesh.half_width, g.mesh.cells, g.mesh.dim
            ),
        }
    }
}

impl DensityField {
    pub fn analytic(rho: Expr, dim: usize) -> Result<Self, CalculusError> {
        let grad = rho.gradient(dim, DiffMode::Piecewise)?;
        Ok(DensityField::Analytic { rho, grad })
    }

    pub fn grid(g: GridDensity) -> Self {
        DensityField::Grid(Arc::new(g))
    }

    pub fn dim(&self) -> usize {
        match self {
            DensityField::Analytic { grad, .. } => grad.len(),
            DensityField::Grid(g) => g.mesh.dim,
        }
    }

    pub fn expr(&self) -> Option<&Expr> {
        match self {
            DensityField::Analytic { rho, .. } => Some(rho),
            DensityField::Grid(_) => None,
        }
    }

    /// Value at `x` as an integration weight: an underflowed `0` is accepted,
    /// negative values are not.
    pub fn weight(&self, x: &[f64]) -> Result<f64, CalculusError> {
        match self.value(x) {
            Err(CalculusError::NonPositiveDensity { value, .. }) if value == 0.0 => Ok(0.0),
            other => other,
        }
    }

    /// Value at `x`, which must be strictly positive.
    pub fn value(&self, x: &[f64]) -> Result<f64, CalculusError> {
        let v = match self {
            DensityField::Analytic { rho, .. } => rho.eval(x)?,
            DensityField::Grid(g) => g.value(x)?,
        };
        if v > 0.0 {
            Ok(v)
        } else {
            Err(CalculusError::NonPositiveDensity {
                point: x.to_vec(),
                value: v,
            })
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) -> Result<(), CalculusError> {
        match self {
            DensityField::Analytic { grad, .. } => {
                for (o, e) in out.iter_mut().zip(grad) {
                    *o = e.eval(x)?;
                }
                Ok(())
            }
            DensityField::Grid(g) => g.gradient(x, out),
        }
    }

    /// Smallest value over `probes` and where it occurs; evaluation failures
    /// are skipped.
    pub fn positivity_probe(&self, probes: &[Vec<f64>]) -> Option<(f64, Vec<f64>)> {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for p in probes {
            let v = match self {
                DensityField::Analytic { rho, .. } => rho.eval(p).ok(),
                DensityField::Grid(g) => g.value(p).ok(),
            };
            if let Some(v) = v {
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, p.clone()));
                }
            }
        }
        best
    }
}

type FieldFn = dyn Fn(&[f64], &mut [f64]) -> Result<(), CalculusError> + Send + Sync;

/// A vector field, symbolic when every ingredient is closed-form.
#[derive(Clone)]
pub enum VectorField {
    Symbolic(Vec<Expr>),
    Numeric { dim: usize, eval: Arc<FieldFn> },
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VectorField::Symbolic(v) => f.debug_list().entries(v.iter().map(|e| e.to_string())).finish(),
            VectorField::Numeric { dim, .. } => write!(f, "Numeric(d={dim})"),
        }
    }
}

impl VectorField {
    pub fn dim(&self) -> usize {
        match self {
            VectorField::Symbolic(v) => v.len(),
            VectorField::Numeric { dim, .. } => *dim,
        }
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<(), CalculusError> {
        match self {
            VectorField::Symbolic(v) => {
                for (o, e) in out.iter_mut().zip(v) {
                    *o = e.eval(x)?;
                }
                Ok(())
            }
            VectorField::Numeric { eval, .. } => eval(x, out),
        }
    }

    pub fn as_symbolic(&self) -> Option<&[Expr]> {
        match self {
            VectorField::Symbolic(v) => Some(v),
            VectorField::Numeric { .. } => None,
        }
    }

    /// `λ·self + μ·other`, symbolic when both operands are.
    pub fn combine(&self, lambda: f64, other: &VectorField, mu: f64) -> VectorField {
        if let (Some(a), Some(b)) = (self.as_symbolic(), other.as_symbolic()) {
            return VectorField::Symbolic(
                a.iter()
                    .zip(b)
                    .map(|(u, v)| {
                        Expr::add(
                            Expr::mul(Expr::constant(lambda), u.clone()),
                            Expr::mul(Expr::constant(mu), v.clone()),
                        )
                    })
                    .collect(),
            );
        }
        let (a, b) = (self.clone(), other.clone());
        let dim = self.dim();
        VectorField::Numeric {
            dim,
            eval: Arc::new(move |x, out| {
                let mut tmp = vec![0.0; dim];
                a.eval(x, out)?;
                b.eval(x, &mut tmp)?;
                for (o, t) in out.iter_mut().zip(&tmp) {
                    *o = lambda * *o + mu * t;
                }
                Ok(())
            }),
        }
    }
}

/// Logarithmic derivative `β_i = ½ Σ_j (∂_j a_ij + a_ij ∂_j ρ / ρ)`.
pub fn log_derivative_beta(cs: &CoefficientSet, rho: &DensityField) -> VectorField {
    let d = cs.dim();
    match rho {
        DensityField::Analytic { rho, grad } => VectorField::Symbolic(
            (0..d)
                .map(|i| {
                    let weighted = Expr::sum((0..d).map(|j| Expr::mul(cs.a()[i][j].clone(), grad[j].clone())));
                    Expr::mul(
                        Expr::constant(0.5),
                        Expr::add(cs.div_a()[i].clone(), Expr::div(weighted, rho.clone())),
                    )
                })
                .collect(),
        ),
        DensityField::Grid(_) => {
            let cs = cs.clone();
            let rho = rho.clone();
            VectorField::Numeric {
                dim: d,
                eval: Arc::new(move |x, out| {
                    let r = rho.value(x)?;
                    let mut grad = vec![0.0; d];
                    rho.gradient(x, &mut grad)?;
                    let mut a = vec![0.0; d * d];
                    cs.eval_a(x, &mut a)?;
                    cs.eval_div_a(x, out)?;
                    for i in 0..d {
                        let w: f64 = (0..d).map(|j| a[i * d + j] * grad[j]).sum();
                        out[i] = 0.5 * (out[i] + w / r);
                    }
                    Ok(())
                }),
            }
        }
    }
}

/// Divergence-free remainder `B = G − β`.
pub fn decompose_drift(cs: &CoefficientSet, rho: &DensityField) -> VectorField {
    let g = VectorField::Symbolic(cs.g().to_vec());
    g.combine(1.0, &log_derivative_beta(cs, rho), -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{seeded_probes, Drift};
    use crate::expr::parse_expr;

    fn cs_with_drift(g: [&str; 2]) -> CoefficientSet {
        let e = |s: &str| parse_expr(s, 2).unwrap();
        CoefficientSet::build(
            2,
            &[vec![e("1"), e("0")], vec![e("1")]],
            &[],
            Drift::Direct(vec![e(g[0]), e(g[1])]),
            &[],
        )
        .unwrap()
    }

    fn max_abs(field: &VectorField, points: &[Vec<f64>], expected: impl Fn(&[f64]) -> [f64; 2]) -> f64 {
        let mut out = [0.0; 2];
        points
            .iter()
            .map(|p| {
                field.eval(p, &mut out).unwrap();
                let e = expected(p);
                (out[0] - e[0]).abs().max((out[1] - e[1]).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn beta_of_exponential_tilt_is_unit_vector() {
        let cs = cs_with_drift(["1", "0"]);
        let rho = DensityField::analytic(parse_expr("exp(2*x1)", 2).unwrap(), 2).unwrap();
        let probes = seeded_probes(2, 5.0, 200, 1);
        let beta = log_derivative_beta(&cs, &rho);
        assert_eq!(max_abs(&beta, &probes, |_| [1.0, 0.0]), 0.0);
        let b = decompose_drift(&cs, &rho);
        assert_eq!(max_abs(&b, &probes, |_| [0.0, 0.0]), 0.0);
    }

    #[test]
    fn beta_of_gaussian_is_minus_x() {
        let cs = cs_with_drift(["-x1", "-x2"]);
        let rho = DensityField::analytic(parse_expr("exp(-norm2(x))", 2).unwrap(), 2).unwrap();
        let probes = seeded_probes(2, 3.0, 200, 2);
        let beta = log_derivative_beta(&cs, &rho);
        assert!(max_abs(&beta, &probes, |p| [-p[0], -p[1]]) < 1e-14);
        let b = decompose_drift(&cs, &rho);
        assert!(max_abs(&b, &probes, |_| [0.0, 0.0]) < 1e-14);
    }

    #[test]
    fn grid_beta_approximates_analytic_beta() {
        let cs = cs_with_drift(["0", "0"]);
        let mesh = BoxMesh::new(2, 2.0, 64);
        let mut values = vec![0.0; mesh.node_count()];
        let mut multi = [0; 2];
        let mut x = [0.0; 2];
        for (idx, v) in values.iter_mut().enumerate() {
            mesh.multi(idx, &mut multi);
            mesh.point(&multi, &mut x);
            *v = (-(x[0] * x[0] + x[1] * x[1])).exp();
        }
        let rho = DensityField::grid(GridDensity::new(mesh, values));
        let beta = log_derivative_beta(&cs, &rho);
        let nodes: Vec<Vec<f64>> = (-4..=4).map(|k| vec![k as f64 * 0.25, 0.5]).collect();
        assert!(max_abs(&beta, &nodes, |p| [-p[0], -p[1]]) < 1e-4);
    }
}
