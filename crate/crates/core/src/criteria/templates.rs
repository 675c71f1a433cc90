//! Pointwise inequality templates. Each returns `lhs`, `rhs` and the scale of
//! the terms so that rounding can be told apart from a genuine violation.

use std::sync::Arc;

use crate::calculus::{
    eigen_range, CalculusError, CoefficientSet, DiffusionRoot, Generator, TwiceDifferentiable,
    VectorField,
};
use crate::expr::Expr;

use super::grid::PointMargin;

/// Right-hand side of an operator template.
#[derive(Debug, Clone)]
pub enum OperatorRhs {
    /// `k·u(x)`.
    Multiple(f64),
    Expr(Expr),
}

/// Direction of an operator template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `(Op u)(x) ≤ rhs(x)`.
    AtMost,
    /// `(Op u)(x) ≥ rhs(x)`.
    AtLeast,
}

/// Left-hand sides of the radial templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadialLhs {
    /// `−⟨Ax,x⟩/‖x‖² + ½ tr A + ⟨b,x⟩`.
    Growth,
    /// `−⟨Ax,x⟩/(‖x‖²+1) + ½ tr A + ⟨b,x⟩`.
    ShiftedGrowth,
    /// `(λ_max(A) − λ_min(A))/2 + ⟨b,x⟩`.
    Eigengap,
    /// `½ tr A + ⟨b,x⟩`.
    HalfTrace,
    /// `⟨Ax,x⟩/‖x‖² + |⟨b,x⟩|`.
    VolumeRatio,
    /// `⟨Ax,x⟩ + |⟨b,x⟩|`.
    VolumeQuadratic,
}

/// Right-hand sides of the radial templates, each scaled by a constant `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RadialRhs {
    /// `k‖x‖²(ln‖x‖ + 1)`.
    LogQuadratic(f64),
    /// `k(‖x‖²+1)(ln(‖x‖²+1) + 1)`.
    ShiftedLogQuadratic(f64),
    /// `k‖x‖² ln(‖x‖ + 1)`.
    AnnulusLog(f64),
    /// `k‖x‖²`.
    Quadratic(f64),
    /// `−k‖x‖²`.
    NegQuadratic(f64),
    /// `−k`.
    NegConstant(f64),
    Zero,
}

impl RadialRhs {
    fn eval(&self, n2: f64) -> f64 {
        match *self {
            RadialRhs::LogQuadratic(k) => k * n2 * (0.5 * n2.ln() + 1.0),
            RadialRhs::ShiftedLogQuadratic(k) => k * (n2 + 1.0) * ((n2 + 1.0).ln() + 1.0),
            RadialRhs::AnnulusLog(k) => k * n2 * (n2.sqrt() + 1.0).ln(),
            RadialRhs::Quadratic(k) => k * n2,
            RadialRhs::NegQuadratic(k) => -k * n2,
            RadialRhs::NegConstant(k) => -k,
            RadialRhs::Zero => 0.0,
        }
    }
}

/// Which bound the linear-growth template checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthBound {
    /// `max|σ_ij| ≤ |h₁| + M(√‖x‖+1)` and `max|g_i| ≤ |h₂| + M(‖x‖+1)`.
    Separate,
    /// `max|σ_ij| + max|g_i| ≤ |h₁| + M(‖x‖+1)`.
    Joint,
}

#[derive(Clone)]
pub enum Template {
    Operator {
        generator: Generator,
        candidate: Arc<dyn TwiceDifferentiable>,
        rhs: OperatorRhs,
        side: Side,
    },
    Radial {
        cs: CoefficientSet,
        /// The vector field paired with `x` on the left.
        field: VectorField,
        lhs: RadialLhs,
        rhs: RadialRhs,
    },
    LinearGrowth {
        cs: CoefficientSet,
        root: DiffusionRoot,
        h1: Option<Expr>,
        h2: Option<Expr>,
        m: f64,
        bound: GrowthBound,
    },
}

impl Template {
    pub fn at(&self, x: &[f64]) -> Result<PointMargin, CalculusError> {
        match self {
            Template::Operator {
                generator,
                candidate,
                rhs,
                side,
            } => {
                let (u, op, op_scale) = operator_terms(generator, candidate.as_ref(), x)?;
                let r = match rhs {
                    OperatorRhs::Multiple(k) => k * u,
                    OperatorRhs::Expr(e) => e.eval(x)?,
                };
                let scale = op_scale + r.abs();
                Ok(match side {
                    Side::AtMost => PointMargin::new(op, r, scale),
                    Side::AtLeast => PointMargin::new(r, op, scale),
                })
            }
            Template::Radial { cs, field, lhs, rhs } => radial_at(cs, field, *lhs, *rhs, x),
            Template::LinearGrowth {
                cs,
                root,
                h1,
                h2,
                m,
                bound,
            } => {
                let d = cs.dim();
                let mut a = vec![0.0; d * d];
                let mut sigma = vec![0.0; d * d];
                root.eval(cs, x, &mut a, &mut sigma)?;
                let mut g = vec![0.0; d];
                cs.eval_g(x, &mut g)?;
                let smax = sigma.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let h1 = h1.as_ref().map_or(Ok(0.0), |e| e.eval(x))?.abs();
                let h2 = h2.as_ref().map_or(Ok(0.0), |e| e.eval(x))?.abs();
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                Ok(match bound {
                    GrowthBound::Separate => {
                        let first = PointMargin::new(smax, h1 + m * (norm.sqrt() + 1.0), 0.0);
                        let second = PointMargin::new(gmax, h2 + m * (norm + 1.0), 0.0);
                        // the tighter of the two bounds decides
                        let pick = if first.margin <= second.margin { first } else { second };
                        PointMargin::new(pick.lhs, pick.rhs, pick.lhs.abs() + pick.rhs.abs())
                    }
                    GrowthBound::Joint => {
                        let rhs = h1 + m * (norm + 1.0);
                        PointMargin::new(smax + gmax, rhs, smax + gmax + rhs.abs())
                    }
                })
            }
        }
    }
}

/// `(u(x), (Op u)(x), scale)` for the generator's drift `b`, where the scale is
/// `½Σ|a_ij| m_ij + Σ|b_i| m_i` with `m` the rounding magnitudes of the
/// derivatives of `u`.
pub fn operator_terms(
    generator: &Generator,
    f: &dyn TwiceDifferentiable,
    x: &[f64],
) -> Result<(f64, f64, f64), CalculusError> {
    let cs = generator.coefficients();
    let d = cs.dim();
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    let mut grad_mag = vec![0.0; d];
    let mut hess_mag = vec![0.0; d * d];
    let u = f.jet_with_magnitude(x, &mut grad, &mut hess, &mut grad_mag, &mut hess_mag)?;
    cs.eval_a(x, &mut a)?;
    generator.drift().eval(x, &mut b)?;
    let mut second = 0.0;
    let mut first = 0.0;
    let mut scale = 0.0;
    for i in 0..d {
        for j in 0..d {
            second += a[i * d + j] * hess[i * d + j];
            scale += 0.5 * (a[i * d + j] * hess_mag[i * d + j]).abs();
        }
        first += b[i] * grad[i];
        scale += (b[i] * grad_mag[i]).abs();
    }
    Ok((u, 0.5 * second + first, scale))
}

fn radial_at(
    cs: &CoefficientSet,
    field: &VectorField,
    lhs: RadialLhs,
    rhs: RadialRhs,
    x: &[f64],
) -> Result<PointMargin, CalculusError> {
    let d = cs.dim();
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    cs.eval_a(x, &mut a)?;
    field.eval(x, &mut b)?;
    let n2: f64 = x.iter().map(|v| v * v).sum();
    let axx: f64 = (0..d)
        .map(|i| (0..d).map(|j| a[i * d + j] * x[i] * x[j]).sum::<f64>())
        .sum();
    let trace: f64 = (0..d).map(|i| a[i * d + i]).sum();
    let bx: f64 = b.iter().zip(x).map(|(p, q)| p * q).sum();
    let (value, scale) = match lhs {
        RadialLhs::Growth => {
            let t = axx / n2;
            (-t + 0.5 * trace + bx, t.abs() + 0.5 * trace.abs() + bx.abs())
        }
        RadialLhs::ShiftedGrowth => {
            let t = axx / (n2 + 1.0);
            (-t + 0.5 * trace + bx, t.abs() + 0.5 * trace.abs() + bx.abs())
        }
        RadialLhs::Eigengap => {
            let (lo, hi) = eigen_range(d, &a);
            let gap = 0.5 * (hi - lo).abs();
            (gap + bx, 0.5 * (hi.abs() + lo.abs()) + bx.abs())
        }
        RadialLhs::HalfTrace => (0.5 * trace + bx, 0.5 * trace.abs() + bx.abs()),
        RadialLhs::VolumeRatio => {
            let t = axx / n2;
            (t + bx.abs(), t.abs() + bx.abs())
        }
        RadialLhs::VolumeQuadratic => (axx + bx.abs(), axx.abs() + bx.abs()),
    };
    let r = rhs.eval(n2);
    Ok(PointMargin::new(value, r, scale + r.abs()))
}
