use num_rational::Rational64;
use thiserror::Error;

use super::{Expr, Node};

/// How non-smooth nodes are treated during differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffMode {
    /// Reject `max`/`min`/`ifge` on any path that depends on the axis.
    Smooth,
    /// Differentiate branchwise; at ties the first argument's branch is used.
    Piecewise,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("`{node}` is not differentiable along x{axis}; use piecewise differentiation")]
pub struct NotDifferentiable {
    pub node: String,
    pub axis: usize,
}

impl Expr {
    /// Symbolic partial derivative along the zero-based `axis`.
    pub fn diff(&self, axis: usize, mode: DiffMode) -> Result<Expr, NotDifferentiable> {
        if !self.depends_on(axis) {
            return Ok(Expr::zero());
        }
        let d = |e: &Expr| e.diff(axis, mode);
        Ok(match self.node() {
            Node::Const(_) => Expr::zero(),
            Node::Coord(i) => Expr::constant(if *i == axis { 1.0 } else { 0.0 }),
            Node::Norm2 => Expr::mul(Expr::constant(2.0), Expr::coord(axis)),
            Node::Neg(a) => Expr::neg(d(a)?),
            Node::Add(a, b) => Expr::add(d(a)?, d(b)?),
            Node::Sub(a, b) => Expr::sub(d(a)?, d(b)?),
            Node::Mul(a, b) => Expr::add(
                Expr::mul(d(a)?, b.clone()),
                Expr::mul(a.clone(), d(b)?),
            ),
            Node::Div(a, b) => {
                let da = d(a)?;
                let db = d(b)?;
                if db.is_zero() {
                    Expr::div(da, b.clone())
                } else {
                    Expr::div(
                        Expr::sub(Expr::mul(da, b.clone()), Expr::mul(a.clone(), db)),
                        Expr::powi(b.clone(), 2),
                    )
                }
            }
            Node::Pow(a, r) => {
                let lowered = Expr::pow(a.clone(), r - Rational64::from_integer(1));
                let coeff = *r.numer() as f64 / *r.denom() as f64;
                Expr::mul(Expr::mul(Expr::constant(coeff), lowered), d(a)?)
            }
            Node::Exp(a) => Expr::mul(self.clone(), d(a)?),
            Node::Ln(a) => Expr::div(d(a)?, a.clone()),
            Node::Sqrt(a) => Expr::div(d(a)?, Expr::mul(Expr::constant(2.0), self.clone())),
            Node::Max(..) | Node::Min(..) | Node::IfGe { .. } if mode == DiffMode::Smooth => {
                return Err(NotDifferentiable {
                    node: self.to_string(),
                    axis: axis + 1,
                });
            }
            Node::Max(a, b) => Expr::if_ge(a.clone(), b.clone(), d(a)?, d(b)?),
            Node::Min(a, b) => Expr::if_ge(b.clone(), a.clone(), d(a)?, d(b)?),
            Node::IfGe {
                lhs,
                rhs,
                then,
                otherwise,
            } => Expr::if_ge(lhs.clone(), rhs.clone(), d(then)?, d(otherwise)?),
        })
    }

    pub fn gradient(&self, dim: usize, mode: DiffMode) -> Result<Vec<Expr>, NotDifferentiable> {
        (0..dim).map(|k| self.diff(k, mode)).collect()
    }
}

/// Value, gradient and Hessian of a scalar expression, differentiated once.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub value: Expr,
    pub gradient: Vec<Expr>,
    /// Symmetric; `hessian[i][j] == hessian[j][i]`.
    pub hessian: Vec<Vec<Expr>>,
}

impl Derivatives {
    pub fn new(value: &Expr, dim: usize, mode: DiffMode) -> Result<Self, NotDifferentiable> {
        let gradient = value.gradient(dim, mode)?;
        let mut hessian = vec![vec![Expr::zero(); dim]; dim];
        for i in 0..dim {
            for j in i..dim {
                let h = gradient[i].diff(j, mode)?;
                hessian[i][j] = h.clone();
                hessian[j][i] = h;
            }
        }
        Ok(Derivatives {
            value: value.clone(),
            gradient,
            hessian,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    #[test]
    fn derivative_of_gaussian() {
        let e = parse_expr("exp(-norm2(x))", 2).unwrap();
        let dx = e.diff(0, DiffMode::Smooth).unwrap();
        let x = [0.3, -0.7];
        let expected = -2.0 * 0.3 * (-(0.09 + 0.49_f64)).exp();
        assert!((dx.eval(&x).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn smooth_mode_rejects_kinks() {
        let e = parse_expr("max(x1, 0) + x2", 2).unwrap();
        assert!(e.diff(0, DiffMode::Smooth).is_err());
        // Independent of x2 through the kink, so x2 is fine.
        assert_eq!(e.diff(1, DiffMode::Smooth).unwrap().eval(&[1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn piecewise_ties_take_first_branch() {
        let e = parse_expr("max(x1, 2*x1)", 1).unwrap();
        let d = e.diff(0, DiffMode::Piecewise).unwrap();
        assert_eq!(d.eval(&[0.0]).unwrap(), 1.0);
        assert_eq!(d.eval(&[1.0]).unwrap(), 2.0);
        assert_eq!(d.eval(&[-1.0]).unwrap(), 1.0);
        let e = parse_expr("min(x1, 2*x1)", 1).unwrap();
        let d = e.diff(0, DiffMode::Piecewise).unwrap();
        assert_eq!(d.eval(&[0.0]).unwrap(), 1.0);
        assert_eq!(d.eval(&[1.0]).unwrap(), 1.0);
        assert_eq!(d.eval(&[-1.0]).unwrap(), 2.0);
    }

    #[test]
    fn hessian_is_symmetric() {
        let e = parse_expr("x1^3 * x2 + exp(x1*x2)", 2).unwrap();
        let d = Derivatives::new(&e, 2, DiffMode::Smooth).unwrap();
        let x = [0.4, 1.1];
        let h01 = d.hessian[0][1].eval(&x).unwrap();
        let expected = 3.0 * 0.16 + (0.44_f64).exp() * (1.0 + 0.44);
        assert!((h01 - expected).abs() < 1e-13);
        assert_eq!(d.hessian[1][0], d.hessian[0][1]);
    }

    #[test]
    fn psi_second_order_identity() {
        // Cubic branch: (Psi'' + Psi') y^2 = y^2 (-3y^2 + 6y + 12).
        let psi = parse_expr("max(x1^2*(6 - x1), 54 - 81/x1)", 1).unwrap();
        let d1 = psi.diff(0, DiffMode::Piecewise).unwrap();
        let d2 = d1.diff(0, DiffMode::Piecewise).unwrap();
        for y in [0.5, 1.0, 2.0, 2.9] {
            let lhs = (d2.eval(&[y]).unwrap() + d1.eval(&[y]).unwrap()) * y * y;
            let rhs = y * y * (-3.0 * y * y + 6.0 * y + 12.0);
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()), "y = {y}");
        }
        for y in [3.5, 10.0, 40.0] {
            let lhs = (d2.eval(&[y]).unwrap() + d1.eval(&[y]).unwrap()) * y * y;
            let rhs = 81.0 - 162.0 / y;
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()), "y = {y}");
        }
    }
}
