//! Closed-form expression language for coefficients, densities and Lyapunov
//! candidates.
//!
//! Expressions are immutable trees shared through [`Arc`], so cloning is cheap
//! and evaluation is reentrant across threads. The grammar is closed: numeric
//! literals, coordinates `x1..xd`, `+ - * /`, `^` with a rational constant
//! exponent, `exp`, `ln`, `sqrt`, `norm2(x)`, `max`, `min` and the piecewise
//! selector `ifge(a, b, t, e)` (`t` where `a >= b`, else `e`).

mod diff;
mod parse;

use std::fmt;
use std::sync::Arc;

use num_rational::Rational64;
use thiserror::Error;

pub use diff::{Derivatives, DiffMode, NotDifferentiable};
pub use parse::{parse_expr, ParseError, ParseErrorKind};

/// A node of the expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    /// Zero-based coordinate axis.
    Coord(usize),
    /// Squared Euclidean norm of the whole point.
    Norm2,
    Neg(Expr),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    Pow(Expr, Rational64),
    Exp(Expr),
    Ln(Expr),
    Sqrt(Expr),
    Max(Expr, Expr),
    Min(Expr, Expr),
    IfGe {
        lhs: Expr,
        rhs: Expr,
        then: Expr,
        otherwise: Expr,
    },
}

/// Shared handle to an immutable expression tree.
#[derive(Clone, PartialEq)]
pub struct Expr(Arc<Node>);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("ln of non-positive argument {value} in `{node}`")]
    LogDomain { value: f64, node: String },
    #[error("division by zero in `{node}`")]
    DivisionByZero { node: String },
    #[error("sqrt of negative argument {value} in `{node}`")]
    SqrtDomain { value: f64, node: String },
    #[error("power domain error (base {base}) in `{node}`")]
    PowDomain { base: f64, node: String },
    #[error("non-finite value in `{node}`")]
    NonFinite { node: String },
    #[error("coordinate x{axis} requested for a point of dimension {dim}")]
    Dimension { axis: usize, dim: usize },
}

impl Expr {
    pub fn new(node: Node) -> Self {
        Expr(Arc::new(node))
    }

    pub fn node(&self) -> &Node {
        &self.0
    }

    pub fn constant(v: f64) -> Self {
        Expr::new(Node::Const(v))
    }

    pub fn zero() -> Self {
        Expr::constant(0.0)
    }

    pub fn one() -> Self {
        Expr::constant(1.0)
    }

    /// Coordinate with zero-based axis index.
    pub fn coord(axis: usize) -> Self {
        Expr::new(Node::Coord(axis))
    }

    pub fn norm2() -> Self {
        Expr::new(Node::Norm2)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self.node() {
            Node::Const(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    /// Largest zero-based coordinate index referenced, if any.
    pub fn max_axis(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        self.visit(&mut |n| {
            if let Node::Coord(i) = n {
                best = Some(best.map_or(*i, |b: usize| b.max(*i)));
            }
        });
        best
    }

    /// Whether the value can change along `axis`.
    pub fn depends_on(&self, axis: usize) -> bool {
        match self.node() {
            Node::Const(_) => false,
            Node::Coord(i) => *i == axis,
            Node::Norm2 => true,
            Node::Neg(a) | Node::Exp(a) | Node::Ln(a) | Node::Sqrt(a) | Node::Pow(a, _) => {
                a.depends_on(axis)
            }
            Node::Add(a, b)
            | Node::Sub(a, b)
            | Node::Mul(a, b)
            | Node::Div(a, b)
            | Node::Max(a, b)
            | Node::Min(a, b) => a.depends_on(axis) || b.depends_on(axis),
            Node::IfGe {
                lhs,
                rhs,
                then,
                otherwise,
            } => {
                lhs.depends_on(axis)
                    || rhs.depends_on(axis)
                    || then.depends_on(axis)
                    || otherwise.depends_on(axis)
            }
        }
    }

    /// True when no coordinate appears anywhere in the tree.
    pub fn is_constant(&self) -> bool {
        let mut found = false;
        self.visit(&mut |n| {
            if matches!(n, Node::Coord(_) | Node::Norm2) {
                found = true;
            }
        });
        !found
    }

    /// Whether a `max`, `min` or `ifge` node occurs.
    pub fn is_piecewise(&self) -> bool {
        let mut found = false;
        self.visit(&mut |n| {
            if matches!(n, Node::Max(..) | Node::Min(..) | Node::IfGe { .. }) {
                found = true;
            }
        });
        found
    }

    pub fn node_count(&self) -> usize {
        let mut count = 0;
        self.visit(&mut |_| count += 1);
        count
    }

    fn visit(&self, f: &mut impl FnMut(&Node)) {
        f(self.node());
        match self.node() {
            Node::Const(_) | Node::Coord(_) | Node::Norm2 => {}
            Node::Neg(a) | Node::Exp(a) | Node::Ln(a) | Node::Sqrt(a) | Node::Pow(a, _) => {
                a.visit(f)
            }
            Node::Add(a, b)
            | Node::Sub(a, b)
            | Node::Mul(a, b)
            | Node::Div(a, b)
            | Node::Max(a, b)
            | Node::Min(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            Node::IfGe {
                lhs,
                rhs,
                then,
                otherwise,
            } => {
                lhs.visit(f);
                rhs.visit(f);
                then.visit(f);
                otherwise.visit(f);
            }
        }
    }

    /// Evaluate at `point`. Deterministic IEEE double arithmetic; any
    /// non-finite result is reported as an error.
    pub fn eval(&self, point: &[f64]) -> Result<f64, EvalError> {
        let v = self.eval_raw(point)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite {
                node: self.to_string(),
            })
        }
    }

    fn eval_raw(&self, x: &[f64]) -> Result<f64, EvalError> {
        Ok(match self.node() {
            Node::Const(v) => *v,
            Node::Coord(i) => *x.get(*i).ok_or(EvalError::Dimension {
                axis: i + 1,
                dim: x.len(),
            })?,
            Node::Norm2 => x.iter().map(|v| v * v).sum(),
            Node::Neg(a) => -a.eval_raw(x)?,
            Node::Add(a, b) => a.eval_raw(x)? + b.eval_raw(x)?,
            Node::Sub(a, b) => a.eval_raw(x)? - b.eval_raw(x)?,
            Node::Mul(a, b) => a.eval_raw(x)? * b.eval_raw(x)?,
            Node::Div(a, b) => {
                let num = a.eval_raw(x)?;
                let den = b.eval_raw(x)?;
                if den == 0.0 {
                    return Err(EvalError::DivisionByZero {
                        node: self.to_string(),
                    });
                }
                num / den
            }
            Node::Pow(a, r) => pow_rational(a.eval_raw(x)?, *r).ok_or_else(|| {
                EvalError::PowDomain {
                    base: a.eval_raw(x).unwrap_or(f64::NAN),
                    node: self.to_string(),
                }
            })?,
            Node::Exp(a) => a.eval_raw(x)?.exp(),
            Node::Ln(a) => {
                let v = a.eval_raw(x)?;
                if v <= 0.0 || v.is_nan() {
                    return Err(EvalError::LogDomain {
                        value: v,
                        node: self.to_string(),
                    });
                }
                v.ln()
            }
            Node::Sqrt(a) => {
                let v = a.eval_raw(x)?;
                if v < 0.0 || v.is_nan() {
                    return Err(EvalError::SqrtDomain {
                        value: v,
                        node: self.to_string(),
                    });
                }
                v.sqrt()
            }
            Node::Max(a, b) => {
                let (u, v) = (a.eval_raw(x)?, b.eval_raw(x)?);
                if u >= v {
                    u
                } else {
                    v
                }
            }
            Node::Min(a, b) => {
                let (u, v) = (a.eval_raw(x)?, b.eval_raw(x)?);
                if u <= v {
                    u
                } else {
                    v
                }
            }
            Node::IfGe {
                lhs,
                rhs,
                then,
                otherwise,
            } => {
                if lhs.eval_raw(x)? >= rhs.eval_raw(x)? {
                    then.eval_raw(x)?
                } else {
                    otherwise.eval_raw(x)?
                }
            }
        })
    }

    /// Value at `x` and a magnitude `m ≥ |value|` such that the rounding
    /// error of [`Expr::eval`] is at most a small multiple of `ε·m`. Sums add
    /// the magnitudes of their terms, so cancellation does not shrink `m`.
    pub fn eval_with_magnitude(&self, x: &[f64]) -> Result<(f64, f64), EvalError> {
        let v = self.eval(x)?;
        let (_, m) = self.magnitude_raw(x);
        Ok((v, m.max(v.abs())))
    }

    /// Single pass over the tree; only called after `eval` succeeded, so
    /// domain checks are already done.
    fn magnitude_raw(&self, x: &[f64]) -> (f64, f64) {
        let (v, m) = match self.node() {
            Node::Const(c) => (*c, c.abs()),
            Node::Coord(i) => (x[*i], x[*i].abs()),
            Node::Norm2 => {
                let s: f64 = x.iter().map(|v| v * v).sum();
                (s, s)
            }
            Node::Neg(a) => {
                let (v, m) = a.magnitude_raw(x);
                (-v, m)
            }
            Node::Add(a, b) | Node::Sub(a, b) => {
                let ((av, am), (bv, bm)) = (a.magnitude_raw(x), b.magnitude_raw(x));
                let v = if matches!(self.node(), Node::Add(..)) { av + bv } else { av - bv };
                (v, am + bm)
            }
            Node::Mul(a, b) => {
                let ((av, am), (bv, bm)) = (a.magnitude_raw(x), b.magnitude_raw(x));
                (av * bv, am * bm)
            }
            Node::Div(a, b) => {
                let ((av, am), (bv, bm)) = (a.magnitude_raw(x), b.magnitude_raw(x));
                let v = av / bv;
                (v, (am + v.abs() * bm) / bv.abs())
            }
            Node::Pow(a, r) => {
                let (av, am) = a.magnitude_raw(x);
                let v = pow_rational(av, *r).unwrap_or(f64::NAN);
                let e = *r.numer() as f64 / *r.denom() as f64;
                let m = if av == 0.0 { am.powf(e) } else { e.abs() * v.abs() * am / av.abs() };
                (v, m)
            }
            Node::Exp(a) => {
                let (av, am) = a.magnitude_raw(x);
                let v = av.exp();
                (v, v * am.max(1.0))
            }
            Node::Ln(a) => {
                let (av, am) = a.magnitude_raw(x);
                (av.ln(), am / av.abs())
            }
            Node::Sqrt(a) => {
                let (av, am) = a.magnitude_raw(x);
                let v = av.sqrt();
                (v, if v > 0.0 { 0.5 * am / v } else { am.sqrt() })
            }
            Node::Max(a, b) => {
                let (p, q) = (a.magnitude_raw(x), b.magnitude_raw(x));
                if p.0 >= q.0 { p } else { q }
            }
            Node::Min(a, b) => {
                let (p, q) = (a.magnitude_raw(x), b.magnitude_raw(x));
                if p.0 <= q.0 { p } else { q }
            }
            Node::IfGe {
                lhs,
                rhs,
                then,
                otherwise,
            } => {
                if lhs.magnitude_raw(x).0 >= rhs.magnitude_raw(x).0 {
                    then.magnitude_raw(x)
                } else {
                    otherwise.magnitude_raw(x)
                }
            }
        };
        (v, m.max(v.abs()))
    }
}

/// `base^r` for a rational exponent. Odd denominators extend to negative
/// bases; `None` marks a domain error.
fn pow_rational(base: f64, r: Rational64) -> Option<f64> {
    let (num, den) = (*r.numer(), *r.denom());
    if den == 1 {
        if base == 0.0 && num < 0 {
            return None;
        }
        return Some(match i32::try_from(num) {
            Ok(n) => base.powi(n),
            Err(_) => base.powf(num as f64),
        });
    }
    let exponent = num as f64 / den as f64;
    if base > 0.0 {
        Some(base.powf(exponent))
    } else if base == 0.0 {
        (num > 0).then_some(0.0)
    } else if den % 2 == 1 {
        let magnitude = (-base).powf(exponent);
        Some(if num % 2 == 0 { magnitude } else { -magnitude })
    } else {
        None
    }
}

// Smart constructors. They fold constants and drop neutral elements so that
// derivative trees stay small; they never reorder operands.

impl Expr {
    pub fn add(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(u), Some(v)) => Expr::constant(u + v),
            (Some(u), _) if u == 0.0 => b,
            (_, Some(v)) if v == 0.0 => a,
            _ => Expr::new(Node::Add(a, b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(u), Some(v)) => Expr::constant(u - v),
            (_, Some(v)) if v == 0.0 => a,
            (Some(u), _) if u == 0.0 => Expr::neg(b),
            _ => Expr::new(Node::Sub(a, b)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(u), Some(v)) => Expr::constant(u * v),
            (Some(u), _) | (_, Some(u)) if u == 0.0 => Expr::zero(),
            (Some(u), _) if u == 1.0 => b,
            (_, Some(v)) if v == 1.0 => a,
            (Some(u), _) if u == -1.0 => Expr::neg(b),
            (_, Some(v)) if v == -1.0 => Expr::neg(a),
            _ => Expr::new(Node::Mul(a, b)),
        }
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(u), Some(v)) if v != 0.0 => Expr::constant(u / v),
            (Some(u), _) if u == 0.0 => Expr::zero(),
            (_, Some(v)) if v == 1.0 => a,
            _ => Expr::new(Node::Div(a, b)),
        }
    }

    pub fn neg(a: Expr) -> Expr {
        match a.node() {
            Node::Const(v) => Expr::constant(-v),
            Node::Neg(inner) => inner.clone(),
            _ => Expr::new(Node::Neg(a)),
        }
    }

    pub fn pow(a: Expr, r: Rational64) -> Expr {
        if r == Rational64::from_integer(0) {
            return Expr::one();
        }
        if r == Rational64::from_integer(1) {
            return a;
        }
        if let Some(v) = a.as_const() {
            if let Some(p) = pow_rational(v, r) {
                return Expr::constant(p);
            }
        }
        Expr::new(Node::Pow(a, r))
    }

    pub fn powi(a: Expr, n: i64) -> Expr {
        Expr::pow(a, Rational64::from_integer(n))
    }

    pub fn exp(a: Expr) -> Expr {
        match a.as_const() {
            Some(v) => Expr::constant(v.exp()),
            None => Expr::new(Node::Exp(a)),
        }
    }

    pub fn ln(a: Expr) -> Expr {
        match a.as_const() {
            Some(v) if v > 0.0 => Expr::constant(v.ln()),
            _ => Expr::new(Node::Ln(a)),
        }
    }

    pub fn sqrt(a: Expr) -> Expr {
        match a.as_const() {
            Some(v) if v >= 0.0 => Expr::constant(v.sqrt()),
            _ => Expr::new(Node::Sqrt(a)),
        }
    }

    pub fn max(a: Expr, b: Expr) -> Expr {
        Expr::new(Node::Max(a, b))
    }

    pub fn min(a: Expr, b: Expr) -> Expr {
        Expr::new(Node::Min(a, b))
    }

    pub fn if_ge(lhs: Expr, rhs: Expr, then: Expr, otherwise: Expr) -> Expr {
        if then == otherwise {
            return then;
        }
        Expr::new(Node::IfGe {
            lhs,
            rhs,
            then,
            otherwise,
        })
    }

    /// Sum of a list, left-associated. Empty sums are zero.
    pub fn sum<I: IntoIterator<Item = Expr>>(terms: I) -> Expr {
        terms.into_iter().fold(Expr::zero(), Expr::add)
    }
}

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::add(self, rhs)
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::sub(self, rhs)
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::mul(self, rhs)
    }
}

impl std::ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::div(self, rhs)
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}

// Canonical printer. Parenthesization follows operator precedence so that
// parsing the output reproduces the same tree.

const PREC_SUM: u8 = 1;
const PREC_PRODUCT: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

fn precedence(n: &Node) -> u8 {
    match n {
        Node::Add(..) | Node::Sub(..) => PREC_SUM,
        Node::Mul(..) | Node::Div(..) => PREC_PRODUCT,
        Node::Neg(_) => PREC_NEG,
        Node::Pow(..) => PREC_POW,
        Node::Const(v) if v.is_sign_negative() => PREC_NEG,
        _ => PREC_ATOM,
    }
}

pub(crate) fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}")
    }
}

fn format_exponent(r: &Rational64) -> String {
    if *r.denom() == 1 && *r.numer() >= 0 {
        r.numer().to_string()
    } else {
        format!("({r})")
    }
}

impl Expr {
    fn write_child(&self, f: &mut fmt::Formatter<'_>, parens: bool) -> fmt::Result {
        if parens {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }

    fn write_binary(
        f: &mut fmt::Formatter<'_>,
        a: &Expr,
        b: &Expr,
        op: &str,
        prec: u8,
    ) -> fmt::Result {
        a.write_child(f, precedence(a.node()) < prec || is_negative_const(a))?;
        write!(f, " {op} ")?;
        b.write_child(f, precedence(b.node()) <= prec || is_negative_const(b))
    }
}

fn is_negative_const(e: &Expr) -> bool {
    matches!(e.node(), Node::Const(v) if v.is_sign_negative())
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Node::Const(v) => write!(f, "{}", format_number(*v)),
            Node::Coord(i) => write!(f, "x{}", i + 1),
            Node::Norm2 => write!(f, "norm2(x)"),
            Node::Neg(a) => {
                write!(f, "-")?;
                let parens = precedence(a.node()) < PREC_NEG || matches!(a.node(), Node::Const(_));
                a.write_child(f, parens)
            }
            Node::Add(a, b) => Expr::write_binary(f, a, b, "+", PREC_SUM),
            Node::Sub(a, b) => Expr::write_binary(f, a, b, "-", PREC_SUM),
            Node::Mul(a, b) => Expr::write_binary(f, a, b, "*", PREC_PRODUCT),
            Node::Div(a, b) => Expr::write_binary(f, a, b, "/", PREC_PRODUCT),
            Node::Pow(a, r) => {
                a.write_child(f, precedence(a.node()) <= PREC_POW)?;
                write!(f, "^{}", format_exponent(r))
            }
            Node::Exp(a) => write!(f, "exp({a})"),
            Node::Ln(a) => write!(f, "ln({a})"),
            Node::Sqrt(a) => write!(f, "sqrt({a})"),
            Node::Max(a, b) => write!(f, "max({a}, {b})"),
            Node::Min(a, b) => write!(f, "min({a}, {b})"),
            Node::IfGe {
                lhs,
                rhs,
                then,
                otherwise,
            } => write!(f, "ifge({lhs}, {rhs}, {then}, {otherwise})"),
        }
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({self})")
    }
}

impl serde::Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}
