use num_rational::Rational64;
use num_traits::{CheckedAdd, CheckedDiv, CheckedMul, CheckedSub};
use thiserror::Error;

use super::{Expr, Node};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseErrorKind {
    #[error("unexpected character `{0}`")]
    UnexpectedChar(char),
    #[error("expected {expected}, found {found}")]
    Unexpected { expected: String, found: String },
    #[error("unexpected end of input, expected {0}")]
    UnexpectedEnd(String),
    #[error("coordinate x{index} is out of range for dimension {dim}")]
    CoordinateOutOfRange { index: usize, dim: usize },
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),
    #[error("`{name}` takes {expected} argument(s), got {found}")]
    Arity {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("exponent must be a constant rational number")]
    NonConstantExponent,
    #[error("malformed number `{0}`")]
    BadNumber(String),
}

/// A syntax error with the byte offset where it was detected.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind} at byte {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => out.push((Tok::Plus, start)),
            b'-' => out.push((Tok::Minus, start)),
            b'*' => out.push((Tok::Star, start)),
            b'/' => out.push((Tok::Slash, start)),
            b'^' => out.push((Tok::Caret, start)),
            b'(' => out.push((Tok::LParen, start)),
            b')' => out.push((Tok::RParen, start)),
            b',' => out.push((Tok::Comma, start)),
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| ParseError {
                    offset: start,
                    kind: ParseErrorKind::BadNumber(text.to_string()),
                })?;
                out.push((Tok::Num(v), start));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Tok::Ident(src[start..i].to_string()), start));
                continue;
            }
            _ => {
                let ch = src[start..].chars().next().unwrap_or('?');
                return Err(ParseError {
                    offset: start,
                    kind: ParseErrorKind::UnexpectedChar(ch),
                });
            }
        }
        i += 1;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
    dim: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn peek_at(&self, k: usize) -> Option<&Tok> {
        self.toks.get(self.pos + k).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(_, o)| *o)
    }

    fn error(&self, expected: &str) -> ParseError {
        match self.peek() {
            Some(t) => ParseError {
                offset: self.offset(),
                kind: ParseErrorKind::Unexpected {
                    expected: expected.to_string(),
                    found: t.describe(),
                },
            },
            None => ParseError {
                offset: self.end,
                kind: ParseErrorKind::UnexpectedEnd(expected.to_string()),
            },
        }
    }

    fn expect(&mut self, tok: Tok, expected: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(expected))
        }
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.product()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Expr::new(Node::Add(lhs, self.product()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Expr::new(Node::Sub(lhs, self.product()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    lhs = Expr::new(Node::Mul(lhs, self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    lhs = Expr::new(Node::Div(lhs, self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() != Some(&Tok::Minus) {
            return self.power();
        }
        // A minus directly on a literal is a negative literal, unless the
        // literal is raised to a power: `-3^2` means `-(3^2)`.
        if let Some(Tok::Num(v)) = self.peek_at(1) {
            if self.peek_at(2) != Some(&Tok::Caret) {
                let v = *v;
                self.pos += 2;
                return Ok(Expr::new(Node::Const(-v)));
            }
        }
        self.pos += 1;
        Ok(Expr::new(Node::Neg(self.unary()?)))
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.peek() != Some(&Tok::Caret) {
            return Ok(base);
        }
        self.pos += 1;
        let at = self.offset();
        let exponent = self.unary()?;
        let r = fold_rational(&exponent).ok_or(ParseError {
            offset: at,
            kind: ParseErrorKind::NonConstantExponent,
        })?;
        Ok(Expr::new(Node::Pow(base, r)))
    }

    fn args(&mut self) -> Result<Vec<Expr>, ParseError> {
        self.expect(Tok::LParen, "`(`")?;
        let mut args = vec![self.sum()?];
        while self.peek() == Some(&Tok::Comma) {
            self.pos += 1;
            args.push(self.sum()?);
        }
        self.expect(Tok::RParen, "`)` or `,`")?;
        Ok(args)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let at = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::new(Node::Const(v)))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.sum()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.peek() == Some(&Tok::LParen) {
                    return self.call(&name, at);
                }
                if name == "pi" {
                    return Ok(Expr::new(Node::Const(std::f64::consts::PI)));
                }
                if let Some(index) = coordinate_index(&name) {
                    if index == 0 || index > self.dim {
                        return Err(ParseError {
                            offset: at,
                            kind: ParseErrorKind::CoordinateOutOfRange {
                                index,
                                dim: self.dim,
                            },
                        });
                    }
                    return Ok(Expr::new(Node::Coord(index - 1)));
                }
                Err(ParseError {
                    offset: at,
                    kind: ParseErrorKind::UnknownIdentifier(name),
                })
            }
            _ => Err(self.error("a number, coordinate, function or `(`")),
        }
    }

    fn call(&mut self, name: &str, at: usize) -> Result<Expr, ParseError> {
        let arity = match name {
            "exp" | "ln" | "sqrt" | "norm2" => 1,
            "max" | "min" => 2,
            "ifge" => 4,
            _ => {
                return Err(ParseError {
                    offset: at,
                    kind: ParseErrorKind::UnknownFunction(name.to_string()),
                })
            }
        };
        if name == "norm2" {
            self.expect(Tok::LParen, "`(`")?;
            match self.peek() {
                Some(Tok::Ident(s)) if s == "x" => self.pos += 1,
                _ => return Err(self.error("`x`")),
            }
            self.expect(Tok::RParen, "`)`")?;
            return Ok(Expr::new(Node::Norm2));
        }
        let mut args = self.args()?;
        if args.len() != arity {
            return Err(ParseError {
                offset: at,
                kind: ParseErrorKind::Arity {
                    name: name.to_string(),
                    expected: arity,
                    found: args.len(),
                },
            });
        }
        let node = match name {
            "exp" => Node::Exp(args.remove(0)),
            "ln" => Node::Ln(args.remove(0)),
            "sqrt" => Node::Sqrt(args.remove(0)),
            "max" => {
                let b = args.pop().unwrap();
                Node::Max(args.pop().unwrap(), b)
            }
            "min" => {
                let b = args.pop().unwrap();
                Node::Min(args.pop().unwrap(), b)
            }
            _ => {
                let otherwise = args.pop().unwrap();
                let then = args.pop().unwrap();
                let rhs = args.pop().unwrap();
                let lhs = args.pop().unwrap();
                Node::IfGe {
                    lhs,
                    rhs,
                    then,
                    otherwise,
                }
            }
        };
        Ok(Expr::new(node))
    }
}

fn coordinate_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix('x')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(digits.parse().unwrap_or(usize::MAX))
}

fn float_to_rational(v: f64) -> Option<Rational64> {
    if !v.is_finite() {
        return None;
    }
    if v.fract() == 0.0 && v.abs() < 1e15 {
        return Some(Rational64::from_integer(v as i64));
    }
    Rational64::approximate_float(v)
}

/// Fold a coordinate-free exponent expression into an exact rational.
fn fold_rational(e: &Expr) -> Option<Rational64> {
    match e.node() {
        Node::Const(v) => float_to_rational(*v),
        Node::Neg(a) => Some(-fold_rational(a)?),
        Node::Add(a, b) => fold_rational(a)?.checked_add(&fold_rational(b)?),
        Node::Sub(a, b) => fold_rational(a)?.checked_sub(&fold_rational(b)?),
        Node::Mul(a, b) => fold_rational(a)?.checked_mul(&fold_rational(b)?),
        Node::Div(a, b) => {
            let den = fold_rational(b)?;
            if den == Rational64::from_integer(0) {
                return None;
            }
            fold_rational(a)?.checked_div(&den)
        }
        Node::Pow(a, r) if *r.denom() == 1 => {
            let base = fold_rational(a)?;
            let n = i32::try_from(*r.numer()).ok()?;
            if base == Rational64::from_integer(0) && n < 0 {
                return None;
            }
            Some(base.pow(n))
        }
        _ => None,
    }
}

/// Parse `src` as an expression over `dim` coordinates `x1..x{dim}`.
pub fn parse_expr(src: &str, dim: usize) -> Result<Expr, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: src.len(),
        dim,
    };
    let e = p.sum()?;
    if p.pos < p.toks.len() {
        return Err(p.error("an operator or end of input"));
    }
    Ok(e)
}

impl std::str::FromStr for Expr {
    type Err = ParseError;

    /// Parses without a dimension bound; coordinates up to `x64` are accepted.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_expr(s, 64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err(src: &str, dim: usize) -> ParseError {
        parse_expr(src, dim).unwrap_err()
    }

    #[test]
    fn precedence_and_associativity() {
        let e = parse_expr("1 - 2 - 3", 1).unwrap();
        assert_eq!(e.eval(&[0.0]).unwrap(), -4.0);
        let e = parse_expr("2^3^2", 1);
        // Exponent folds 3^2 = 9.
        assert_eq!(e.unwrap().eval(&[0.0]).unwrap(), 512.0);
        let e = parse_expr("-x1^2", 1).unwrap();
        assert_eq!(e.eval(&[3.0]).unwrap(), -9.0);
        let e = parse_expr("-3^2", 1).unwrap();
        assert_eq!(e.eval(&[0.0]).unwrap(), -9.0);
        let e = parse_expr("12/3/2", 1).unwrap();
        assert_eq!(e.eval(&[0.0]).unwrap(), 2.0);
    }

    #[test]
    fn errors_carry_offsets() {
        let e = err("x1 + x3", 2);
        assert_eq!(e.offset, 5);
        assert!(matches!(
            e.kind,
            ParseErrorKind::CoordinateOutOfRange { index: 3, dim: 2 }
        ));
        let e = err("foo(x1)", 1);
        assert_eq!(e.kind, ParseErrorKind::UnknownFunction("foo".into()));
        let e = err("x1 + ", 1);
        assert_eq!(e.offset, 5);
        assert!(matches!(e.kind, ParseErrorKind::UnexpectedEnd(_)));
        let e = err("x1 $ 2", 1);
        assert_eq!(e.offset, 3);
        assert_eq!(err("x1^x1", 1).kind, ParseErrorKind::NonConstantExponent);
        assert!(matches!(err("max(x1)", 1).kind, ParseErrorKind::Arity { .. }));
        assert!(matches!(err("x0", 1).kind, ParseErrorKind::CoordinateOutOfRange { .. }));
        assert!(matches!(err("(x1", 1).kind, ParseErrorKind::UnexpectedEnd(_)));
        assert!(matches!(err("x1 x1", 1).kind, ParseErrorKind::Unexpected { .. }));
    }

    #[test]
    fn decimal_exponents_become_rationals() {
        let e = parse_expr("x1^0.5", 1).unwrap();
        match e.node() {
            Node::Pow(_, r) => assert_eq!(*r, Rational64::new(1, 2)),
            _ => panic!("expected power"),
        }
        let e = parse_expr("x1^(-3/4)", 1).unwrap();
        match e.node() {
            Node::Pow(_, r) => assert_eq!(*r, Rational64::new(-3, 4)),
            _ => panic!("expected power"),
        }
    }

    #[test]
    fn scientific_literals() {
        let e = parse_expr("1e-3 + 2.5E2", 1).unwrap();
        assert_eq!(e.eval(&[0.0]).unwrap(), 250.001);
    }
}
