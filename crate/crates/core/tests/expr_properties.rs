use num_rational::Rational64;
use proptest::prelude::*;
use sdelab::expr::{parse_expr, DiffMode, Expr, Node};

const DIM: usize = 3;

fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![
        (-4.0f64..4.0).prop_map(|v| Expr::constant((v * 8.0).round() / 8.0)),
        (-1e3f64..1e3).prop_map(Expr::constant),
        (0..DIM).prop_map(Expr::coord),
        Just(Expr::norm2()),
    ]
}

fn exponent() -> impl Strategy<Value = Rational64> {
    (-4i64..5, 1i64..4).prop_map(|(p, q)| Rational64::new(p, q))
}

/// Arbitrary trees over the full grammar, used for printer/parser round trips.
fn any_expr() -> impl Strategy<Value = Expr> {
    leaf().prop_recursive(5, 48, 4, |inner| {
        prop_oneof![
            inner.clone().prop_map(|a| Expr::new(Node::Neg(a))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::new(Node::Add(a, b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::new(Node::Sub(a, b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::new(Node::Mul(a, b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::new(Node::Div(a, b))),
            (inner.clone(), exponent()).prop_map(|(a, r)| Expr::new(Node::Pow(a, r))),
            inner.clone().prop_map(|a| Expr::new(Node::Exp(a))),
            inner.clone().prop_map(|a| Expr::new(Node::Ln(a))),
            inner.clone().prop_map(|a| Expr::new(Node::Sqrt(a))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::new(Node::Max(a, b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::new(Node::Min(a, b))),
            (inner.clone(), inner.clone(), inner.clone(), inner).prop_map(|(a, b, c, d)| {
                Expr::new(Node::IfGe {
                    lhs: a,
                    rhs: b,
                    then: c,
                    otherwise: d,
                })
            }),
        ]
    })
}

fn one_plus_square(a: Expr) -> Expr {
    Expr::new(Node::Add(
        Expr::constant(1.0),
        Expr::new(Node::Pow(a, Rational64::from_integer(2))),
    ))
}

/// Smooth trees that are defined and moderate on the unit cube.
fn smooth_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (-3.0f64..3.0).prop_map(Expr::constant),
        (0..DIM).prop_map(Expr::coord),
        Just(Expr::norm2()),
    ];
    leaf.prop_recursive(4, 32, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|a| Expr::new(Node::Neg(a))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::new(Node::Add(a, b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::new(Node::Sub(a, b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::new(Node::Mul(a, b))),
            (inner.clone(), inner.clone())
                .prop_map(|(a, b)| Expr::new(Node::Div(a, one_plus_square(b)))),
            (inner.clone(), 0i64..4)
                .prop_map(|(a, n)| Expr::new(Node::Pow(a, Rational64::from_integer(n)))),
            inner.clone().prop_map(|a| Expr::new(Node::Pow(
                one_plus_square(a),
                Rational64::new(-1, 2)
            ))),
            inner.clone().prop_map(|a| {
                let squashed = Expr::new(Node::Div(a.clone(), one_plus_square(a)));
                Expr::new(Node::Exp(squashed))
            }),
            inner.clone().prop_map(|a| Expr::new(Node::Ln(one_plus_square(a)))),
            inner.prop_map(|a| Expr::new(Node::Sqrt(one_plus_square(a)))),
        ]
    })
}

proptest! {
    #[test]
    fn print_parse_round_trip(e in any_expr()) {
        let printed = e.to_string();
        let parsed = parse_expr(&printed, DIM).unwrap();
        prop_assert_eq!(&parsed, &e, "printed as {}", printed);
        let reparsed = parse_expr(&parsed.to_string(), DIM).unwrap();
        prop_assert_eq!(reparsed, parsed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn derivative_matches_central_difference(
        e in smooth_expr(),
        x in prop::array::uniform3(-1.0f64..1.0),
        axis in 0..DIM,
    ) {
        let h = 1e-5;
        let d = e.diff(axis, DiffMode::Smooth).unwrap();
        let v = d.eval(&x).unwrap();
        let mut up = x;
        let mut down = x;
        up[axis] += h;
        down[axis] -= h;
        let fd = (e.eval(&up).unwrap() - e.eval(&down).unwrap()) / (2.0 * h);
        prop_assert!(
            (v - fd).abs() <= 1e-6 * (1.0 + v.abs()),
            "d/dx{} of {} at {:?}: symbolic {} vs fd {}", axis + 1, e, x, v, fd
        );
    }

    #[test]
    fn evaluation_is_deterministic(e in smooth_expr(), x in prop::array::uniform3(-1.0f64..1.0)) {
        let a = e.eval(&x).unwrap();
        let b = e.clone().eval(&x).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }
}
