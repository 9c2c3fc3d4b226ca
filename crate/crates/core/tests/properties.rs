//! Property tests: print/parse round trip on random trees, symbolic
//! differentiation against central differences, telescoping and box-extremum
//! conservatism.

use proptest::prelude::*;

use triobs_core::expr::{extremum_on_box, parse, Expression, ExtremumMode, ScalarField};
use triobs_core::system::eval_b;

fn leaf() -> impl Strategy<Value = Expression> {
    // the parser's image never contains negative literals (a leading minus
    // parses as negation), so canonical trees carry nonnegative numbers
    prop_oneof![
        (0.0..25.0f64).prop_map(|v| Expression::Num((v * 16.0).round() / 16.0)),
        prop_oneof![Just("t"), Just("x1"), Just("x2")].prop_map(Expression::var),
    ]
}

fn expr_tree() -> impl Strategy<Value = Expression> {
    leaf().prop_recursive(4, 48, 3, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone(), prop_oneof![Just(0u8), Just(1), Just(2), Just(3)])
                .prop_map(|(a, b, op)| {
                    use triobs_core::expr::BinOp::*;
                    let op = [Add, Sub, Mul, Div][op as usize];
                    Expression::Bin(op, Box::new(a), Box::new(b))
                }),
            (inner.clone(), prop_oneof![
                Just(triobs_core::expr::UnaryOp::Neg),
                Just(triobs_core::expr::UnaryOp::Exp),
                Just(triobs_core::expr::UnaryOp::Sin),
                Just(triobs_core::expr::UnaryOp::Cos),
                Just(triobs_core::expr::UnaryOp::Abs),
            ])
                .prop_map(|(a, op)| Expression::Unary(op, Box::new(a))),
            (inner, 0u32..5).prop_map(|(a, k)| Expression::Pow(Box::new(a), k)),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn print_parse_round_trip_is_identity(ast in expr_tree()) {
        let printed = ast.to_string();
        let reparsed = parse(&printed).unwrap();
        prop_assert_eq!(ast, reparsed, "printed form: {}", printed);
    }

    #[test]
    fn telescoping_holds_for_all_odd_powers(
        x in -10.0..10.0f64,
        z in -10.0..10.0f64,
        mi in 0usize..4,
    ) {
        let m = [1u32, 3, 5, 7][mi];
        let lhs = eval_b(m, x, x - z) * (x - z);
        let rhs = x.powi(m as i32) - z.powi(m as i32);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
    }

    #[test]
    fn symbolic_derivative_matches_central_difference(
        seed_x in -2.0..2.0f64,
    ) {
        // smooth scenario field: rational times trig composition
        let f = ScalarField::parse(
            "sin(x1)/(1 + x1^2) + 0.25*x1^3 - cos(2*x1)",
            &["x1"],
            "f",
        ).unwrap();
        let d = f.differentiate("x1").unwrap();
        let h = 1e-5;
        let fd = (f.eval(&[seed_x + h]).unwrap() - f.eval(&[seed_x - h]).unwrap()) / (2.0 * h);
        let sym = d.eval(&[seed_x]).unwrap();
        prop_assert!(
            (sym - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
            "x = {}: symbolic {} vs central {}", seed_x, sym, fd
        );
    }

    #[test]
    fn grid_extremum_is_conservative_under_refinement(
        half in 0.5..3.0f64,
    ) {
        let f = ScalarField::parse("sin(3*x1) + 0.5*x1^2", &["x1"], "f").unwrap();
        let coarse = extremum_on_box(&f, &[(-half, half)], ExtremumMode::MaxAbs, 33, 1.1).unwrap();
        let fine = extremum_on_box(&f, &[(-half, half)], ExtremumMode::MaxAbs, 66, 1.1).unwrap();
        // halving the spacing never increases the result past the safety slack
        prop_assert!(fine <= coarse * 1.1 + 1e-12);
    }
}
