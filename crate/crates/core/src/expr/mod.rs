//! Scalar expression mini-language.
//!
//! A closed grammar (no user-defined functions) over `+ - * /`, integer
//! powers `^k` with `k ≥ 0`, and the built-ins `exp, ln, sin, cos, sqrt,
//! abs, sign`. Closedness keeps symbolic differentiation total: the partial
//! derivative of any expression is again an expression of the language
//! (`abs` differentiates to `sign`, which differentiates to zero; the value
//! `sign(0) = 0` makes the derivative of `abs` at zero the subgradient 0).

mod field;
mod parse;

pub use field::{extremum_on_box, ExtremumMode, FieldError, ScalarField};
pub use parse::{parse, ParseError, ParseErrorKind};

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};

use crate::fmath;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Sin,
    Cos,
    Sqrt,
    Abs,
    Sign,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Exp => "exp",
            UnaryOp::Ln => "ln",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Abs => "abs",
            UnaryOp::Sign => "sign",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Expression tree. Integer powers keep their exponent as data so the power
/// rule stays exact and non-integer exponents are unrepresentable.
#[derive(Clone, Debug, PartialEq)]
pub enum Expression {
    Num(f64),
    Var(String),
    Unary(UnaryOp, Box<Expression>),
    Bin(BinOp, Box<Expression>, Box<Expression>),
    Pow(Box<Expression>, u32),
}

/// Evaluation failure: an unbound variable or a domain error at some node.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalError {
    UnboundVariable(String),
    /// `op` names the offending operation, `detail` shows the rendered
    /// subexpression and the operand value it received.
    Domain {
        op: &'static str,
        detail: String,
    },
}

impl core::fmt::Display for EvalError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EvalError::UnboundVariable(name) => write!(f, "unbound variable `{name}`"),
            EvalError::Domain { op, detail } => write!(f, "domain error in `{op}`: {detail}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EvalError {}

impl Expression {
    pub fn num(v: f64) -> Self {
        Expression::Num(v)
    }

    pub fn var(name: &str) -> Self {
        Expression::Var(name.to_string())
    }

    /// Every variable name referenced by the tree, visited in syntactic order.
    pub fn visit_vars(&self, f: &mut dyn FnMut(&str)) {
        match self {
            Expression::Num(_) => {}
            Expression::Var(v) => f(v),
            Expression::Unary(_, a) => a.visit_vars(f),
            Expression::Bin(_, a, b) => {
                a.visit_vars(f);
                b.visit_vars(f);
            }
            Expression::Pow(a, _) => a.visit_vars(f),
        }
    }

    /// Evaluate against a variable lookup.
    pub fn eval_with(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64, EvalError> {
        match self {
            Expression::Num(v) => Ok(*v),
            Expression::Var(name) => lookup(name)
                .ok_or_else(|| EvalError::UnboundVariable(name.clone())),
            Expression::Unary(op, a) => {
                let x = a.eval_with(lookup)?;
                let v = match op {
                    UnaryOp::Neg => -x,
                    UnaryOp::Exp => fmath::exp(x),
                    UnaryOp::Ln => {
                        if x <= 0.0 {
                            return Err(domain("ln", a, x));
                        }
                        fmath::ln(x)
                    }
                    UnaryOp::Sin => fmath::sin(x),
                    UnaryOp::Cos => fmath::cos(x),
                    UnaryOp::Sqrt => {
                        if x < 0.0 {
                            return Err(domain("sqrt", a, x));
                        }
                        fmath::sqrt(x)
                    }
                    UnaryOp::Abs => fmath::abs(x),
                    UnaryOp::Sign => fmath::signum0(x),
                };
                Ok(v)
            }
            Expression::Bin(op, a, b) => {
                let x = a.eval_with(lookup)?;
                let y = b.eval_with(lookup)?;
                let v = match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => {
                        if y == 0.0 {
                            return Err(domain("/", b, y));
                        }
                        x / y
                    }
                };
                Ok(v)
            }
            Expression::Pow(a, k) => Ok(fmath::powi(a.eval_with(lookup)?, *k)),
        }
    }

    /// Exact symbolic partial derivative with respect to `var`.
    pub fn diff(&self, var: &str) -> Expression {
        match self {
            Expression::Num(_) => Expression::Num(0.0),
            Expression::Var(v) => Expression::Num(if v == var { 1.0 } else { 0.0 }),
            Expression::Unary(op, a) => {
                let da = a.diff(var);
                match op {
                    UnaryOp::Neg => neg_e(da),
                    UnaryOp::Exp => mul_e(Expression::Unary(UnaryOp::Exp, a.clone()), da),
                    UnaryOp::Ln => div_e(da, (**a).clone()),
                    UnaryOp::Sin => mul_e(Expression::Unary(UnaryOp::Cos, a.clone()), da),
                    UnaryOp::Cos => neg_e(mul_e(Expression::Unary(UnaryOp::Sin, a.clone()), da)),
                    UnaryOp::Sqrt => div_e(
                        da,
                        mul_e(Expression::Num(2.0), Expression::Unary(UnaryOp::Sqrt, a.clone())),
                    ),
                    UnaryOp::Abs => mul_e(Expression::Unary(UnaryOp::Sign, a.clone()), da),
                    UnaryOp::Sign => Expression::Num(0.0),
                }
            }
            Expression::Bin(op, a, b) => {
                let da = a.diff(var);
                let db = b.diff(var);
                match op {
                    BinOp::Add => add_e(da, db),
                    BinOp::Sub => sub_e(da, db),
                    BinOp::Mul => add_e(mul_e(da, (**b).clone()), mul_e((**a).clone(), db)),
                    BinOp::Div => div_e(
                        sub_e(mul_e(da, (**b).clone()), mul_e((**a).clone(), db)),
                        pow_e((**b).clone(), 2),
                    ),
                }
            }
            Expression::Pow(a, k) => {
                if *k == 0 {
                    Expression::Num(0.0)
                } else {
                    let da = a.diff(var);
                    mul_e(
                        mul_e(Expression::Num(*k as f64), pow_e((**a).clone(), *k - 1)),
                        da,
                    )
                }
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expression::Num(v) if *v < 0.0 => 1,
            Expression::Num(_) | Expression::Var(_) => 4,
            Expression::Unary(UnaryOp::Neg, _) => 1,
            Expression::Unary(_, _) => 4,
            Expression::Bin(BinOp::Add | BinOp::Sub, _, _) => 1,
            Expression::Bin(BinOp::Mul | BinOp::Div, _, _) => 2,
            Expression::Pow(_, _) => 3,
        }
    }
}

fn domain(op: &'static str, node: &Expression, operand: f64) -> EvalError {
    EvalError::Domain {
        op,
        detail: format!("`{node}` evaluated to {operand}"),
    }
}

// Smart constructors used when building derivative trees: they fold constants
// and drop 0/1 identities so derivatives stay readable. Parsing never calls
// them, which keeps the print/parse round trip exact on user input.

fn add_e(a: Expression, b: Expression) -> Expression {
    match (a, b) {
        (Expression::Num(x), Expression::Num(y)) => Expression::Num(x + y),
        (Expression::Num(z), b) if z == 0.0 => b,
        (a, Expression::Num(z)) if z == 0.0 => a,
        (a, b) => Expression::Bin(BinOp::Add, Box::new(a), Box::new(b)),
    }
}

fn sub_e(a: Expression, b: Expression) -> Expression {
    match (a, b) {
        (Expression::Num(x), Expression::Num(y)) => Expression::Num(x - y),
        (a, Expression::Num(z)) if z == 0.0 => a,
        (Expression::Num(z), b) if z == 0.0 => neg_e(b),
        (a, b) => Expression::Bin(BinOp::Sub, Box::new(a), Box::new(b)),
    }
}

fn neg_e(a: Expression) -> Expression {
    match a {
        Expression::Num(x) => Expression::Num(-x),
        Expression::Unary(UnaryOp::Neg, inner) => *inner,
        a => Expression::Unary(UnaryOp::Neg, Box::new(a)),
    }
}

fn mul_e(a: Expression, b: Expression) -> Expression {
    match (a, b) {
        (Expression::Num(x), Expression::Num(y)) => Expression::Num(x * y),
        (Expression::Num(z), _) | (_, Expression::Num(z)) if z == 0.0 => Expression::Num(0.0),
        (Expression::Num(o), b) if o == 1.0 => b,
        (a, Expression::Num(o)) if o == 1.0 => a,
        (a, b) => Expression::Bin(BinOp::Mul, Box::new(a), Box::new(b)),
    }
}

fn div_e(a: Expression, b: Expression) -> Expression {
    match (a, b) {
        (Expression::Num(z), _) if z == 0.0 => Expression::Num(0.0),
        (a, Expression::Num(o)) if o == 1.0 => a,
        (a, b) => Expression::Bin(BinOp::Div, Box::new(a), Box::new(b)),
    }
}

fn pow_e(a: Expression, k: u32) -> Expression {
    match k {
        0 => Expression::Num(1.0),
        1 => a,
        _ => Expression::Pow(Box::new(a), k),
    }
}

impl core::fmt::Display for Expression {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        fn write_child(
            f: &mut core::fmt::Formatter<'_>,
            child: &Expression,
            min_prec: u8,
        ) -> core::fmt::Result {
            if child.precedence() < min_prec {
                write!(f, "({child})")
            } else {
                write!(f, "{child}")
            }
        }
        match self {
            Expression::Num(v) => write!(f, "{v}"),
            Expression::Var(name) => write!(f, "{name}"),
            Expression::Unary(UnaryOp::Neg, a) => {
                // after `-` the parser accepts only another negation or a
                // postfix unit, so looser children need parentheses
                write!(f, "-")?;
                write_child(f, a, 3)
            }
            Expression::Unary(op, a) => write!(f, "{}({a})", op.name()),
            Expression::Bin(op, a, b) => {
                // all four operators parse left-associative, so right
                // children at equal precedence need parentheses
                let (prec, sym) = match op {
                    BinOp::Add => (1, "+"),
                    BinOp::Sub => (1, "-"),
                    BinOp::Mul => (2, "*"),
                    BinOp::Div => (2, "/"),
                };
                write_child(f, a, prec)?;
                write!(f, " {sym} ")?;
                write_child(f, b, prec + 1)
            }
            Expression::Pow(a, k) => {
                write_child(f, a, 4)?;
                write!(f, "^{k}")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn eval1(e: &Expression, name: &str, v: f64) -> f64 {
        e.eval_with(&|n| if n == name { Some(v) } else { None }).unwrap()
    }

    #[test]
    fn power_node_shape() {
        let e = parse("x2^3").unwrap();
        assert_eq!(e, Expression::Pow(Box::new(Expression::var("x2")), 3));
    }

    #[test]
    fn rational_shape() {
        // coupling coefficient of the worked three-state example
        let e = parse("1/(1+x1^2)").unwrap();
        assert_eq!(
            e,
            Expression::Bin(
                BinOp::Div,
                Box::new(Expression::Num(1.0)),
                Box::new(Expression::Bin(
                    BinOp::Add,
                    Box::new(Expression::Num(1.0)),
                    Box::new(Expression::Pow(Box::new(Expression::var("x1")), 2)),
                )),
            )
        );
        assert!((eval1(&e, "x1", 2.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn literal_composition() {
        let e = parse("exp(-t)*0.5").unwrap();
        assert_eq!(
            e,
            Expression::Bin(
                BinOp::Mul,
                Box::new(Expression::Unary(
                    UnaryOp::Exp,
                    Box::new(Expression::Unary(UnaryOp::Neg, Box::new(Expression::var("t")))),
                )),
                Box::new(Expression::Num(0.5)),
            )
        );
        assert!((eval1(&parse("0.5*exp(-t)").unwrap(), "t", 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn eval_examples() {
        assert_eq!(eval1(&parse("x2^3").unwrap(), "x2", 2.0), 8.0);
    }

    #[test]
    fn unbound_variable_reported() {
        let e = parse("x1 + q").unwrap();
        let err = e.eval_with(&|n| if n == "x1" { Some(1.0) } else { None });
        assert_eq!(err, Err(EvalError::UnboundVariable("q".into())));
    }

    #[test]
    fn domain_errors_carry_location() {
        let e = parse("ln(t - 1)").unwrap();
        match e.eval_with(&|_| Some(0.5)) {
            Err(EvalError::Domain { op: "ln", detail }) => assert!(detail.contains("t - 1")),
            other => panic!("expected ln domain error, got {other:?}"),
        }
        let e = parse("1/x1").unwrap();
        assert!(matches!(
            e.eval_with(&|_| Some(0.0)),
            Err(EvalError::Domain { op: "/", .. })
        ));
    }

    #[test]
    fn diff_power_rule() {
        let d = parse("x2^3").unwrap().diff("x2");
        assert_eq!(eval1(&d, "x2", 2.0), 12.0);
        assert_eq!(eval1(&d, "x2", -1.5), 3.0 * 2.25);
    }

    #[test]
    fn diff_linear() {
        let d = parse("-x2").unwrap().diff("x2");
        assert_eq!(d, Expression::Num(-1.0));
    }

    #[test]
    fn diff_matches_central_differences() {
        // oracle: central finite differences of the undifferentiated field
        let e = parse("1/(1+x1^2)").unwrap();
        let d = e.diff("x1");
        let h = 1e-5;
        for x in [-1.0, 0.5, 3.0] {
            let fd = (eval1(&e, "x1", x + h) - eval1(&e, "x1", x - h)) / (2.0 * h);
            let sym = eval1(&d, "x1", x);
            assert!(
                (sym - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "x={x}: sym={sym} fd={fd}"
            );
        }
    }

    #[test]
    fn abs_at_zero_uses_subgradient_zero() {
        let d = parse("abs(x1)").unwrap().diff("x1");
        assert_eq!(eval1(&d, "x1", 0.0), 0.0);
        assert_eq!(eval1(&d, "x1", 2.0), 1.0);
        assert_eq!(eval1(&d, "x1", -2.0), -1.0);
    }

    #[test]
    fn print_parse_round_trip() {
        let sources = vec![
            "x2^3",
            "1/(1+x1^2)",
            "exp(-t)*0.5",
            "-x1^2 + sin(t)*cos(x1) - sqrt(abs(x2))",
            "(t - 1)/(t + 1) - t/(1 - t)",
            "2*(x1 - 3)^4/(1 + ln(t))",
        ];
        for src in sources {
            let ast = parse(src).unwrap();
            let printed = alloc::string::ToString::to_string(&ast);
            let reparsed = parse(&printed).unwrap_or_else(|e| panic!("{printed}: {e}"));
            assert_eq!(ast, reparsed, "round trip failed for {src} -> {printed}");
        }
    }
}
