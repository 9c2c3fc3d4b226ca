//! Scalar fields: an expression together with its ordered variable list,
//! plus conservative extrema over axis-aligned boxes.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::{parse, EvalError, Expression, ParseError};
use crate::fmath;

/// An expression bound to an ordered, duplicate-free variable list.
///
/// Evaluation is positional: `args[i]` binds to `variables[i]`. All fields
/// are immutable after construction and safe to share across workers.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    expression: Expression,
    variables: Vec<String>,
    description: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FieldError {
    Parse(ParseError),
    DuplicateVariable(String),
    /// The expression references an identifier outside the declared set.
    UnknownIdentifier(String),
    ArityMismatch { expected: usize, got: usize },
    Eval(EvalError),
}

impl core::fmt::Display for FieldError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FieldError::Parse(e) => write!(f, "{e}"),
            FieldError::DuplicateVariable(v) => write!(f, "duplicate variable `{v}`"),
            FieldError::UnknownIdentifier(v) => write!(f, "unknown identifier `{v}`"),
            FieldError::ArityMismatch { expected, got } => {
                write!(f, "arity mismatch: field takes {expected} arguments, got {got}")
            }
            FieldError::Eval(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for FieldError {}

impl From<ParseError> for FieldError {
    fn from(e: ParseError) -> Self {
        FieldError::Parse(e)
    }
}

impl ScalarField {
    /// Bind an already-parsed expression to a variable list, checking that
    /// every referenced identifier is declared.
    pub fn new(
        expression: Expression,
        variables: &[&str],
        description: &str,
    ) -> Result<Self, FieldError> {
        let vars: Vec<String> = variables.iter().map(|s| s.to_string()).collect();
        for (i, v) in vars.iter().enumerate() {
            if vars[..i].contains(v) {
                return Err(FieldError::DuplicateVariable(v.clone()));
            }
        }
        let mut unknown = None;
        expression.visit_vars(&mut |name| {
            if unknown.is_none() && !vars.iter().any(|v| v == name) {
                unknown = Some(name.to_string());
            }
        });
        if let Some(name) = unknown {
            return Err(FieldError::UnknownIdentifier(name));
        }
        Ok(ScalarField { expression, variables: vars, description: description.to_string() })
    }

    /// Parse `source` and bind it in one step.
    pub fn parse(source: &str, variables: &[&str], description: &str) -> Result<Self, FieldError> {
        Ok(Self::new(parse(source)?, variables, description)?)
    }

    pub fn constant(value: f64, variables: &[&str], description: &str) -> Self {
        Self::new(Expression::Num(value), variables, description).expect("constant field")
    }

    pub fn expression(&self) -> &Expression {
        &self.expression
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn arity(&self) -> usize {
        self.variables.len()
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    /// Positional evaluation.
    pub fn eval(&self, args: &[f64]) -> Result<f64, FieldError> {
        if args.len() != self.variables.len() {
            return Err(FieldError::ArityMismatch {
                expected: self.variables.len(),
                got: args.len(),
            });
        }
        self.expression
            .eval_with(&|name| {
                self.variables.iter().position(|v| v == name).map(|i| args[i])
            })
            .map_err(FieldError::Eval)
    }

    /// Named-binding evaluation; every declared variable must be bound.
    pub fn eval_map(&self, bindings: &[(&str, f64)]) -> Result<f64, FieldError> {
        let mut args = Vec::with_capacity(self.variables.len());
        for v in &self.variables {
            match bindings.iter().find(|(name, _)| name == v) {
                Some((_, value)) => args.push(*value),
                None => return Err(FieldError::Eval(EvalError::UnboundVariable(v.clone()))),
            }
        }
        self.eval(&args)
    }

    /// Exact symbolic partial derivative, keeping the same variable list.
    pub fn differentiate(&self, var: &str) -> Result<ScalarField, FieldError> {
        if !self.variables.iter().any(|v| v == var) {
            return Err(FieldError::UnknownIdentifier(var.to_string()));
        }
        let d = self.expression.diff(var);
        Ok(ScalarField {
            expression: d,
            variables: self.variables.clone(),
            description: format!("d({})/d{}", self.description, var),
        })
    }
}

/// What to extremize over the box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtremumMode {
    /// Largest `|f|`; result is multiplied by the safety factor.
    MaxAbs,
    /// Smallest value; result is divided by the safety factor.
    MinValue,
    /// Largest value; result is multiplied by the safety factor.
    MaxValue,
    /// Smallest `|f|`; result is divided by the safety factor.
    MinAbs,
}

/// Grid extremum of `field` over the per-variable intervals in `boxes`
/// (one `(lo, hi)` pair per declared variable; degenerate intervals pin a
/// variable). `grid` is the number of points per non-degenerate axis
/// (minimum 3). `safety ≥ 1` inflates maxima and deflates minima so the
/// result stays a valid one-sided bound under refinement.
pub fn extremum_on_box(
    field: &ScalarField,
    boxes: &[(f64, f64)],
    mode: ExtremumMode,
    grid: usize,
    safety: f64,
) -> Result<f64, FieldError> {
    assert_eq!(boxes.len(), field.arity(), "one interval per variable");
    assert!(grid >= 3, "grid must be at least 3 points per axis");
    assert!(safety >= 1.0, "safety factor must be >= 1");
    let dims = boxes.len();
    let counts: Vec<usize> = boxes
        .iter()
        .map(|&(lo, hi)| if hi > lo { grid } else { 1 })
        .collect();
    let mut idx = vec![0usize; dims];
    let mut args = vec![0.0f64; dims];
    let mut best: Option<f64> = None;
    loop {
        for d in 0..dims {
            let (lo, hi) = boxes[d];
            args[d] = if counts[d] == 1 {
                lo
            } else {
                lo + (hi - lo) * (idx[d] as f64) / ((counts[d] - 1) as f64)
            };
        }
        let v = field.eval(&args)?;
        if !fmath::is_finite(v) {
            return Err(FieldError::Eval(EvalError::Domain {
                op: "extremum_on_box",
                detail: format!("non-finite value {v} at {args:?}"),
            }));
        }
        let key = match mode {
            ExtremumMode::MaxAbs | ExtremumMode::MinAbs => fmath::abs(v),
            ExtremumMode::MaxValue | ExtremumMode::MinValue => v,
        };
        best = Some(match (best, mode) {
            (None, _) => key,
            (Some(b), ExtremumMode::MaxAbs | ExtremumMode::MaxValue) => {
                if key > b {
                    key
                } else {
                    b
                }
            }
            (Some(b), ExtremumMode::MinAbs | ExtremumMode::MinValue) => {
                if key < b {
                    key
                } else {
                    b
                }
            }
        });
        // odometer increment
        let mut d = 0;
        loop {
            if d == dims {
                let raw = best.unwrap();
                return Ok(match mode {
                    ExtremumMode::MaxAbs | ExtremumMode::MaxValue => raw * safety,
                    ExtremumMode::MinAbs | ExtremumMode::MinValue => raw / safety,
                });
            }
            idx[d] += 1;
            if idx[d] < counts[d] {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_max_abs() {
        let f = ScalarField::parse("-1", &["x1"], "const").unwrap();
        let v = extremum_on_box(&f, &[(-5.0, 7.0)], ExtremumMode::MaxAbs, 9, 1.25).unwrap();
        assert!((v - 1.25).abs() < 1e-15);
    }

    #[test]
    fn min_of_rational_on_interval() {
        // analytic minimum of 1/(1+x^2) on [-2, 2] is 0.2 at |x| = 2;
        // confirmed against a 1001-point grid before freezing.
        let f = ScalarField::parse("1/(1+x1^2)", &["x1"], "a2").unwrap();
        let oracle =
            extremum_on_box(&f, &[(-2.0, 2.0)], ExtremumMode::MinValue, 1001, 1.0).unwrap();
        assert!((oracle - 0.2).abs() < 1e-12);
        let v = extremum_on_box(&f, &[(-2.0, 2.0)], ExtremumMode::MinValue, 101, 1.0).unwrap();
        assert!((v - 0.2).abs() < 1e-12);
    }

    #[test]
    fn max_abs_with_safety() {
        // analytic max of |3 x^2| on [-2,2] is 12 at the boundary; x1.1 safety
        let f = ScalarField::parse("3*x1^2", &["x1"], "d").unwrap();
        let v = extremum_on_box(&f, &[(-2.0, 2.0)], ExtremumMode::MaxAbs, 101, 1.1).unwrap();
        assert!((v - 13.2).abs() < 1e-12);
    }

    #[test]
    fn degenerate_axis_pins_variable() {
        let f = ScalarField::parse("t + x1^2", &["t", "x1"], "f").unwrap();
        let v = extremum_on_box(&f, &[(3.0, 3.0), (-1.0, 1.0)], ExtremumMode::MaxValue, 11, 1.0)
            .unwrap();
        assert!((v - 4.0).abs() < 1e-12);
    }

    #[test]
    fn refinement_is_within_safety_slack() {
        // doubling the grid may move the raw extremum, but never past the
        // slack that the safety factor provides
        let f = ScalarField::parse("sin(3*x1)*exp(-x1^2)", &["x1"], "wiggle").unwrap();
        let coarse = extremum_on_box(&f, &[(-2.0, 2.0)], ExtremumMode::MaxAbs, 33, 1.1).unwrap();
        let fine = extremum_on_box(&f, &[(-2.0, 2.0)], ExtremumMode::MaxAbs, 66, 1.1).unwrap();
        assert!(fine <= coarse * 1.1 + 1e-12);
        assert!(fine >= coarse / 1.1 - 1e-12);
    }

    #[test]
    fn eval_map_requires_all_bindings() {
        let f = ScalarField::parse("t*x1", &["t", "x1"], "f").unwrap();
        assert!((f.eval_map(&[("x1", 3.0), ("t", 2.0)]).unwrap() - 6.0).abs() < 1e-15);
        assert!(f.eval_map(&[("t", 2.0)]).is_err());
    }

    #[test]
    fn unknown_identifier_rejected_at_binding() {
        let err = ScalarField::parse("x1 + bogus", &["t", "x1"], "f").unwrap_err();
        assert_eq!(err, FieldError::UnknownIdentifier("bogus".into()));
    }
}
