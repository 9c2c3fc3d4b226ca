//! Recursive-descent parser for the expression mini-language.
//!
//! Grammar (whitespace insignificant):
//!
//! ```text
//! expr    := term  (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | postfix
//! postfix := primary ('^' UINT)*
//! primary := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'
//! ```
//!
//! `^` binds tighter than unary minus, so `-x^2` parses as `-(x^2)`.
//! Exponents must be nonnegative integer literals.

use alloc::boxed::Box;
use alloc::string::{String, ToString};

use super::{BinOp, Expression, UnaryOp};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnexpectedChar(char),
    UnexpectedEnd,
    UnknownFunction(String),
    NonIntegerExponent,
    BadNumber,
    TrailingInput,
    UnbalancedParen,
}

/// Syntax error with the byte offset where it was detected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

impl core::fmt::Display for ParseError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "syntax error at byte {}: ", self.offset)?;
        match &self.kind {
            ParseErrorKind::UnexpectedChar(c) => write!(f, "unexpected character `{c}`"),
            ParseErrorKind::UnexpectedEnd => write!(f, "unexpected end of input"),
            ParseErrorKind::UnknownFunction(name) => write!(f, "unknown function `{name}`"),
            ParseErrorKind::NonIntegerExponent => {
                write!(f, "exponent must be a nonnegative integer literal")
            }
            ParseErrorKind::BadNumber => write!(f, "malformed number"),
            ParseErrorKind::TrailingInput => write!(f, "trailing input"),
            ParseErrorKind::UnbalancedParen => write!(f, "expected `)`"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ParseError {}

/// Parse a source string into an [`Expression`].
pub fn parse(text: &str) -> Result<Expression, ParseError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err(ParseErrorKind::TrailingInput));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, kind: ParseErrorKind) -> ParseError {
        ParseError { offset: self.pos, kind }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expression, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expression::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expression::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expression, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Expression::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Expression::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expression, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(Expression::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expression, ParseError> {
        let mut e = self.primary()?;
        while self.peek() == Some(b'^') {
            self.pos += 1;
            let k = self.uint_exponent()?;
            e = Expression::Pow(Box::new(e), k);
        }
        Ok(e)
    }

    fn uint_exponent(&mut self) -> Result<u32, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ParseError { offset: start, kind: ParseErrorKind::NonIntegerExponent });
        }
        // a digit run followed by `.` or an exponent marker is a float literal
        if let Some(&c) = self.src.get(self.pos) {
            if c == b'.' || c == b'e' || c == b'E' {
                return Err(ParseError { offset: start, kind: ParseErrorKind::NonIntegerExponent });
            }
        }
        let text = core::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<u32>()
            .map_err(|_| ParseError { offset: start, kind: ParseErrorKind::NonIntegerExponent })
    }

    fn primary(&mut self) -> Result<Expression, ParseError> {
        match self.peek() {
            None => Err(self.err(ParseErrorKind::UnexpectedEnd)),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err(ParseErrorKind::UnbalancedParen));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident_or_call(),
            Some(c) => Err(self.err(ParseErrorKind::UnexpectedChar(c as char))),
        }
    }

    fn number(&mut self) -> Result<Expression, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.')
        {
            self.pos += 1;
        }
        if let Some(&c) = self.src.get(self.pos) {
            if c == b'e' || c == b'E' {
                let mut probe = self.pos + 1;
                if let Some(&s) = self.src.get(probe) {
                    if s == b'+' || s == b'-' {
                        probe += 1;
                    }
                }
                let digits_start = probe;
                while probe < self.src.len() && self.src[probe].is_ascii_digit() {
                    probe += 1;
                }
                if probe > digits_start {
                    self.pos = probe;
                }
            }
        }
        let text = core::str::from_utf8(&self.src[start..self.pos]).unwrap();
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Expression::Num(v)),
            _ => Err(ParseError { offset: start, kind: ParseErrorKind::BadNumber }),
        }
    }

    fn ident_or_call(&mut self) -> Result<Expression, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = core::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string();
        if self.peek() == Some(b'(') {
            let op = match name.as_str() {
                "exp" => UnaryOp::Exp,
                "ln" => UnaryOp::Ln,
                "sin" => UnaryOp::Sin,
                "cos" => UnaryOp::Cos,
                "sqrt" => UnaryOp::Sqrt,
                "abs" => UnaryOp::Abs,
                "sign" => UnaryOp::Sign,
                _ => {
                    return Err(ParseError {
                        offset: start,
                        kind: ParseErrorKind::UnknownFunction(name),
                    })
                }
            };
            self.pos += 1;
            let arg = self.expr()?;
            if self.peek() != Some(b')') {
                return Err(self.err(ParseErrorKind::UnbalancedParen));
            }
            self.pos += 1;
            Ok(Expression::Unary(op, Box::new(arg)))
        } else {
            Ok(Expression::Var(name))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_byte_offset() {
        let err = parse("1 + $").unwrap_err();
        assert_eq!(err.offset, 4);
        assert_eq!(err.kind, ParseErrorKind::UnexpectedChar('$'));
    }

    #[test]
    fn rejects_unknown_function() {
        let err = parse("tan(x1)").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnknownFunction("tan".into()));
        assert_eq!(err.offset, 0);
    }

    #[test]
    fn rejects_non_integer_exponent() {
        assert_eq!(parse("x^1.5").unwrap_err().kind, ParseErrorKind::NonIntegerExponent);
        assert_eq!(parse("x^-1").unwrap_err().kind, ParseErrorKind::NonIntegerExponent);
        assert_eq!(parse("x^").unwrap_err().kind, ParseErrorKind::NonIntegerExponent);
    }

    #[test]
    fn scientific_notation() {
        assert_eq!(parse("1.5e-3").unwrap(), Expression::Num(0.0015));
        assert_eq!(parse("2E2").unwrap(), Expression::Num(200.0));
    }

    #[test]
    fn unary_minus_binds_looser_than_power() {
        let e = parse("-x^2").unwrap();
        assert_eq!(
            e,
            Expression::Unary(
                UnaryOp::Neg,
                alloc::boxed::Box::new(Expression::Pow(
                    alloc::boxed::Box::new(Expression::var("x")),
                    2
                ))
            )
        );
    }

    #[test]
    fn trailing_input_rejected() {
        assert_eq!(parse("1 + 2 )").unwrap_err().kind, ParseErrorKind::TrailingInput);
    }
}
