//! A tiny expression language for the data `f` and `g`.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' power)?
//! atom    := number | x1..xN | r | call | '(' expr ')'
//! call    := (sin | cos | exp | abs) '(' expr ')'
//!          | (min | max) '(' expr (',' expr)+ ')'
//! ```
//!
//! `r` is the Euclidean norm of the point. Divisors must be constant and
//! nonzero and exponents constant nonnegative integers, both checked at parse
//! time, so every parsed field is continuous on the whole space.

use std::fmt;

use thiserror::Error;

const MAX_EXPONENT: f64 = 1024.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("`{name}` at byte {offset} takes {expected} argument(s), got {found}")]
    Arity {
        name: String,
        expected: &'static str,
        found: usize,
        offset: usize,
    },
    #[error("division at byte {offset} must be by a nonzero constant")]
    Division { offset: usize },
    #[error("exponent at byte {offset} must be a constant integer in 0..=1024")]
    Exponent { offset: usize },
    #[error("point has dimension {found}, field expects {expected}")]
    Dimension { expected: usize, found: usize },
}

impl ExprError {
    /// Byte offset into the source, when the error is positional.
    pub fn offset(&self) -> Option<usize> {
        match self {
            ExprError::Syntax { offset, .. }
            | ExprError::UnknownIdentifier { offset, .. }
            | ExprError::Arity { offset, .. }
            | ExprError::Division { offset }
            | ExprError::Exponent { offset } => Some(*offset),
            ExprError::Dimension { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Abs,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// Zero-based coordinate index.
    Var(usize),
    Radius,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    /// Division by a folded nonzero constant.
    Div(Box<Expr>, f64),
    /// Integer power with a folded exponent.
    Pow(Box<Expr>, u32),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(i) => x[*i],
            Expr::Radius => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Expr::Neg(e) => -e.eval(x),
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, d) => a.eval(x) / d,
            Expr::Pow(a, k) => a.eval(x).powi(*k as i32),
            Expr::Call(f, args) => {
                let first = args[0].eval(x);
                match f {
                    Func::Sin => first.sin(),
                    Func::Cos => first.cos(),
                    Func::Exp => first.exp(),
                    Func::Abs => first.abs(),
                    Func::Min => args[1..].iter().fold(first, |m, a| m.min(a.eval(x))),
                    Func::Max => args[1..].iter().fold(first, |m, a| m.max(a.eval(x))),
                }
            }
        }
    }

    /// Value of a variable-free expression.
    pub fn constant(&self) -> Option<f64> {
        match self {
            Expr::Num(v) => Some(*v),
            Expr::Var(_) | Expr::Radius => None,
            Expr::Neg(e) => e.constant().map(|v| -v),
            Expr::Add(a, b) => Some(a.constant()? + b.constant()?),
            Expr::Sub(a, b) => Some(a.constant()? - b.constant()?),
            Expr::Mul(a, b) => Some(a.constant()? * b.constant()?),
            Expr::Div(a, d) => a.constant().map(|v| v / d),
            Expr::Pow(a, k) => a.constant().map(|v| v.powi(*k as i32)),
            Expr::Call(_, args) => {
                if args.iter().all(|a| a.constant().is_some()) {
                    Some(self.eval(&[]))
                } else {
                    None
                }
            }
        }
    }
}

/// Fully parenthesized canonical form; re-parses to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Radius => write!(f, "r"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, d) if *d < 0.0 => write!(f, "({a} / (-{:?}))", -d),
            Expr::Div(a, d) => write!(f, "({a} / {d:?})"),
            Expr::Pow(a, k) => write!(f, "({a} ^ {k})"),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn next(&mut self) -> Result<(Tok, usize), ExprError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = bytes.get(self.pos) else {
            return Ok((Tok::End, start));
        };
        if c.is_ascii_digit() || c == b'.' {
            let mut end = self.pos;
            while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
                end += 1;
            }
            if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
                let mut k = end + 1;
                if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                    k += 1;
                }
                if k < bytes.len() && bytes[k].is_ascii_digit() {
                    while k < bytes.len() && bytes[k].is_ascii_digit() {
                        k += 1;
                    }
                    end = k;
                }
            }
            let text = &self.src[start..end];
            let value = text.parse::<f64>().map_err(|_| ExprError::Syntax {
                offset: start,
                message: format!("malformed number `{text}`"),
            })?;
            self.pos = end;
            return Ok((Tok::Num(value), start));
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let mut end = self.pos;
            while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                end += 1;
            }
            self.pos = end;
            return Ok((Tok::Ident(self.src[start..end].to_string()), start));
        }
        if b"+-*/^(),".contains(&c) {
            self.pos += 1;
            return Ok((Tok::Op(c as char), start));
        }
        let ch = self.src[start..].chars().next().unwrap_or('?');
        Err(ExprError::Syntax {
            offset: start,
            message: format!("unexpected character `{ch}`"),
        })
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    tok: Tok,
    offset: usize,
    dim: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, dim: usize) -> Result<Self, ExprError> {
        let mut lexer = Lexer { src, pos: 0 };
        let (tok, offset) = lexer.next()?;
        Ok(Parser {
            lexer,
            tok,
            offset,
            dim,
        })
    }

    fn bump(&mut self) -> Result<(), ExprError> {
        let (tok, offset) = self.lexer.next()?;
        self.tok = tok;
        self.offset = offset;
        Ok(())
    }

    fn expect(&mut self, op: char) -> Result<(), ExprError> {
        if self.tok == Tok::Op(op) {
            self.bump()
        } else {
            Err(self.unexpected(&format!("expected `{op}`")))
        }
    }

    fn unexpected(&self, what: &str) -> ExprError {
        let found = match &self.tok {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Op(c) => format!("`{c}`"),
            Tok::End => "end of input".to_string(),
        };
        ExprError::Syntax {
            offset: self.offset,
            message: format!("{what}, found {found}"),
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.tok {
                Tok::Op('+') => {
                    self.bump()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Op('-') => {
                    self.bump()?;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.tok {
                Tok::Op('*') => {
                    self.bump()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Tok::Op('/') => {
                    let at = self.offset;
                    self.bump()?;
                    let divisor = self.unary()?;
                    match divisor.constant() {
                        Some(d) if d != 0.0 && d.is_finite() => {
                            lhs = Expr::Div(Box::new(lhs), d);
                        }
                        _ => return Err(ExprError::Division { offset: at }),
                    }
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.tok == Tok::Op('-') {
            self.bump()?;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.tok != Tok::Op('^') {
            return Ok(base);
        }
        let at = self.offset;
        self.bump()?;
        let exponent = self.unary()?;
        match exponent.constant() {
            Some(k) if k.fract() == 0.0 && (0.0..=MAX_EXPONENT).contains(&k) => {
                Ok(Expr::Pow(Box::new(base), k as u32))
            }
            _ => Err(ExprError::Exponent { offset: at }),
        }
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let at = self.offset;
        match self.tok.clone() {
            Tok::Num(v) => {
                self.bump()?;
                Ok(Expr::Num(v))
            }
            Tok::Op('(') => {
                self.bump()?;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump()?;
                if let Some(func) = Func::lookup(&name) {
                    return self.call(func, name, at);
                }
                if name == "r" {
                    return Ok(Expr::Radius);
                }
                if let Some(idx) = name.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
                    if (1..=self.dim).contains(&idx) && !name[1..].starts_with('0') {
                        return Ok(Expr::Var(idx - 1));
                    }
                }
                Err(ExprError::UnknownIdentifier { name, offset: at })
            }
            _ => Err(self.unexpected("expected a number, variable, call or `(`")),
        }
    }

    fn call(&mut self, func: Func, name: String, at: usize) -> Result<Expr, ExprError> {
        self.expect('(')?;
        let mut args = vec![self.expr()?];
        while self.tok == Tok::Op(',') {
            self.bump()?;
            args.push(self.expr()?);
        }
        self.expect(')')?;
        let (ok, expected) = match func {
            Func::Min | Func::Max => (args.len() >= 2, "at least 2"),
            _ => (args.len() == 1, "1"),
        };
        if !ok {
            return Err(ExprError::Arity {
                name,
                expected,
                found: args.len(),
                offset: at,
            });
        }
        Ok(Expr::Call(func, args))
    }
}

/// A parsed scalar function on `R^N`.
#[derive(Debug, Clone)]
pub struct ScalarField {
    source: String,
    ast: Expr,
    dim: usize,
}

/// Two fields are equal when their trees and dimensions agree, whatever the
/// source spelling.
impl PartialEq for ScalarField {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.ast == other.ast
    }
}

impl ScalarField {
    pub fn parse(text: &str, dim: usize) -> Result<Self, ExprError> {
        let mut p = Parser::new(text, dim)?;
        let ast = p.expr()?;
        if p.tok != Tok::End {
            return Err(p.unexpected("expected an operator or end of input"));
        }
        Ok(ScalarField {
            source: text.to_string(),
            ast,
            dim,
        })
    }

    /// The constant field `c`.
    pub fn constant(c: f64, dim: usize) -> Self {
        let ast = if c < 0.0 {
            Expr::Neg(Box::new(Expr::Num(-c)))
        } else {
            Expr::Num(c)
        };
        ScalarField {
            source: format!("{c:?}"),
            ast,
            dim,
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn ast(&self) -> &Expr {
        &self.ast
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Canonical fully parenthesized text.
    pub fn canonical(&self) -> String {
        self.ast.to_string()
    }

    /// The value when the field does not depend on the point.
    pub fn constant_value(&self) -> Option<f64> {
        self.ast.constant()
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, ExprError> {
        if x.len() != self.dim {
            return Err(ExprError::Dimension {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(self.ast.eval(x))
    }

    /// Unchecked [`ScalarField::eval`] for hot loops.
    #[inline]
    pub fn at(&self, x: &[f64]) -> f64 {
        self.ast.eval(x)
    }

    /// Returns a field equal to `self + c`.
    pub fn shifted(&self, c: f64) -> Self {
        ScalarField {
            source: format!("({}) + {c:?}", self.source),
            ast: Expr::Add(Box::new(self.ast.clone()), Box::new(Expr::Num(c))),
            dim: self.dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(src: &str, x: &[f64]) -> f64 {
        ScalarField::parse(src, x.len()).unwrap().eval(x).unwrap()
    }

    #[test]
    fn examples() {
        assert_eq!(eval("1", &[0.0, 0.0]), 1.0);
        assert!(eval("1 - r^2", &[0.6, 0.8]).abs() < 1e-15);
        assert_eq!(eval("max(x1, x2*x2)", &[0.5, 0.9]), 0.81);
        assert_eq!(eval("x1+x2", &[1.0, 2.0]), 3.0);
        assert_eq!(eval("exp(0)", &[0.0]), 1.0);
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval("2+3*4", &[0.0]), 14.0);
        assert_eq!(eval("-2^2", &[0.0]), -4.0);
        assert_eq!(eval("2^3^2", &[0.0]), 512.0);
        assert_eq!(eval("8 - 3 - 2", &[0.0]), 3.0);
        assert_eq!(eval("8 / 4 / 2", &[0.0]), 1.0);
        assert_eq!(eval(" ( 1 + 2 ) * 3 ", &[0.0]), 9.0);
        assert_eq!(eval("min(3, 1, 2)", &[0.0]), 1.0);
        assert_eq!(eval("x1 / (2*2)", &[2.0]), 0.5);
        assert_eq!(eval("1e-1 * 10", &[0.0]), 1.0);
    }

    #[test]
    fn errors_carry_offsets() {
        let e = ScalarField::parse("x1 + x3", 2).unwrap_err();
        assert_eq!(
            e,
            ExprError::UnknownIdentifier {
                name: "x3".into(),
                offset: 5
            }
        );
        assert!(matches!(
            ScalarField::parse("x1 / x2", 2),
            Err(ExprError::Division { offset: 3 })
        ));
        assert!(matches!(
            ScalarField::parse("x1 / 0", 2),
            Err(ExprError::Division { .. })
        ));
        assert!(matches!(
            ScalarField::parse("x1 ^ 0.5", 2),
            Err(ExprError::Exponent { offset: 3 })
        ));
        assert!(matches!(
            ScalarField::parse("x1 ^ x2", 2),
            Err(ExprError::Exponent { .. })
        ));
        assert!(matches!(
            ScalarField::parse("2 ^ -1", 1),
            Err(ExprError::Exponent { .. })
        ));
        assert!(matches!(
            ScalarField::parse("sin(x1, x2)", 2),
            Err(ExprError::Arity { offset: 0, .. })
        ));
        assert!(matches!(
            ScalarField::parse("max(x1)", 2),
            Err(ExprError::Arity { .. })
        ));
        assert!(matches!(
            ScalarField::parse("1 +", 1),
            Err(ExprError::Syntax { offset: 3, .. })
        ));
        assert!(matches!(
            ScalarField::parse("(1", 1),
            Err(ExprError::Syntax { .. })
        ));
        assert!(matches!(
            ScalarField::parse("1 $ 2", 1),
            Err(ExprError::Syntax { offset: 2, .. })
        ));
        assert!(matches!(
            ScalarField::parse("x0", 2),
            Err(ExprError::UnknownIdentifier { .. })
        ));
        assert!(matches!(
            ScalarField::parse("foo(1)", 2),
            Err(ExprError::UnknownIdentifier { .. })
        ));
    }

    #[test]
    fn eval_checks_dimension() {
        let f = ScalarField::parse("x1", 2).unwrap();
        assert_eq!(
            f.eval(&[1.0]),
            Err(ExprError::Dimension {
                expected: 2,
                found: 1
            })
        );
    }

    #[test]
    fn canonical_form_reparses_to_same_tree() {
        for src in ["-2^2", "x1/(-4) + r", "max(x1, -x2) * 2^3^2", "-(1.5)", "1e-20*x2"] {
            let f = ScalarField::parse(src, 2).unwrap();
            let g = ScalarField::parse(&f.canonical(), 2).unwrap();
            assert_eq!(f, g, "{src} -> {}", f.canonical());
        }
    }

    #[test]
    fn constants_are_detected() {
        assert_eq!(ScalarField::parse("-1", 2).unwrap().constant_value(), Some(-1.0));
        assert_eq!(ScalarField::parse("cos(0)*2", 2).unwrap().constant_value(), Some(2.0));
        assert_eq!(ScalarField::parse("x1*0", 2).unwrap().constant_value(), None);
        assert_eq!(ScalarField::constant(-0.5, 2).constant_value(), Some(-0.5));
    }
}
