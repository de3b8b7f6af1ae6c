//! Expression trees for vector fields, guards and predicates.
//!
//! The surface grammar is small: `+ - * /`, integer powers `^`, `exp(..)`,
//! numbers and named variables. Trees evaluate in three ways: on points (fast
//! path through a compiled tape), on interval environments, and on truncated
//! Taylor series with interval coefficients (the engine behind validated
//! integration). `Max0` exists only as a programmatic node for clamped
//! control inputs; the parser never produces it.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

use crate::interval::Interval;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("{msg} at {line}:{col}")]
    Parse { msg: String, line: usize, col: usize },
    #[error("division by an interval containing zero")]
    IntervalDivByZero,
    #[error("series division by an interval containing zero")]
    SeriesDivByZero,
    #[error("clamped control is sign-ambiguous; Taylor expansion not applicable")]
    NonSmoothClamp,
    #[error("variable index {0} out of range")]
    BadVarIndex(usize),
}

/// A set of named variables an expression is resolved against. The index of a
/// name is its slot in every evaluation environment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VarSet {
    names: Vec<String>,
}

impl VarSet {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn push(&mut self, name: impl Into<String>) -> usize {
        self.names.push(name.into());
        self.names.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Add(Rc<Expr>, Rc<Expr>),
    Sub(Rc<Expr>, Rc<Expr>),
    Mul(Rc<Expr>, Rc<Expr>),
    Div(Rc<Expr>, Rc<Expr>),
    Neg(Rc<Expr>),
    Exp(Rc<Expr>),
    PowInt(Rc<Expr>, i32),
    Max0(Rc<Expr>),
}

impl Expr {
    pub fn num(x: f64) -> Rc<Expr> {
        Rc::new(Expr::Num(x))
    }

    pub fn var(i: usize) -> Rc<Expr> {
        Rc::new(Expr::Var(i))
    }

    /// Folding constructors: identities with 0 and 1 collapse, so composed
    /// dynamics with zero gains reduce to the plant dynamics exactly.
    pub fn add(a: Rc<Expr>, b: Rc<Expr>) -> Rc<Expr> {
        match (&*a, &*b) {
            (Expr::Num(x), Expr::Num(y)) => Expr::num(x + y),
            (Expr::Num(x), _) if *x == 0.0 => b,
            (_, Expr::Num(y)) if *y == 0.0 => a,
            _ => Rc::new(Expr::Add(a, b)),
        }
    }

    pub fn sub(a: Rc<Expr>, b: Rc<Expr>) -> Rc<Expr> {
        match (&*a, &*b) {
            (Expr::Num(x), Expr::Num(y)) => Expr::num(x - y),
            (_, Expr::Num(y)) if *y == 0.0 => a,
            (Expr::Num(x), _) if *x == 0.0 => Expr::neg(b),
            _ => Rc::new(Expr::Sub(a, b)),
        }
    }

    pub fn mul(a: Rc<Expr>, b: Rc<Expr>) -> Rc<Expr> {
        match (&*a, &*b) {
            (Expr::Num(x), Expr::Num(y)) => Expr::num(x * y),
            (Expr::Num(x), _) if *x == 0.0 => Expr::num(0.0),
            (_, Expr::Num(y)) if *y == 0.0 => Expr::num(0.0),
            (Expr::Num(x), _) if *x == 1.0 => b,
            (_, Expr::Num(y)) if *y == 1.0 => a,
            _ => Rc::new(Expr::Mul(a, b)),
        }
    }

    pub fn div(a: Rc<Expr>, b: Rc<Expr>) -> Rc<Expr> {
        match (&*a, &*b) {
            (Expr::Num(x), _) if *x == 0.0 => Expr::num(0.0),
            (_, Expr::Num(y)) if *y == 1.0 => a,
            _ => Rc::new(Expr::Div(a, b)),
        }
    }

    pub fn neg(a: Rc<Expr>) -> Rc<Expr> {
        match &*a {
            Expr::Num(x) => Expr::num(-x),
            Expr::Neg(inner) => inner.clone(),
            _ => Rc::new(Expr::Neg(a)),
        }
    }

    pub fn exp(a: Rc<Expr>) -> Rc<Expr> {
        Rc::new(Expr::Exp(a))
    }

    pub fn pow_int(a: Rc<Expr>, n: i32) -> Rc<Expr> {
        match n {
            0 => Expr::num(1.0),
            1 => a,
            _ => Rc::new(Expr::PowInt(a, n)),
        }
    }

    pub fn max0(a: Rc<Expr>) -> Rc<Expr> {
        Rc::new(Expr::Max0(a))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(x) if *x == 0.0)
    }

    /// Structural dependence on a variable (after constant folding).
    pub fn depends_on(&self, var: usize) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(i) => *i == var,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.depends_on(var) || b.depends_on(var)
            }
            Expr::Neg(a) | Expr::Exp(a) | Expr::Max0(a) | Expr::PowInt(a, _) => a.depends_on(var),
        }
    }

    /// Symbolic partial derivative with respect to variable `var`.
    pub fn diff(self: &Rc<Expr>, var: usize) -> Rc<Expr> {
        match &**self {
            Expr::Num(_) => Expr::num(0.0),
            Expr::Var(i) => Expr::num(if *i == var { 1.0 } else { 0.0 }),
            Expr::Add(a, b) => Expr::add(a.diff(var), b.diff(var)),
            Expr::Sub(a, b) => Expr::sub(a.diff(var), b.diff(var)),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.diff(var), b.clone()),
                Expr::mul(a.clone(), b.diff(var)),
            ),
            Expr::Div(a, b) => Expr::sub(
                Expr::div(a.diff(var), b.clone()),
                Expr::div(
                    Expr::mul(a.clone(), b.diff(var)),
                    Expr::pow_int(b.clone(), 2),
                ),
            ),
            Expr::Neg(a) => Expr::neg(a.diff(var)),
            Expr::Exp(a) => Expr::mul(self.clone(), a.diff(var)),
            Expr::PowInt(a, n) => Expr::mul(
                Expr::mul(Expr::num(*n as f64), Expr::pow_int(a.clone(), n - 1)),
                a.diff(var),
            ),
            // Not differentiable at 0; callers must rule the clamp out before
            // requesting derivatives.
            Expr::Max0(_) => panic!("diff through clamped control"),
        }
    }

    pub fn eval_point(&self, env: &[f64]) -> f64 {
        match self {
            Expr::Num(x) => *x,
            Expr::Var(i) => env[*i],
            Expr::Add(a, b) => a.eval_point(env) + b.eval_point(env),
            Expr::Sub(a, b) => a.eval_point(env) - b.eval_point(env),
            Expr::Mul(a, b) => a.eval_point(env) * b.eval_point(env),
            Expr::Div(a, b) => a.eval_point(env) / b.eval_point(env),
            Expr::Neg(a) => -a.eval_point(env),
            Expr::Exp(a) => a.eval_point(env).exp(),
            Expr::PowInt(a, n) => a.eval_point(env).powi(*n),
            Expr::Max0(a) => a.eval_point(env).max(0.0),
        }
    }

    pub fn eval_interval(&self, env: &[Interval]) -> Result<Interval, ExprError> {
        match self {
            Expr::Num(x) => Ok(Interval::point(*x)),
            Expr::Var(i) => env.get(*i).copied().ok_or(ExprError::BadVarIndex(*i)),
            Expr::Add(a, b) => Ok(a.eval_interval(env)?.add(&b.eval_interval(env)?)),
            Expr::Sub(a, b) => Ok(a.eval_interval(env)?.sub(&b.eval_interval(env)?)),
            Expr::Mul(a, b) => Ok(a.eval_interval(env)?.mul(&b.eval_interval(env)?)),
            Expr::Div(a, b) => a
                .eval_interval(env)?
                .div(&b.eval_interval(env)?)
                .map_err(|_| ExprError::IntervalDivByZero),
            Expr::Neg(a) => Ok(a.eval_interval(env)?.neg()),
            Expr::Exp(a) => Ok(a.eval_interval(env)?.exp()),
            Expr::PowInt(a, n) => a
                .eval_interval(env)?
                .pow_int(*n)
                .map_err(|_| ExprError::IntervalDivByZero),
            Expr::Max0(a) => Ok(a.eval_interval(env)?.max0()),
        }
    }

    /// Evaluate on truncated Taylor series with interval coefficients; the
    /// result has the same length as the inputs.
    pub fn eval_series(&self, env: &[Series]) -> Result<Series, ExprError> {
        let order = env.first().map(|s| s.len()).unwrap_or(1);
        match self {
            Expr::Num(x) => Ok(Series::constant(Interval::point(*x), order)),
            Expr::Var(i) => env.get(*i).cloned().ok_or(ExprError::BadVarIndex(*i)),
            Expr::Add(a, b) => Ok(a.eval_series(env)?.add(&b.eval_series(env)?)),
            Expr::Sub(a, b) => Ok(a.eval_series(env)?.sub(&b.eval_series(env)?)),
            Expr::Mul(a, b) => Ok(a.eval_series(env)?.mul(&b.eval_series(env)?)),
            Expr::Div(a, b) => a.eval_series(env)?.div(&b.eval_series(env)?),
            Expr::Neg(a) => Ok(a.eval_series(env)?.neg()),
            Expr::Exp(a) => Ok(a.eval_series(env)?.exp()),
            Expr::PowInt(a, n) => a.eval_series(env)?.pow_int(*n),
            Expr::Max0(a) => {
                let s = a.eval_series(env)?;
                let head = s.coeff(0);
                if head.lo() > 0.0 {
                    Ok(s)
                } else if head.hi() <= 0.0 {
                    Ok(Series::constant(Interval::point(0.0), order))
                } else {
                    Err(ExprError::NonSmoothClamp)
                }
            }
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, vars: Option<&VarSet>, prec: u8) -> fmt::Result {
        let my_prec = match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::PowInt(..) => 4,
            _ => 5,
        };
        let need_parens = my_prec < prec;
        if need_parens {
            write!(f, "(")?;
        }
        match self {
            Expr::Num(x) => write!(f, "{x}")?,
            Expr::Var(i) => match vars {
                Some(vs) if *i < vs.len() => write!(f, "{}", vs.name(*i))?,
                _ => write!(f, "v{i}")?,
            },
            Expr::Add(a, b) => {
                a.fmt_prec(f, vars, 1)?;
                write!(f, " + ")?;
                b.fmt_prec(f, vars, 2)?;
            }
            Expr::Sub(a, b) => {
                a.fmt_prec(f, vars, 1)?;
                write!(f, " - ")?;
                b.fmt_prec(f, vars, 2)?;
            }
            Expr::Mul(a, b) => {
                a.fmt_prec(f, vars, 2)?;
                write!(f, " * ")?;
                b.fmt_prec(f, vars, 3)?;
            }
            Expr::Div(a, b) => {
                a.fmt_prec(f, vars, 2)?;
                write!(f, " / ")?;
                b.fmt_prec(f, vars, 3)?;
            }
            Expr::Neg(a) => {
                write!(f, "-")?;
                a.fmt_prec(f, vars, 3)?;
            }
            Expr::Exp(a) => {
                write!(f, "exp(")?;
                a.fmt_prec(f, vars, 0)?;
                write!(f, ")")?;
            }
            Expr::PowInt(a, n) => {
                a.fmt_prec(f, vars, 5)?;
                write!(f, "^{n}")?;
            }
            Expr::Max0(a) => {
                write!(f, "max0(")?;
                a.fmt_prec(f, vars, 0)?;
                write!(f, ")")?;
            }
        }
        if need_parens {
            write!(f, ")")?;
        }
        Ok(())
    }

    pub fn display<'a>(&'a self, vars: &'a VarSet) -> ExprDisplay<'a> {
        ExprDisplay { expr: self, vars }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, None, 0)
    }
}

pub struct ExprDisplay<'a> {
    expr: &'a Expr,
    vars: &'a VarSet,
}

impl fmt::Display for ExprDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.expr.fmt_prec(f, Some(self.vars), 0)
    }
}

// ---------------------------------------------------------------------------
// Taylor series with interval coefficients
// ---------------------------------------------------------------------------

/// Truncated Taylor series: coefficient `k` multiplies `s^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    coeffs: Vec<Interval>,
}

impl Series {
    pub fn from_coeffs(coeffs: Vec<Interval>) -> Self {
        debug_assert!(!coeffs.is_empty());
        Self { coeffs }
    }

    pub fn constant(value: Interval, len: usize) -> Self {
        let mut coeffs = vec![Interval::point(0.0); len.max(1)];
        coeffs[0] = value;
        Self { coeffs }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeff(&self, k: usize) -> Interval {
        self.coeffs
            .get(k)
            .copied()
            .unwrap_or_else(|| Interval::point(0.0))
    }

    pub fn coeffs(&self) -> &[Interval] {
        &self.coeffs
    }

    pub fn add(&self, other: &Series) -> Series {
        let n = self.len().max(other.len());
        let coeffs = (0..n).map(|k| self.coeff(k).add(&other.coeff(k))).collect();
        Series { coeffs }
    }

    pub fn sub(&self, other: &Series) -> Series {
        let n = self.len().max(other.len());
        let coeffs = (0..n).map(|k| self.coeff(k).sub(&other.coeff(k))).collect();
        Series { coeffs }
    }

    pub fn neg(&self) -> Series {
        Series {
            coeffs: self.coeffs.iter().map(|c| c.neg()).collect(),
        }
    }

    /// Truncated Cauchy product.
    pub fn mul(&self, other: &Series) -> Series {
        let n = self.len().max(other.len());
        let mut coeffs = vec![Interval::point(0.0); n];
        for (k, c) in coeffs.iter_mut().enumerate() {
            let mut acc = Interval::point(0.0);
            for j in 0..=k {
                acc = acc.add(&self.coeff(j).mul(&other.coeff(k - j)));
            }
            *c = acc;
        }
        Series { coeffs }
    }

    /// Division recurrence: `h_k = (f_k - sum_{j=1..k} g_j h_{k-j}) / g_0`.
    pub fn div(&self, other: &Series) -> Result<Series, ExprError> {
        let g0 = other.coeff(0);
        if g0.contains(0.0) {
            return Err(ExprError::SeriesDivByZero);
        }
        let n = self.len().max(other.len());
        let mut h: Vec<Interval> = Vec::with_capacity(n);
        for k in 0..n {
            let mut acc = self.coeff(k);
            for j in 1..=k {
                acc = acc.sub(&other.coeff(j).mul(&h[k - j]));
            }
            h.push(acc.div(&g0).expect("g0 checked nonzero"));
        }
        Ok(Series { coeffs: h })
    }

    /// Exponential recurrence: `e_k = (1/k) sum_{j=1..k} j f_j e_{k-j}`.
    pub fn exp(&self) -> Series {
        let n = self.len();
        let mut e: Vec<Interval> = Vec::with_capacity(n);
        e.push(self.coeff(0).exp());
        for k in 1..n {
            let mut acc = Interval::point(0.0);
            for j in 1..=k {
                acc = acc.add(&self.coeff(j).scale(j as f64).mul(&e[k - j]));
            }
            e.push(acc.scale(1.0 / k as f64));
        }
        Series { coeffs: e }
    }

    pub fn pow_int(&self, n: i32) -> Result<Series, ExprError> {
        if n == 0 {
            return Ok(Series::constant(Interval::point(1.0), self.len()));
        }
        if n < 0 {
            let p = self.pow_int(-n)?;
            return Series::constant(Interval::point(1.0), self.len()).div(&p);
        }
        let mut acc = Series::constant(Interval::point(1.0), self.len());
        for _ in 0..n {
            acc = acc.mul(self);
        }
        Ok(acc)
    }

    /// Evaluate the polynomial at `s` by Horner's rule (interval).
    pub fn eval_at(&self, s: &Interval) -> Interval {
        let mut acc = Interval::point(0.0);
        for c in self.coeffs.iter().rev() {
            acc = acc.mul(s).add(c);
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Tokenizer<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
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
    Eof,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    offset: usize,
}

impl<'a> Tokenizer<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src,
            bytes: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn next(&mut self) -> Result<Spanned, ExprError> {
        self.skip_ws();
        let offset = self.pos;
        if self.pos >= self.bytes.len() {
            return Ok(Spanned {
                tok: Tok::Eof,
                offset,
            });
        }
        let c = self.bytes[self.pos];
        let tok = match c {
            b'+' => {
                self.pos += 1;
                Tok::Plus
            }
            b'-' => {
                self.pos += 1;
                Tok::Minus
            }
            b'*' => {
                self.pos += 1;
                Tok::Star
            }
            b'/' => {
                self.pos += 1;
                Tok::Slash
            }
            b'^' => {
                self.pos += 1;
                Tok::Caret
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b'0'..=b'9' | b'.' => {
                let start = self.pos;
                while self.pos < self.bytes.len()
                    && (self.bytes[self.pos].is_ascii_digit() || self.bytes[self.pos] == b'.')
                {
                    self.pos += 1;
                }
                // Scientific notation.
                if self.pos < self.bytes.len()
                    && (self.bytes[self.pos] == b'e' || self.bytes[self.pos] == b'E')
                {
                    let mut probe = self.pos + 1;
                    if probe < self.bytes.len()
                        && (self.bytes[probe] == b'+' || self.bytes[probe] == b'-')
                    {
                        probe += 1;
                    }
                    if probe < self.bytes.len() && self.bytes[probe].is_ascii_digit() {
                        self.pos = probe;
                        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit()
                        {
                            self.pos += 1;
                        }
                    }
                }
                let text = &self.src[start..self.pos];
                let value: f64 = text.parse().map_err(|_| {
                    parse_err(self.src, start, format!("invalid number `{text}`"))
                })?;
                Tok::Num(value)
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.bytes.len()
                    && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                Tok::Ident(self.src[start..self.pos].to_string())
            }
            other => {
                return Err(parse_err(
                    self.src,
                    offset,
                    format!("unexpected character `{}`", other as char),
                ))
            }
        };
        Ok(Spanned { tok, offset })
    }
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let mut line = 1;
    let mut col = 1;
    for (i, c) in src.char_indices() {
        if i >= offset {
            break;
        }
        if c == '\n' {
            line += 1;
            col = 1;
        } else {
            col += 1;
        }
    }
    (line, col)
}

fn parse_err(src: &str, offset: usize, msg: String) -> ExprError {
    let (line, col) = line_col(src, offset);
    ExprError::Parse { msg, line, col }
}

struct Parser<'a> {
    src: &'a str,
    toks: Vec<Spanned>,
    idx: usize,
    vars: &'a VarSet,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Spanned {
        &self.toks[self.idx]
    }

    fn bump(&mut self) -> Spanned {
        let t = self.toks[self.idx].clone();
        if self.idx + 1 < self.toks.len() {
            self.idx += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ExprError> {
        let t = self.bump();
        if t.tok == tok {
            Ok(())
        } else {
            Err(parse_err(self.src, t.offset, format!("expected {what}")))
        }
    }

    fn expr(&mut self) -> Result<Rc<Expr>, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek().tok {
                Tok::Plus => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = Expr::add(lhs, rhs);
                }
                Tok::Minus => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = Expr::sub(lhs, rhs);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Rc<Expr>, ExprError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek().tok {
                Tok::Star => {
                    self.bump();
                    let rhs = self.factor()?;
                    lhs = Expr::mul(lhs, rhs);
                }
                Tok::Slash => {
                    self.bump();
                    let rhs = self.factor()?;
                    lhs = Expr::div(lhs, rhs);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Rc<Expr>, ExprError> {
        let base = self.unary()?;
        if self.peek().tok == Tok::Caret {
            self.bump();
            let t = self.bump();
            let n = match t.tok {
                Tok::Num(x) if x.fract() == 0.0 && x.abs() <= i32::MAX as f64 => x as i32,
                Tok::Minus => {
                    let t2 = self.bump();
                    match t2.tok {
                        Tok::Num(x) if x.fract() == 0.0 && x.abs() <= i32::MAX as f64 => {
                            -(x as i32)
                        }
                        _ => {
                            return Err(parse_err(
                                self.src,
                                t2.offset,
                                "expected integer exponent after `^`".into(),
                            ))
                        }
                    }
                }
                _ => {
                    return Err(parse_err(
                        self.src,
                        t.offset,
                        "expected integer exponent after `^`".into(),
                    ))
                }
            };
            return Ok(Expr::pow_int(base, n));
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<Rc<Expr>, ExprError> {
        if self.peek().tok == Tok::Minus {
            self.bump();
            let inner = self.unary()?;
            return Ok(Expr::neg(inner));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Rc<Expr>, ExprError> {
        let t = self.bump();
        match t.tok {
            Tok::Num(x) => Ok(Expr::num(x)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if self.peek().tok == Tok::LParen {
                    if name != "exp" {
                        return Err(parse_err(
                            self.src,
                            t.offset,
                            format!("unknown function `{name}` (only `exp` is supported)"),
                        ));
                    }
                    self.bump();
                    let arg = self.expr()?;
                    self.expect(Tok::RParen, "`)`")?;
                    return Ok(Expr::exp(arg));
                }
                match self.vars.index_of(&name) {
                    Some(i) => Ok(Expr::var(i)),
                    None => Err(parse_err(
                        self.src,
                        t.offset,
                        format!("unknown identifier `{name}`"),
                    )),
                }
            }
            Tok::Eof => Err(parse_err(self.src, t.offset, "unexpected end of input".into())),
            _ => Err(parse_err(self.src, t.offset, "unexpected token".into())),
        }
    }
}

/// Parse an expression string against a variable set. Unknown identifiers are
/// rejected with their source position.
pub fn parse(src: &str, vars: &VarSet) -> Result<Rc<Expr>, ExprError> {
    let mut tz = Tokenizer::new(src);
    let mut toks = Vec::new();
    loop {
        let t = tz.next()?;
        let eof = t.tok == Tok::Eof;
        toks.push(t);
        if eof {
            break;
        }
    }
    let mut p = Parser {
        src,
        toks,
        idx: 0,
        vars,
    };
    let e = p.expr()?;
    let t = p.peek();
    if t.tok != Tok::Eof {
        return Err(parse_err(src, t.offset, "trailing input after expression".into()));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Compiled tape for fast point evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum TapeOp {
    Const { dst: u32, value: f64 },
    Load { dst: u32, var: u32 },
    Add { dst: u32, a: u32, b: u32 },
    Sub { dst: u32, a: u32, b: u32 },
    Mul { dst: u32, a: u32, b: u32 },
    Div { dst: u32, a: u32, b: u32 },
    Neg { dst: u32, a: u32 },
    Exp { dst: u32, a: u32 },
    PowInt { dst: u32, a: u32, n: i32 },
    Max0 { dst: u32, a: u32 },
}

/// Flat evaluator for a batch of expressions over a shared environment.
/// Shared subtrees (by `Rc` identity) are computed once.
#[derive(Debug, Clone)]
pub struct Tape {
    ops: Vec<TapeOp>,
    n_slots: usize,
    outputs: Vec<u32>,
}

impl Tape {
    pub fn compile(exprs: &[Rc<Expr>]) -> Tape {
        let mut b = TapeBuilder {
            ops: Vec::new(),
            next_slot: 0,
            cache: HashMap::new(),
        };
        let outputs = exprs.iter().map(|e| b.emit(e)).collect();
        Tape {
            ops: b.ops,
            n_slots: b.next_slot as usize,
            outputs,
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Evaluate all outputs; `scratch` is reused across calls.
    pub fn eval(&self, env: &[f64], scratch: &mut Vec<f64>, out: &mut [f64]) {
        scratch.resize(self.n_slots, 0.0);
        let s = scratch.as_mut_slice();
        for op in &self.ops {
            match *op {
                TapeOp::Const { dst, value } => s[dst as usize] = value,
                TapeOp::Load { dst, var } => s[dst as usize] = env[var as usize],
                TapeOp::Add { dst, a, b } => s[dst as usize] = s[a as usize] + s[b as usize],
                TapeOp::Sub { dst, a, b } => s[dst as usize] = s[a as usize] - s[b as usize],
                TapeOp::Mul { dst, a, b } => s[dst as usize] = s[a as usize] * s[b as usize],
                TapeOp::Div { dst, a, b } => s[dst as usize] = s[a as usize] / s[b as usize],
                TapeOp::Neg { dst, a } => s[dst as usize] = -s[a as usize],
                TapeOp::Exp { dst, a } => s[dst as usize] = s[a as usize].exp(),
                TapeOp::PowInt { dst, a, n } => s[dst as usize] = s[a as usize].powi(n),
                TapeOp::Max0 { dst, a } => s[dst as usize] = s[a as usize].max(0.0),
            }
        }
        for (i, slot) in self.outputs.iter().enumerate() {
            out[i] = s[*slot as usize];
        }
    }
}

struct TapeBuilder {
    ops: Vec<TapeOp>,
    next_slot: u32,
    cache: HashMap<*const Expr, u32>,
}

impl TapeBuilder {
    fn alloc(&mut self) -> u32 {
        let s = self.next_slot;
        self.next_slot += 1;
        s
    }

    fn emit(&mut self, e: &Rc<Expr>) -> u32 {
        let key = Rc::as_ptr(e);
        if let Some(&slot) = self.cache.get(&key) {
            return slot;
        }
        let slot = match &**e {
            Expr::Num(x) => {
                let dst = self.alloc();
                self.ops.push(TapeOp::Const { dst, value: *x });
                dst
            }
            Expr::Var(i) => {
                let dst = self.alloc();
                self.ops.push(TapeOp::Load {
                    dst,
                    var: *i as u32,
                });
                dst
            }
            Expr::Add(a, b) => {
                let (a, b) = (self.emit(a), self.emit(b));
                let dst = self.alloc();
                self.ops.push(TapeOp::Add { dst, a, b });
                dst
            }
            Expr::Sub(a, b) => {
                let (a, b) = (self.emit(a), self.emit(b));
                let dst = self.alloc();
                self.ops.push(TapeOp::Sub { dst, a, b });
                dst
            }
            Expr::Mul(a, b) => {
                let (a, b) = (self.emit(a), self.emit(b));
                let dst = self.alloc();
                self.ops.push(TapeOp::Mul { dst, a, b });
                dst
            }
            Expr::Div(a, b) => {
                let (a, b) = (self.emit(a), self.emit(b));
                let dst = self.alloc();
                self.ops.push(TapeOp::Div { dst, a, b });
                dst
            }
            Expr::Neg(a) => {
                let a = self.emit(a);
                let dst = self.alloc();
                self.ops.push(TapeOp::Neg { dst, a });
                dst
            }
            Expr::Exp(a) => {
                let a = self.emit(a);
                let dst = self.alloc();
                self.ops.push(TapeOp::Exp { dst, a });
                dst
            }
            Expr::PowInt(a, n) => {
                let a = self.emit(a);
                let dst = self.alloc();
                self.ops.push(TapeOp::PowInt { dst, a, n: *n });
                dst
            }
            Expr::Max0(a) => {
                let a = self.emit(a);
                let dst = self.alloc();
                self.ops.push(TapeOp::Max0 { dst, a });
                dst
            }
        };
        self.cache.insert(key, slot);
        slot
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars() -> VarSet {
        VarSet::new(["x", "y", "t"])
    }

    #[test]
    fn parse_and_eval() {
        let vs = vars();
        let e = parse("2*x + y^2 - exp(-t/10)", &vs).unwrap();
        let v = e.eval_point(&[3.0, 4.0, 0.0]);
        assert!((v - (6.0 + 16.0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn parse_unknown_identifier_positions() {
        let vs = vars();
        let err = parse("x + foo*2", &vs).unwrap_err();
        match err {
            ExprError::Parse { msg, line, col } => {
                assert!(msg.contains("foo"));
                assert_eq!((line, col), (1, 5));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_unknown_function() {
        let vs = vars();
        let err = parse("sin(x)", &vs).unwrap_err();
        assert!(matches!(err, ExprError::Parse { .. }));
    }

    #[test]
    fn parse_scientific_notation() {
        let vs = vars();
        let e = parse("-6.02e-2 * x", &vs).unwrap();
        assert!((e.eval_point(&[1.0, 0.0, 0.0]) + 6.02e-2).abs() < 1e-18);
    }

    #[test]
    fn interval_eval_contains_point_eval() {
        let vs = vars();
        let e = parse("x*y - y/(1 + x^2) + exp(x/5)", &vs).unwrap();
        let env_pt = [0.7, -1.3, 0.0];
        let v = e.eval_point(&env_pt);
        let env_iv = [
            Interval::of(0.5, 1.0),
            Interval::of(-2.0, -1.0),
            Interval::point(0.0),
        ];
        let iv = e.eval_interval(&env_iv).unwrap();
        assert!(iv.contains(v), "{v} not in {iv}");
    }

    #[test]
    fn diff_product_rule() {
        let vs = vars();
        let e = parse("x^2 * y", &vs).unwrap();
        let d = e.diff(0);
        // d/dx = 2*x*y
        let v = d.eval_point(&[3.0, 5.0, 0.0]);
        assert!((v - 30.0).abs() < 1e-12);
    }

    #[test]
    fn diff_exp_chain() {
        let vs = vars();
        let e = parse("exp(-x/10)", &vs).unwrap();
        let d = e.diff(0);
        let v = d.eval_point(&[0.0, 0.0, 0.0]);
        assert!((v + 0.1).abs() < 1e-12);
    }

    #[test]
    fn series_exp_matches_taylor() {
        // exp(s) around 0: coefficients 1/k!
        let vs = VarSet::new(["s"]);
        let e = parse("exp(s)", &vs).unwrap();
        let s = Series::from_coeffs(vec![
            Interval::point(0.0),
            Interval::point(1.0),
            Interval::point(0.0),
            Interval::point(0.0),
            Interval::point(0.0),
        ]);
        let r = e.eval_series(&[s]).unwrap();
        let expected = [1.0, 1.0, 0.5, 1.0 / 6.0, 1.0 / 24.0];
        for (k, want) in expected.iter().enumerate() {
            assert!(
                r.coeff(k).contains(*want) && r.coeff(k).width() < 1e-12,
                "coeff {k}: {} vs {}",
                r.coeff(k),
                want
            );
        }
    }

    #[test]
    fn series_div_recurrence() {
        // 1/(1-s) = 1 + s + s^2 + ...
        let one = Series::constant(Interval::point(1.0), 5);
        let mut denom = Series::constant(Interval::point(1.0), 5);
        denom = denom.sub(&Series::from_coeffs(vec![
            Interval::point(0.0),
            Interval::point(1.0),
            Interval::point(0.0),
            Interval::point(0.0),
            Interval::point(0.0),
        ]));
        let q = one.div(&denom).unwrap();
        for k in 0..5 {
            assert!(q.coeff(k).contains(1.0), "coeff {k} = {}", q.coeff(k));
        }
    }

    #[test]
    fn tape_matches_tree_eval() {
        let vs = vars();
        let e1 = parse("x*y + exp(-t/40)*x", &vs).unwrap();
        let e2 = parse("y - x^3", &vs).unwrap();
        let tape = Tape::compile(&[e1.clone(), e2.clone()]);
        let env = [1.25, -0.5, 7.0];
        let mut scratch = Vec::new();
        let mut out = [0.0; 2];
        tape.eval(&env, &mut scratch, &mut out);
        assert!((out[0] - e1.eval_point(&env)).abs() < 1e-15);
        assert!((out[1] - e2.eval_point(&env)).abs() < 1e-15);
    }

    #[test]
    fn zero_gain_folding() {
        let vs = vars();
        let x = Expr::var(0);
        let u = Expr::add(
            Expr::mul(Expr::num(0.0), x.clone()),
            Expr::mul(Expr::num(0.0), Expr::var(1)),
        );
        assert!(u.is_zero());
    }
}
