//! Scalar expressions over named parameters (`"k/tau"`, `"exp(-a*b)"`).
//!
//! Expressions are kept lightly simplified by the constructors so that
//! symbolic derivatives of block parameters stay readable and structural
//! zeros are visible to the diagram pruner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::elementary::{ElementaryFn, Fault};
use crate::tape::{NodeId, TapeBuilder};

/// Parameter name -> value.
pub type ParamValues = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("parse error at offset {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("{func} failed at {value}: {fault}")]
    Eval { func: String, value: f64, fault: Fault },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamExpr {
    Const(f64),
    Param(String),
    Neg(Box<ParamExpr>),
    Add(Box<ParamExpr>, Box<ParamExpr>),
    Sub(Box<ParamExpr>, Box<ParamExpr>),
    Mul(Box<ParamExpr>, Box<ParamExpr>),
    Div(Box<ParamExpr>, Box<ParamExpr>),
    Apply(ElementaryFn, Box<ParamExpr>),
}

use ParamExpr as E;

impl From<f64> for ParamExpr {
    fn from(c: f64) -> Self {
        E::Const(c)
    }
}

impl ParamExpr {
    pub fn c(v: f64) -> ParamExpr {
        E::Const(if v == 0.0 { 0.0 } else { v })
    }

    pub fn param(name: &str) -> ParamExpr {
        E::Param(name.to_string())
    }

    pub fn zero() -> ParamExpr {
        E::Const(0.0)
    }

    pub fn one() -> ParamExpr {
        E::Const(1.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            E::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    pub fn neg(a: ParamExpr) -> ParamExpr {
        match a {
            E::Const(c) => E::c(-c),
            E::Neg(inner) => *inner,
            other => E::Neg(Box::new(other)),
        }
    }

    pub fn add(a: ParamExpr, b: ParamExpr) -> ParamExpr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => E::c(x + y),
            (Some(x), _) if x == 0.0 => b,
            (_, Some(y)) if y == 0.0 => a,
            _ => match b {
                E::Neg(nb) => E::sub(a, *nb),
                b => E::Add(Box::new(a), Box::new(b)),
            },
        }
    }

    pub fn sub(a: ParamExpr, b: ParamExpr) -> ParamExpr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => E::c(x - y),
            (Some(x), _) if x == 0.0 => E::neg(b),
            (_, Some(y)) if y == 0.0 => a,
            _ if a == b => E::zero(),
            _ => match b {
                E::Neg(nb) => E::add(a, *nb),
                b => E::Sub(Box::new(a), Box::new(b)),
            },
        }
    }

    pub fn mul(a: ParamExpr, b: ParamExpr) -> ParamExpr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => E::c(x * y),
            (Some(x), _) | (_, Some(x)) if x == 0.0 => E::zero(),
            (Some(x), _) if x == 1.0 => b,
            (_, Some(y)) if y == 1.0 => a,
            (Some(x), _) if x == -1.0 => E::neg(b),
            (_, Some(y)) if y == -1.0 => E::neg(a),
            (None, Some(_)) => E::mul(b, a),
            _ => match (a, b) {
                (E::Neg(na), b) => E::neg(E::mul(*na, b)),
                (a, E::Neg(nb)) => E::neg(E::mul(a, *nb)),
                (a, b) => E::Mul(Box::new(a), Box::new(b)),
            },
        }
    }

    pub fn div(a: ParamExpr, b: ParamExpr) -> ParamExpr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) if y != 0.0 => E::c(x / y),
            (Some(x), _) if x == 0.0 => E::zero(),
            (_, Some(y)) if y == 1.0 => a,
            (_, Some(y)) if y == -1.0 => E::neg(a),
            _ if a == b => E::one(),
            _ => match (a, b) {
                (E::Neg(na), b) => E::neg(E::div(*na, b)),
                (a, E::Neg(nb)) => E::neg(E::div(a, *nb)),
                (a, b) => E::Div(Box::new(a), Box::new(b)),
            },
        }
    }

    pub fn apply(f: ElementaryFn, a: ParamExpr) -> ParamExpr {
        if let Some(c) = a.as_const() {
            if let Ok(v) = f.eval(c) {
                return E::c(v);
            }
        }
        match f {
            ElementaryFn::Pow(p) if p == 1.0 => a,
            ElementaryFn::Pow(p) if p == 0.0 => E::one(),
            _ => E::Apply(f, Box::new(a)),
        }
    }

    pub fn powi(a: ParamExpr, n: i32) -> ParamExpr {
        E::apply(ElementaryFn::Pow(n as f64), a)
    }

    /// Names of all parameters referenced.
    pub fn params(&self) -> BTreeSet<String> {
        let mut s = BTreeSet::new();
        self.collect_params(&mut s);
        s
    }

    fn collect_params(&self, s: &mut BTreeSet<String>) {
        match self {
            E::Const(_) => {}
            E::Param(p) => {
                s.insert(p.clone());
            }
            E::Neg(a) | E::Apply(_, a) => a.collect_params(s),
            E::Add(a, b) | E::Sub(a, b) | E::Mul(a, b) | E::Div(a, b) => {
                a.collect_params(s);
                b.collect_params(s);
            }
        }
    }

    pub fn depends_on(&self, theta: &str) -> bool {
        match self {
            E::Const(_) => false,
            E::Param(p) => p == theta,
            E::Neg(a) | E::Apply(_, a) => a.depends_on(theta),
            E::Add(a, b) | E::Sub(a, b) | E::Mul(a, b) | E::Div(a, b) => {
                a.depends_on(theta) || b.depends_on(theta)
            }
        }
    }

    /// Symbolic partial derivative.
    pub fn diff(&self, theta: &str) -> ParamExpr {
        if !self.depends_on(theta) {
            return E::zero();
        }
        match self {
            E::Const(_) => E::zero(),
            E::Param(p) => E::c(if p == theta { 1.0 } else { 0.0 }),
            E::Neg(a) => E::neg(a.diff(theta)),
            E::Add(a, b) => E::add(a.diff(theta), b.diff(theta)),
            E::Sub(a, b) => E::sub(a.diff(theta), b.diff(theta)),
            E::Mul(a, b) => E::add(
                E::mul(a.diff(theta), (**b).clone()),
                E::mul((**a).clone(), b.diff(theta)),
            ),
            E::Div(a, b) => {
                let da = a.diff(theta);
                let db = b.diff(theta);
                if db.is_zero() {
                    E::div(da, (**b).clone())
                } else {
                    E::div(
                        E::sub(E::mul(da, (**b).clone()), E::mul((**a).clone(), db)),
                        E::powi((**b).clone(), 2),
                    )
                }
            }
            E::Apply(f, a) => {
                let a = (**a).clone();
                let da = a.diff(theta);
                let outer = match f {
                    ElementaryFn::Exp => E::apply(ElementaryFn::Exp, a),
                    ElementaryFn::Log => return E::div(da, a),
                    ElementaryFn::Sin => E::apply(ElementaryFn::Cos, a),
                    ElementaryFn::Cos => E::neg(E::apply(ElementaryFn::Sin, a)),
                    ElementaryFn::Tan => E::add(E::one(), E::powi(E::apply(ElementaryFn::Tan, a), 2)),
                    ElementaryFn::Atan => return E::div(da, E::add(E::one(), E::powi(a, 2))),
                    ElementaryFn::Sqrt => {
                        return E::div(da, E::mul(E::c(2.0), E::apply(ElementaryFn::Sqrt, a)))
                    }
                    ElementaryFn::Pow(p) => {
                        E::mul(E::c(*p), E::apply(ElementaryFn::Pow(p - 1.0), a))
                    }
                    ElementaryFn::Abs => E::div(a.clone(), E::apply(ElementaryFn::Abs, a)),
                };
                E::mul(outer, da)
            }
        }
    }

    pub fn eval(&self, p: &ParamValues) -> Result<f64, ExprError> {
        let fail = |func: &str, value: f64, fault: Fault| ExprError::Eval { func: func.into(), value, fault };
        let finite = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(fail(what, v, Fault::Domain))
            }
        };
        match self {
            E::Const(c) => Ok(*c),
            E::Param(name) => p.get(name).copied().ok_or_else(|| ExprError::UnknownParameter(name.clone())),
            E::Neg(a) => Ok(-a.eval(p)?),
            E::Add(a, b) => finite(a.eval(p)? + b.eval(p)?, "+"),
            E::Sub(a, b) => finite(a.eval(p)? - b.eval(p)?, "-"),
            E::Mul(a, b) => finite(a.eval(p)? * b.eval(p)?, "*"),
            E::Div(a, b) => {
                let d = b.eval(p)?;
                if d == 0.0 {
                    return Err(fail("/", d, Fault::DivisionByZero));
                }
                finite(a.eval(p)? / d, "/")
            }
            E::Apply(f, a) => {
                let x = a.eval(p)?;
                f.eval(x).map_err(|fault| fail(&f.to_string(), x, fault))
            }
        }
    }

    /// Emit the expression into a tape; `lookup` maps parameter names to nodes.
    pub fn compile(
        &self,
        b: &mut TapeBuilder,
        lookup: &dyn Fn(&str) -> Option<NodeId>,
    ) -> Result<NodeId, ExprError> {
        Ok(match self {
            E::Const(c) => b.constant(*c),
            E::Param(name) => lookup(name).ok_or_else(|| ExprError::UnknownParameter(name.clone()))?,
            E::Neg(a) => {
                let x = a.compile(b, lookup)?;
                b.neg(x)
            }
            E::Add(x, y) | E::Sub(x, y) | E::Mul(x, y) | E::Div(x, y) => {
                let l = x.compile(b, lookup)?;
                let r = y.compile(b, lookup)?;
                match self {
                    E::Add(..) => b.add(l, r),
                    E::Sub(..) => b.sub(l, r),
                    E::Mul(..) => b.mul(l, r),
                    _ => b.div(l, r),
                }
            }
            E::Apply(f, a) => {
                let x = a.compile(b, lookup)?;
                b.apply(*f, x)
            }
        })
    }

    /// Replace every parameter that has a value in `p` by that constant.
    pub fn substitute(&self, p: &ParamValues) -> ParamExpr {
        match self {
            E::Const(c) => E::Const(*c),
            E::Param(name) => p.get(name).map_or_else(|| self.clone(), |&v| E::c(v)),
            E::Neg(a) => E::neg(a.substitute(p)),
            E::Add(a, b) => E::add(a.substitute(p), b.substitute(p)),
            E::Sub(a, b) => E::sub(a.substitute(p), b.substitute(p)),
            E::Mul(a, b) => E::mul(a.substitute(p), b.substitute(p)),
            E::Div(a, b) => E::div(a.substitute(p), b.substitute(p)),
            E::Apply(f, a) => E::apply(*f, a.substitute(p)),
        }
    }

    fn prec(&self) -> u8 {
        match self {
            E::Add(..) | E::Sub(..) => 1,
            E::Mul(..) | E::Div(..) => 2,
            E::Neg(_) => 3,
            E::Const(c) if *c < 0.0 => 3,
            E::Apply(ElementaryFn::Pow(_), _) => 4,
            _ => 5,
        }
    }

    fn write(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let paren = self.prec() < min;
        if paren {
            f.write_str("(")?;
        }
        match self {
            E::Const(c) => write!(f, "{c}")?,
            E::Param(p) => f.write_str(p)?,
            E::Neg(a) => {
                f.write_str("-")?;
                a.write(f, 4)?;
            }
            E::Add(a, b) | E::Sub(a, b) => {
                a.write(f, 1)?;
                f.write_str(if matches!(self, E::Add(..)) { " + " } else { " - " })?;
                b.write(f, 2)?;
            }
            E::Mul(a, b) | E::Div(a, b) => {
                a.write(f, 2)?;
                f.write_str(if matches!(self, E::Mul(..)) { "*" } else { "/" })?;
                b.write(f, 3)?;
            }
            E::Apply(ElementaryFn::Pow(p), a) => {
                a.write(f, 5)?;
                if *p < 0.0 {
                    write!(f, "^({p})")?;
                } else {
                    write!(f, "^{p}")?;
                }
            }
            E::Apply(func, a) => {
                write!(f, "{}(", func.name())?;
                a.write(f, 0)?;
                f.write_str(")")?;
            }
        }
        if paren {
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl fmt::Display for ParamExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write(f, 0)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Parse { pos: self.pos, msg: msg.into() })
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

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<ParamExpr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = E::add(lhs, self.term()?);
            } else if self.eat(b'-') {
                lhs = E::sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<ParamExpr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = E::mul(lhs, self.unary()?);
            } else if self.eat(b'/') {
                lhs = E::div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<ParamExpr, ExprError> {
        if self.eat(b'-') {
            return Ok(E::neg(self.unary()?));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<ParamExpr, ExprError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let at = self.pos;
            let exp = self.unary()?;
            let Some(p) = exp.as_const() else {
                self.pos = at;
                return self.err("exponent must be a constant");
            };
            return Ok(E::apply(ElementaryFn::Pow(p), base));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<ParamExpr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return self.err("expected `)`");
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
                if self.eat(b'(') {
                    self.call(name)
                } else {
                    Ok(E::param(name))
                }
            }
            Some(c) => self.err(format!("unexpected `{}`", c as char)),
            None => self.err("unexpected end of expression"),
        }
    }

    fn call(&mut self, name: &str) -> Result<ParamExpr, ExprError> {
        let arg = self.expr()?;
        if name == "pow" {
            if !self.eat(b',') {
                return self.err("pow takes two arguments");
            }
            let at = self.pos;
            let e = self.expr()?;
            let Some(p) = e.as_const() else {
                self.pos = at;
                return self.err("exponent must be a constant");
            };
            if !self.eat(b')') {
                return self.err("expected `)`");
            }
            return Ok(E::apply(ElementaryFn::Pow(p), arg));
        }
        let Ok(f) = name.parse::<ElementaryFn>() else {
            return self.err(format!("unknown function `{name}`"));
        };
        if !self.eat(b')') {
            return self.err("expected `)`");
        }
        Ok(E::apply(f, arg))
    }

    fn number(&mut self) -> Result<ParamExpr, ExprError> {
        let start = self.pos;
        let s = self.src;
        let digits = |p: &mut usize| {
            while *p < s.len() && s[*p].is_ascii_digit() {
                *p += 1;
            }
        };
        digits(&mut self.pos);
        if self.pos < s.len() && s[self.pos] == b'.' {
            self.pos += 1;
            digits(&mut self.pos);
        }
        if self.pos < s.len() && (s[self.pos] == b'e' || s[self.pos] == b'E') {
            let mut p = self.pos + 1;
            if p < s.len() && (s[p] == b'+' || s[p] == b'-') {
                p += 1;
            }
            if p < s.len() && s[p].is_ascii_digit() {
                digits(&mut p);
                self.pos = p;
            }
        }
        let text = std::str::from_utf8(&s[start..self.pos]).expect("ascii");
        match text.parse::<f64>() {
            Ok(v) => Ok(E::c(v)),
            Err(_) => {
                self.pos = start;
                self.err(format!("bad number `{text}`"))
            }
        }
    }
}

impl FromStr for ParamExpr {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = Parser { src: s.as_bytes(), pos: 0 };
        let e = p.expr()?;
        if p.peek().is_some() {
            return p.err("trailing input");
        }
        Ok(e)
    }
}

impl Serialize for ParamExpr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            E::Const(c) => s.serialize_f64(*c),
            e => s.serialize_str(&e.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for ParamExpr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(E::c(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> ParamExpr {
        s.parse().unwrap()
    }

    fn vals(v: &[(&str, f64)]) -> ParamValues {
        v.iter().map(|(k, x)| (k.to_string(), *x)).collect()
    }

    #[test]
    fn parse_and_eval() {
        let v = vals(&[("k", 2.0), ("tau", 0.5)]);
        assert_eq!(p("k/tau").eval(&v).unwrap(), 4.0);
        assert_eq!(p("-k^2").eval(&v).unwrap(), -4.0);
        assert_eq!(p("2e-1*k").eval(&v).unwrap(), 0.4);
        assert_eq!(p("pow(tau, 3)").eval(&v).unwrap(), 0.125);
        assert_eq!(p("exp(0)").as_const(), Some(1.0));
        assert!(matches!(p("zeta").eval(&v), Err(ExprError::UnknownParameter(_))));
        assert!(matches!("k^tau".parse::<ParamExpr>(), Err(ExprError::Parse { .. })));
        assert!(matches!("k +".parse::<ParamExpr>(), Err(ExprError::Parse { .. })));
        assert!(matches!("cosh(k)".parse::<ParamExpr>(), Err(ExprError::Parse { .. })));
    }

    #[test]
    fn display_round_trips() {
        for s in ["k/tau", "-k/(1 + tau)", "a - (b - c)", "a/(b*c)", "(a + b)^2", "exp(-a*t)", "2^(-1)*x", "-(a + b)"] {
            let e = p(s);
            let back = p(&e.to_string());
            assert_eq!(back, e, "{s} -> {e}");
        }
    }

    #[test]
    fn symbolic_derivatives() {
        let v = vals(&[("k", 1.5), ("tau", 0.5)]);
        let e = p("k/tau");
        assert_eq!(e.diff("tau").eval(&v).unwrap(), -1.5 / 0.25);
        assert_eq!(e.diff("k").eval(&v).unwrap(), 2.0);
        assert!(p("k*3").diff("tau").is_zero());
        let s = p("sqrt(tau)*sin(k)");
        let want = 0.5 / 0.5f64.sqrt() * 1.5f64.sin();
        assert!((s.diff("tau").eval(&v).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn compiles_to_tape() {
        let e = p("k*exp(-tau)");
        let mut b = TapeBuilder::new(2);
        let k = b.input(0);
        let t = b.input(1);
        let lookup = |n: &str| match n {
            "k" => Some(k),
            "tau" => Some(t),
            _ => None,
        };
        let out = e.compile(&mut b, &lookup).unwrap();
        let tape = b.finish(vec![out]);
        assert!((tape.eval(&[2.0, 1.0]).unwrap()[0] - 2.0 * (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn serde_forms() {
        let e: ParamExpr = serde_json::from_str("\"k/tau\"").unwrap();
        assert_eq!(e, p("k/tau"));
        let c: ParamExpr = serde_json::from_str("0.25").unwrap();
        assert_eq!(c, E::Const(0.25));
        assert_eq!(serde_json::to_string(&c).unwrap(), "0.25");
    }
}
