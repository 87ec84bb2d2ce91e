//! Truncated univariate Taylor series.
//!
//! A [`Jet`] of order `r` stores `c_0..c_r` where `c_i = f^{(i)}(t0) / i!`.
//! Elementary functions are propagated with coefficient recurrences, so the
//! cost of every operation is at most quadratic in the order.

use std::fmt;

use crate::elementary::{pow_real, ElementaryFn, Fault};

/// Highest order a jet may carry.
pub const MAX_ORDER: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JetError {
    #[error("division by a jet whose constant term is zero")]
    DivisionByZeroConstantTerm,
    #[error("{func} is not defined at constant term {value}")]
    DomainError { func: String, value: f64 },
    #[error("order {requested} exceeds the available order {available}")]
    OrderExceeded { requested: usize, available: usize },
    #[error("jets of different orders combined ({0} vs {1})")]
    OrderMismatch(usize, usize),
    #[error("{func} is not differentiable at {value}")]
    NonDifferentiable { func: String, value: f64 },
    #[error("non-finite coefficient produced by {0}")]
    NonFinite(String),
}

impl JetError {
    pub fn fault(&self) -> Fault {
        match self {
            JetError::DivisionByZeroConstantTerm => Fault::DivisionByZero,
            JetError::NonDifferentiable { .. } => Fault::NonDifferentiable,
            _ => Fault::Domain,
        }
    }
}

pub type Result<T> = std::result::Result<T, JetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, PartialEq)]
pub struct Jet {
    coeffs: Vec<f64>,
}

fn check_order(order: usize) -> Result<()> {
    if order > MAX_ORDER {
        Err(JetError::OrderExceeded { requested: order, available: MAX_ORDER })
    } else {
        Ok(())
    }
}

impl Jet {
    /// Jet of the independent variable: `[value, 1, 0, ...]`.
    pub fn var(value: f64, order: usize) -> Result<Jet> {
        check_order(order)?;
        let mut coeffs = vec![0.0; order + 1];
        coeffs[0] = value;
        if order >= 1 {
            coeffs[1] = 1.0;
        }
        Ok(Jet { coeffs })
    }

    pub fn constant(value: f64, order: usize) -> Result<Jet> {
        check_order(order)?;
        let mut coeffs = vec![0.0; order + 1];
        coeffs[0] = value;
        Ok(Jet { coeffs })
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Result<Jet> {
        if coeffs.is_empty() {
            return Err(JetError::OrderExceeded { requested: 0, available: 0 });
        }
        check_order(coeffs.len() - 1)?;
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(JetError::NonFinite("from_coeffs".into()));
        }
        Ok(Jet { coeffs })
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    /// `i! * c_i`.
    pub fn derivative(&self, i: usize) -> Result<f64> {
        if i > self.order() {
            return Err(JetError::OrderExceeded { requested: i, available: self.order() });
        }
        let fact: f64 = (1..=i).map(|k| k as f64).product();
        Ok(fact * self.coeffs[i])
    }

    /// All derivatives `0..=order`.
    pub fn derivatives(&self) -> Vec<f64> {
        let mut fact = 1.0;
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i > 0 {
                    fact *= i as f64;
                }
                fact * c
            })
            .collect()
    }

    fn same_order(&self, other: &Jet) -> Result<()> {
        if self.order() != other.order() {
            Err(JetError::OrderMismatch(self.order(), other.order()))
        } else {
            Ok(())
        }
    }

    fn finish(coeffs: Vec<f64>, what: &str) -> Result<Jet> {
        if coeffs.iter().all(|c| c.is_finite()) {
            Ok(Jet { coeffs })
        } else {
            Err(JetError::NonFinite(what.to_string()))
        }
    }

    pub fn arith(kind: ArithKind, a: &Jet, b: &Jet) -> Result<Jet> {
        match kind {
            ArithKind::Add => a.add(b),
            ArithKind::Sub => a.sub(b),
            ArithKind::Mul => a.mul(b),
            ArithKind::Div => a.div(b),
        }
    }

    pub fn add(&self, other: &Jet) -> Result<Jet> {
        self.same_order(other)?;
        let c = self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b).collect();
        Jet::finish(c, "add")
    }

    pub fn sub(&self, other: &Jet) -> Result<Jet> {
        self.same_order(other)?;
        let c = self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a - b).collect();
        Jet::finish(c, "sub")
    }

    pub fn mul(&self, other: &Jet) -> Result<Jet> {
        self.same_order(other)?;
        let n = self.coeffs.len();
        let (a, b) = (&self.coeffs, &other.coeffs);
        let c = (0..n).map(|k| (0..=k).map(|j| a[j] * b[k - j]).sum()).collect();
        Jet::finish(c, "mul")
    }

    pub fn div(&self, other: &Jet) -> Result<Jet> {
        self.same_order(other)?;
        let b = &other.coeffs;
        if b[0] == 0.0 {
            return Err(JetError::DivisionByZeroConstantTerm);
        }
        let a = &self.coeffs;
        let mut c = vec![0.0; a.len()];
        for k in 0..a.len() {
            let s: f64 = (1..=k).map(|j| b[j] * c[k - j]).sum();
            c[k] = (a[k] - s) / b[0];
        }
        Jet::finish(c, "div")
    }

    pub fn scale(&self, s: f64) -> Jet {
        Jet { coeffs: self.coeffs.iter().map(|c| c * s).collect() }
    }

    pub fn neg(&self) -> Jet {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Jet {
        let mut coeffs = self.coeffs.clone();
        coeffs[0] += s;
        Jet { coeffs }
    }

    /// Integer power by repeated squaring.
    pub fn powi(&self, n: i32) -> Result<Jet> {
        let mut base = if n < 0 {
            Jet::constant(1.0, self.order())?.div(self)?
        } else {
            self.clone()
        };
        let mut e = n.unsigned_abs();
        let mut acc = Jet::constant(1.0, self.order())?;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc.mul(&base)?;
            }
            e >>= 1;
            if e > 0 {
                base = base.mul(&base)?;
            }
        }
        Ok(acc)
    }

    /// Compose an elementary function with this series.
    pub fn apply(&self, f: ElementaryFn) -> Result<Jet> {
        let a = &self.coeffs;
        let n = a.len();
        let domain = || JetError::DomainError { func: f.to_string(), value: a[0] };
        match f {
            ElementaryFn::Exp => {
                let mut b = vec![0.0; n];
                b[0] = a[0].exp();
                for k in 1..n {
                    let s: f64 = (1..=k).map(|j| j as f64 * a[j] * b[k - j]).sum();
                    b[k] = s / k as f64;
                }
                Jet::finish(b, "exp")
            }
            ElementaryFn::Log => {
                if a[0] <= 0.0 {
                    return Err(domain());
                }
                let mut b = vec![0.0; n];
                b[0] = a[0].ln();
                for k in 1..n {
                    let s: f64 = (1..k).map(|j| j as f64 * b[j] * a[k - j]).sum();
                    b[k] = (a[k] - s / k as f64) / a[0];
                }
                Jet::finish(b, "log")
            }
            ElementaryFn::Sin => Ok(self.sin_cos()?.0),
            ElementaryFn::Cos => Ok(self.sin_cos()?.1),
            ElementaryFn::Tan => {
                let (s, c) = self.sin_cos()?;
                s.div(&c).map_err(|_| domain())
            }
            ElementaryFn::Atan => {
                let d = self.mul(self)?.add_scalar(1.0);
                let d = &d.coeffs;
                let mut b = vec![0.0; n];
                b[0] = a[0].atan();
                for k in 1..n {
                    let s: f64 = (1..k).map(|j| j as f64 * b[j] * d[k - j]).sum();
                    b[k] = (k as f64 * a[k] - s) / (k as f64 * d[0]);
                }
                Jet::finish(b, "atan")
            }
            ElementaryFn::Sqrt => {
                if a[0] < 0.0 || (a[0] == 0.0 && n > 1) {
                    return Err(domain());
                }
                let mut b = vec![0.0; n];
                b[0] = a[0].sqrt();
                for k in 1..n {
                    let s: f64 = (1..k).map(|j| b[j] * b[k - j]).sum();
                    b[k] = (a[k] - s) / (2.0 * b[0]);
                }
                Jet::finish(b, "sqrt")
            }
            ElementaryFn::Pow(p) => self.pow_const(p),
            ElementaryFn::Abs => {
                if a[0] == 0.0 {
                    if n == 1 {
                        return Ok(self.clone());
                    }
                    return Err(JetError::NonDifferentiable { func: "abs".into(), value: 0.0 });
                }
                Ok(if a[0] < 0.0 { self.neg() } else { self.clone() })
            }
        }
    }

    fn sin_cos(&self) -> Result<(Jet, Jet)> {
        let a = &self.coeffs;
        let n = a.len();
        let mut s = vec![0.0; n];
        let mut c = vec![0.0; n];
        s[0] = a[0].sin();
        c[0] = a[0].cos();
        for k in 1..n {
            let mut ss = 0.0;
            let mut cs = 0.0;
            for j in 1..=k {
                ss += j as f64 * a[j] * c[k - j];
                cs += j as f64 * a[j] * s[k - j];
            }
            s[k] = ss / k as f64;
            c[k] = -cs / k as f64;
        }
        Ok((Jet::finish(s, "sin")?, Jet::finish(c, "cos")?))
    }

    fn pow_const(&self, p: f64) -> Result<Jet> {
        let a = &self.coeffs;
        let n = a.len();
        let integral = p.fract() == 0.0 && p.abs() <= 1024.0;
        if a[0] == 0.0 {
            if integral && p >= 0.0 {
                return self.powi(p as i32);
            }
            if n == 1 && p > 0.0 {
                return Jet::constant(0.0, 0);
            }
            return Err(JetError::DomainError { func: format!("pow({p})"), value: a[0] });
        }
        if a[0] < 0.0 && !integral {
            return Err(JetError::DomainError { func: format!("pow({p})"), value: a[0] });
        }
        let mut b = vec![0.0; n];
        b[0] = pow_real(a[0], p);
        for k in 1..n {
            let s: f64 = (1..=k)
                .map(|j| ((p + 1.0) * j as f64 - k as f64) * a[j] * b[k - j])
                .sum();
            b[k] = s / (k as f64 * a[0]);
        }
        Jet::finish(b, "pow")
    }
}

impl fmt::Debug for Jet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Jet{:?}", self.coeffs)
    }
}

impl fmt::Display for Jet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, c) in self.coeffs.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jet(c: &[f64]) -> Jet {
        Jet::from_coeffs(c.to_vec()).unwrap()
    }

    #[test]
    fn var_layout() {
        assert_eq!(Jet::var(2.0, 3).unwrap().coeffs(), &[2.0, 1.0, 0.0, 0.0]);
        assert_eq!(Jet::var(0.0, 0).unwrap().coeffs(), &[0.0]);
        let j = Jet::var(1.5, 19).unwrap();
        assert_eq!(j.coeffs().len(), 20);
        assert!(Jet::var(0.0, 65).is_err());
    }

    #[test]
    fn small_arith() {
        let p = jet(&[1.0, 1.0, 0.0]).mul(&jet(&[1.0, -1.0, 0.0])).unwrap();
        assert_eq!(p.coeffs(), &[1.0, 0.0, -1.0]);
        let q = jet(&[1.0, 0.0, 0.0]).div(&jet(&[1.0, 1.0, 0.0])).unwrap();
        assert_eq!(q.coeffs(), &[1.0, -1.0, 1.0]);
        assert_eq!(
            jet(&[1.0, 0.0]).div(&jet(&[0.0, 1.0])),
            Err(JetError::DivisionByZeroConstantTerm)
        );
        assert!(matches!(jet(&[1.0]).add(&jet(&[1.0, 2.0])), Err(JetError::OrderMismatch(0, 1))));
    }

    #[test]
    fn series_at_zero() {
        let x = Jet::var(0.0, 3).unwrap();
        let e = x.apply(ElementaryFn::Exp).unwrap();
        assert_eq!(e.coeffs(), &[1.0, 1.0, 0.5, 1.0 / 6.0]);
        let s = x.apply(ElementaryFn::Sin).unwrap();
        assert_eq!(s.coeffs(), &[0.0, 1.0, 0.0, -1.0 / 6.0]);
        assert_eq!(e.derivative(2).unwrap(), 1.0);
        assert_eq!(jet(&[5.0, 0.0, 0.0]).derivative(0).unwrap(), 5.0);
        assert!(matches!(e.derivative(4), Err(JetError::OrderExceeded { .. })));
    }

    #[test]
    fn geometric_fifth_derivative() {
        let x = Jet::var(0.0, 5).unwrap();
        let one = Jet::constant(1.0, 5).unwrap();
        let g = one.div(&x.add_scalar(1.0)).unwrap();
        assert_eq!(g.derivative(5).unwrap(), -120.0);
    }

    #[test]
    fn sqrt_high_derivative() {
        // d^19/da^19 sqrt(a) at 2 = prod_{k=0}^{18} (1/2 - k) * 2^(1/2 - 19)
        let exact: f64 = (0..19).map(|k| 0.5 - k as f64).product::<f64>() * 2f64.powf(0.5 - 19.0);
        let s = Jet::var(2.0, 19).unwrap().apply(ElementaryFn::Sqrt).unwrap();
        let d = s.derivative(19).unwrap();
        assert!((d - exact).abs() <= 1e-9 * exact.abs());
        assert!((d - 1.140326912e9).abs() <= 1e2);
    }

    #[test]
    fn domain_and_abs() {
        let x = Jet::var(-1.0, 2).unwrap();
        assert!(matches!(x.apply(ElementaryFn::Sqrt), Err(JetError::DomainError { .. })));
        assert!(matches!(x.apply(ElementaryFn::Log), Err(JetError::DomainError { .. })));
        assert_eq!(x.apply(ElementaryFn::Abs).unwrap().coeffs(), &[1.0, -1.0, 0.0]);
        let z = Jet::var(0.0, 2).unwrap();
        assert!(matches!(z.apply(ElementaryFn::Abs), Err(JetError::NonDifferentiable { .. })));
        assert_eq!(z.apply(ElementaryFn::Pow(2.0)).unwrap().coeffs(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn tan_matches_series() {
        // tan x = x + x^3/3 + 2x^5/15
        let t = Jet::var(0.0, 5).unwrap().apply(ElementaryFn::Tan).unwrap();
        let want = [0.0, 1.0, 0.0, 1.0 / 3.0, 0.0, 2.0 / 15.0];
        for (a, b) in t.coeffs().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
