use std::fmt::Debug;

use super::{NodeId, TapeError};
use crate::dual::{Dual, DualVec};
use crate::elementary::{ElementaryFn, Fault};
use crate::jet::{Jet, JetError};

/// Number type a tape can be evaluated with.
pub trait Scalar: Clone + Debug {
    type Error: Clone + Debug;

    /// A constant with the same shape (tangent width, jet order) as `self`.
    fn constant_like(&self, c: f64) -> Self;
    fn value(&self) -> f64;
    fn add(&self, o: &Self) -> Result<Self, Self::Error>;
    fn sub(&self, o: &Self) -> Result<Self, Self::Error>;
    fn mul(&self, o: &Self) -> Result<Self, Self::Error>;
    fn div(&self, o: &Self) -> Result<Self, Self::Error>;
    fn apply(&self, f: ElementaryFn) -> Result<Self, Self::Error>;
    fn fault(f: Fault) -> Self::Error;
    fn tape_error(node: NodeId, e: Self::Error) -> TapeError;

    /// `f'(x)` expressed in this scalar type; `y` is `f(x)`.
    fn local_derivative(f: ElementaryFn, x: &Self, y: &Self) -> Result<Self, Self::Error> {
        let one = x.constant_like(1.0);
        match f {
            ElementaryFn::Exp => Ok(y.clone()),
            ElementaryFn::Log => one.div(x),
            ElementaryFn::Sin => x.apply(ElementaryFn::Cos),
            ElementaryFn::Cos => x.apply(ElementaryFn::Sin)?.mul(&x.constant_like(-1.0)),
            ElementaryFn::Tan => one.add(&y.mul(y)?),
            ElementaryFn::Atan => one.div(&one.add(&x.mul(x)?)?),
            ElementaryFn::Sqrt => {
                if y.value() == 0.0 {
                    return Err(Self::fault(Fault::Domain));
                }
                x.constant_like(0.5).div(y)
            }
            ElementaryFn::Pow(p) => {
                if p == 0.0 {
                    Ok(x.constant_like(0.0))
                } else if p == 1.0 {
                    Ok(one)
                } else {
                    if x.value() == 0.0 && p < 1.0 {
                        return Err(Self::fault(Fault::Domain));
                    }
                    x.apply(ElementaryFn::Pow(p - 1.0))?.mul(&x.constant_like(p))
                }
            }
            ElementaryFn::Abs => {
                if x.value() == 0.0 {
                    Err(Self::fault(Fault::NonDifferentiable))
                } else {
                    Ok(x.constant_like(x.value().signum()))
                }
            }
        }
    }
}

fn checked(v: f64) -> Result<f64, Fault> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Fault::Domain)
    }
}

impl Scalar for f64 {
    type Error = Fault;

    fn constant_like(&self, c: f64) -> f64 {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn add(&self, o: &f64) -> Result<f64, Fault> {
        checked(self + o)
    }
    fn sub(&self, o: &f64) -> Result<f64, Fault> {
        checked(self - o)
    }
    fn mul(&self, o: &f64) -> Result<f64, Fault> {
        checked(self * o)
    }
    fn div(&self, o: &f64) -> Result<f64, Fault> {
        if *o == 0.0 {
            return Err(Fault::DivisionByZero);
        }
        checked(self / o)
    }
    fn apply(&self, f: ElementaryFn) -> Result<f64, Fault> {
        f.eval(*self)
    }
    fn fault(f: Fault) -> Fault {
        f
    }
    fn tape_error(node: NodeId, e: Fault) -> TapeError {
        TapeError::from_fault(node, e)
    }
}

fn checked_dual(x: Dual) -> Result<Dual, Fault> {
    if x.v.is_finite() && x.d.is_finite() {
        Ok(x)
    } else {
        Err(Fault::Domain)
    }
}

impl Scalar for Dual {
    type Error = Fault;

    fn constant_like(&self, c: f64) -> Dual {
        Dual::constant(c)
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn add(&self, o: &Dual) -> Result<Dual, Fault> {
        checked_dual(*self + *o)
    }
    fn sub(&self, o: &Dual) -> Result<Dual, Fault> {
        checked_dual(*self - *o)
    }
    fn mul(&self, o: &Dual) -> Result<Dual, Fault> {
        checked_dual(*self * *o)
    }
    fn div(&self, o: &Dual) -> Result<Dual, Fault> {
        checked_dual(self.checked_div(*o)?)
    }
    fn apply(&self, f: ElementaryFn) -> Result<Dual, Fault> {
        checked_dual(Dual::apply(*self, f)?)
    }
    fn fault(f: Fault) -> Fault {
        f
    }
    fn tape_error(node: NodeId, e: Fault) -> TapeError {
        TapeError::from_fault(node, e)
    }
}

fn checked_vec(x: DualVec) -> Result<DualVec, Fault> {
    if x.v.is_finite() && x.d.iter().all(|d| d.is_finite()) {
        Ok(x)
    } else {
        Err(Fault::Domain)
    }
}

impl Scalar for DualVec {
    type Error = Fault;

    fn constant_like(&self, c: f64) -> DualVec {
        DualVec::constant(c, self.d.len())
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn add(&self, o: &DualVec) -> Result<DualVec, Fault> {
        let d = self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect();
        checked_vec(DualVec { v: self.v + o.v, d })
    }
    fn sub(&self, o: &DualVec) -> Result<DualVec, Fault> {
        let d = self.d.iter().zip(&o.d).map(|(a, b)| a - b).collect();
        checked_vec(DualVec { v: self.v - o.v, d })
    }
    fn mul(&self, o: &DualVec) -> Result<DualVec, Fault> {
        let d = self.d.iter().zip(&o.d).map(|(a, b)| a * o.v + self.v * b).collect();
        checked_vec(DualVec { v: self.v * o.v, d })
    }
    fn div(&self, o: &DualVec) -> Result<DualVec, Fault> {
        if o.v == 0.0 {
            return Err(Fault::DivisionByZero);
        }
        let v = self.v / o.v;
        let d = self.d.iter().zip(&o.d).map(|(a, b)| (a - v * b) / o.v).collect();
        checked_vec(DualVec { v, d })
    }
    fn apply(&self, f: ElementaryFn) -> Result<DualVec, Fault> {
        let v = f.eval(self.v)?;
        let g = f.derivative(self.v)?;
        checked_vec(DualVec { v, d: self.d.iter().map(|d| g * d).collect() })
    }
    fn fault(f: Fault) -> Fault {
        f
    }
    fn tape_error(node: NodeId, e: Fault) -> TapeError {
        TapeError::from_fault(node, e)
    }
}

impl Scalar for Jet {
    type Error = JetError;

    fn constant_like(&self, c: f64) -> Jet {
        Jet::constant(c, self.order()).expect("order already validated")
    }
    fn value(&self) -> f64 {
        Jet::value(self)
    }
    fn add(&self, o: &Jet) -> Result<Jet, JetError> {
        Jet::add(self, o)
    }
    fn sub(&self, o: &Jet) -> Result<Jet, JetError> {
        Jet::sub(self, o)
    }
    fn mul(&self, o: &Jet) -> Result<Jet, JetError> {
        Jet::mul(self, o)
    }
    fn div(&self, o: &Jet) -> Result<Jet, JetError> {
        Jet::div(self, o)
    }
    fn apply(&self, f: ElementaryFn) -> Result<Jet, JetError> {
        Jet::apply(self, f)
    }
    fn fault(f: Fault) -> JetError {
        match f {
            Fault::DivisionByZero => JetError::DivisionByZeroConstantTerm,
            Fault::NonDifferentiable => JetError::NonDifferentiable { func: "abs".into(), value: 0.0 },
            Fault::Domain => JetError::NonFinite("local derivative".into()),
        }
    }
    fn tape_error(node: NodeId, e: JetError) -> TapeError {
        match e {
            JetError::NonDifferentiable { .. } => TapeError::NonDifferentiablePoint { node },
            source => TapeError::Jet { node, source },
        }
    }
}
