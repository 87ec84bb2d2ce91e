//! First-order dual numbers, scalar and vector-tangent flavours.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::elementary::{ElementaryFn, Fault};

/// `v + d·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub const fn new(v: f64, d: f64) -> Dual {
        Dual { v, d }
    }

    pub const fn var(v: f64) -> Dual {
        Dual { v, d: 1.0 }
    }

    pub const fn constant(v: f64) -> Dual {
        Dual { v, d: 0.0 }
    }

    pub fn apply(self, f: ElementaryFn) -> Result<Dual, Fault> {
        let v = f.eval(self.v)?;
        let d = f.derivative(self.v)?;
        Ok(Dual { v, d: d * self.d })
    }

    pub fn checked_div(self, o: Dual) -> Result<Dual, Fault> {
        if o.v == 0.0 {
            return Err(Fault::DivisionByZero);
        }
        Ok(self / o)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let v = self.v / o.v;
        Dual { v, d: (self.d - v * o.d) / o.v }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { v: -self.v, d: -self.d }
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, s: f64) -> Dual {
        Dual { v: self.v * s, d: self.d * s }
    }
}

/// Dual number with one tangent per seeded direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVec {
    pub v: f64,
    pub d: Vec<f64>,
}

impl DualVec {
    pub fn constant(v: f64, width: usize) -> DualVec {
        DualVec { v, d: vec![0.0; width] }
    }

    /// Seed direction `i` of `width`.
    pub fn var(v: f64, i: usize, width: usize) -> DualVec {
        let mut d = vec![0.0; width];
        d[i] = 1.0;
        DualVec { v, d }
    }
}
