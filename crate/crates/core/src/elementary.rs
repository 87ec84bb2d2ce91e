//! Elementary scalar functions shared by jets, tapes, parameter expressions
//! and diagram `Fn` blocks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// An elementary function with a closed-form derivative rule.
///
/// `Abs` is the only member that is not differentiable everywhere: its
/// derivative is undefined at zero and every derivative-carrying evaluation
/// reports that point instead of picking a subgradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementaryFn {
    Exp,
    Log,
    Sin,
    Cos,
    Tan,
    Atan,
    Sqrt,
    /// `x^p` for a constant real exponent.
    Pow(f64),
    Abs,
}

/// Why an elementary function could not be evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    /// Argument outside the function's domain (log of a non-positive number...).
    Domain,
    /// Division by an exact zero.
    DivisionByZero,
    /// The function is evaluated but has no derivative at the argument.
    NonDifferentiable,
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::Domain => write!(f, "argument outside the function domain"),
            Fault::DivisionByZero => write!(f, "division by zero"),
            Fault::NonDifferentiable => write!(f, "function not differentiable at this point"),
        }
    }
}

impl ElementaryFn {
    pub const ALL_NAMED: [ElementaryFn; 8] = [
        ElementaryFn::Exp,
        ElementaryFn::Log,
        ElementaryFn::Sin,
        ElementaryFn::Cos,
        ElementaryFn::Tan,
        ElementaryFn::Atan,
        ElementaryFn::Sqrt,
        ElementaryFn::Abs,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ElementaryFn::Exp => "exp",
            ElementaryFn::Log => "log",
            ElementaryFn::Sin => "sin",
            ElementaryFn::Cos => "cos",
            ElementaryFn::Tan => "tan",
            ElementaryFn::Atan => "atan",
            ElementaryFn::Sqrt => "sqrt",
            ElementaryFn::Pow(_) => "pow",
            ElementaryFn::Abs => "abs",
        }
    }

    /// Whether `x` is inside the domain on which the function is evaluated.
    pub fn in_domain(&self, x: f64) -> bool {
        match self {
            ElementaryFn::Log => x > 0.0,
            ElementaryFn::Sqrt => x >= 0.0,
            ElementaryFn::Tan => x.cos() != 0.0,
            ElementaryFn::Pow(p) => x > 0.0 || (x == 0.0 && *p >= 0.0) || p.fract() == 0.0,
            _ => x.is_finite(),
        }
    }

    /// Plain value. `abs(0)` is fine here; only derivative evaluation rejects it.
    pub fn eval(&self, x: f64) -> Result<f64, Fault> {
        if !self.in_domain(x) {
            return Err(Fault::Domain);
        }
        let y = match self {
            ElementaryFn::Exp => x.exp(),
            ElementaryFn::Log => x.ln(),
            ElementaryFn::Sin => x.sin(),
            ElementaryFn::Cos => x.cos(),
            ElementaryFn::Tan => x.tan(),
            ElementaryFn::Atan => x.atan(),
            ElementaryFn::Sqrt => x.sqrt(),
            ElementaryFn::Pow(p) => pow_real(x, *p),
            ElementaryFn::Abs => x.abs(),
        };
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Fault::Domain)
        }
    }

    /// First derivative at `x`.
    pub fn derivative(&self, x: f64) -> Result<f64, Fault> {
        let d = match self {
            ElementaryFn::Exp => x.exp(),
            ElementaryFn::Log => {
                if x <= 0.0 {
                    return Err(Fault::Domain);
                }
                1.0 / x
            }
            ElementaryFn::Sin => x.cos(),
            ElementaryFn::Cos => -x.sin(),
            ElementaryFn::Tan => {
                let t = self.eval(x)?;
                1.0 + t * t
            }
            ElementaryFn::Atan => 1.0 / (1.0 + x * x),
            ElementaryFn::Sqrt => {
                if x <= 0.0 {
                    return Err(Fault::Domain);
                }
                0.5 / x.sqrt()
            }
            ElementaryFn::Pow(p) => {
                if *p == 0.0 {
                    0.0
                } else {
                    if !self.in_domain(x) || (x == 0.0 && *p < 1.0 && *p != 0.0) {
                        return Err(Fault::Domain);
                    }
                    p * pow_real(x, p - 1.0)
                }
            }
            ElementaryFn::Abs => {
                if x == 0.0 {
                    return Err(Fault::NonDifferentiable);
                }
                x.signum()
            }
        };
        if d.is_finite() {
            Ok(d)
        } else {
            Err(Fault::Domain)
        }
    }
}

/// `x^p` using integer powers when the exponent is integral so that negative
/// bases stay valid.
pub(crate) fn pow_real(x: f64, p: f64) -> f64 {
    if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
        x.powi(p as i32)
    } else {
        x.powf(p)
    }
}

impl fmt::Display for ElementaryFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElementaryFn::Pow(p) => write!(f, "pow({p})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown elementary function `{0}`")]
pub struct UnknownFunction(pub String);

impl FromStr for ElementaryFn {
    type Err = UnknownFunction;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("pow(").and_then(|r| r.strip_suffix(')')) {
            return rest
                .trim()
                .parse::<f64>()
                .map(ElementaryFn::Pow)
                .map_err(|_| UnknownFunction(s.to_string()));
        }
        ElementaryFn::ALL_NAMED
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| UnknownFunction(s.to_string()))
    }
}

impl Serialize for ElementaryFn {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ElementaryFn {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for f in ElementaryFn::ALL_NAMED {
            assert_eq!(f.to_string().parse::<ElementaryFn>().unwrap(), f);
        }
        assert_eq!("pow(2.5)".parse::<ElementaryFn>().unwrap(), ElementaryFn::Pow(2.5));
        assert!("cosh".parse::<ElementaryFn>().is_err());
    }

    #[test]
    fn abs_value_defined_derivative_not() {
        assert_eq!(ElementaryFn::Abs.eval(0.0).unwrap(), 0.0);
        assert_eq!(ElementaryFn::Abs.derivative(0.0), Err(Fault::NonDifferentiable));
        assert_eq!(ElementaryFn::Abs.derivative(-2.0).unwrap(), -1.0);
    }

    #[test]
    fn domain_errors() {
        assert_eq!(ElementaryFn::Log.eval(-1.0), Err(Fault::Domain));
        assert_eq!(ElementaryFn::Sqrt.eval(-1e-300), Err(Fault::Domain));
        assert_eq!(ElementaryFn::Pow(0.5).eval(-4.0), Err(Fault::Domain));
        assert_eq!(ElementaryFn::Pow(3.0).eval(-2.0).unwrap(), -8.0);
    }
}
