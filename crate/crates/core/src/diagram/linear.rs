//! Symbolic polynomial and matrix helpers for linear blocks.

use super::DiagramError;
use crate::expr::ParamExpr;

/// Coefficients in descending powers.
pub type Poly = Vec<ParamExpr>;
pub type Matrix = Vec<Vec<ParamExpr>>;

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
}

fn strip(mut p: Poly) -> Poly {
    let lead = p.iter().take_while(|c| c.is_zero()).count();
    p.drain(..lead.min(p.len().saturating_sub(1)));
    if p.is_empty() {
        p.push(ParamExpr::zero());
    }
    p
}

pub(crate) fn poly_add(a: &[ParamExpr], b: &[ParamExpr], sub: bool) -> Poly {
    let n = a.len().max(b.len());
    let get = |p: &[ParamExpr], i: usize| -> ParamExpr {
        // i counts from the highest power of the longer polynomial
        let off = n - p.len();
        if i >= off {
            p[i - off].clone()
        } else {
            ParamExpr::zero()
        }
    };
    let r = (0..n)
        .map(|i| {
            if sub {
                ParamExpr::sub(get(a, i), get(b, i))
            } else {
                ParamExpr::add(get(a, i), get(b, i))
            }
        })
        .collect();
    strip(r)
}

pub(crate) fn poly_mul(a: &[ParamExpr], b: &[ParamExpr]) -> Poly {
    if a.is_empty() || b.is_empty() {
        return vec![ParamExpr::zero()];
    }
    let mut r = vec![ParamExpr::zero(); a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let t = ParamExpr::mul(x.clone(), y.clone());
            r[i + j] = ParamExpr::add(std::mem::take(&mut r[i + j]), t);
        }
    }
    strip(r)
}

pub(crate) fn poly_diff(p: &[ParamExpr], theta: &str) -> Poly {
    strip(p.iter().map(|c| c.diff(theta)).collect())
}

pub(crate) fn poly_is_zero(p: &[ParamExpr]) -> bool {
    p.iter().all(|c| c.is_zero())
}

/// `∂/∂θ (N/D)` as a rational function `(N'D - ND') / D²`.
pub fn tf_param_derivative(num: &[ParamExpr], den: &[ParamExpr], theta: &str) -> (Poly, Poly) {
    let dn = poly_diff(num, theta);
    let dd = poly_diff(den, theta);
    let d2 = poly_mul(den, den);
    if poly_is_zero(&dd) {
        // D is θ-free: N'/D is enough, but keep the D² form for uniformity of
        // the returned denominator.
        return (poly_mul(&dn, den), d2);
    }
    let lhs = poly_mul(&dn, den);
    let rhs = poly_mul(num, &dd);
    (poly_add(&lhs, &rhs, true), d2)
}

pub(crate) fn check_ss_dims(a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix) -> Result<(), String> {
    let n = a.len();
    if n == 0 {
        return Err("A must have at least one row".into());
    }
    if a.iter().any(|r| r.len() != n) {
        return Err(format!("A must be {n}x{n}"));
    }
    if b.len() != n {
        return Err(format!("B must have {n} rows"));
    }
    let m = b[0].len();
    if m == 0 || b.iter().any(|r| r.len() != m) {
        return Err("B rows must share a positive width".into());
    }
    let p = c.len();
    if p == 0 || c.iter().any(|r| r.len() != n) {
        return Err(format!("C must have at least one row of width {n}"));
    }
    if d.len() != p || d.iter().any(|r| r.len() != m) {
        return Err(format!("D must be {p}x{m}"));
    }
    Ok(())
}

fn diff_matrix(m: &Matrix, theta: &str) -> Matrix {
    m.iter().map(|r| r.iter().map(|e| e.diff(theta)).collect()).collect()
}

fn block2(tl: &Matrix, tr_zero_cols: usize, bl: &Matrix, br: &Matrix) -> Matrix {
    let mut out = Vec::with_capacity(tl.len() + bl.len());
    for r in tl {
        let mut row = r.clone();
        row.extend(std::iter::repeat_n(ParamExpr::zero(), tr_zero_cols));
        out.push(row);
    }
    for (l, r) in bl.iter().zip(br) {
        let mut row = l.clone();
        row.extend(r.iter().cloned());
        out.push(row);
    }
    out
}

/// Stack a state-space system with its θ-derivative flow:
/// `[[A,0],[A',A]]`, `[[B,0],[B',B]]`, `[[C,0],[C',C]]`, `[[D,0],[D',D]]`
/// acting on `(x, ∂x/∂θ)` and `(u, ∂u/∂θ)`.
pub fn ss_augment(
    a: &Matrix,
    b: &Matrix,
    c: &Matrix,
    d: &Matrix,
    theta: &str,
) -> Result<StateSpace, DiagramError> {
    check_ss_dims(a, b, c, d).map_err(DiagramError::DimensionMismatch)?;
    let n = a.len();
    let m = b[0].len();
    Ok(StateSpace {
        a: block2(a, n, &diff_matrix(a, theta), a),
        b: block2(b, m, &diff_matrix(b, theta), b),
        c: block2(c, n, &diff_matrix(c, theta), c),
        d: block2(d, m, &diff_matrix(d, theta), d),
    })
}

/// Controllable canonical realization of a proper `N/D`.
pub fn tf_to_ss(num: &[ParamExpr], den: &[ParamExpr]) -> StateSpace {
    let den = strip(den.to_vec());
    let num = strip(num.to_vec());
    let n = den.len() - 1;
    let lead = den[0].clone();
    // monic coefficients a_{n-1} .. a_0 and numerator padded to n+1 terms
    let a_coef: Vec<ParamExpr> = den[1..].iter().map(|c| ParamExpr::div(c.clone(), lead.clone())).collect();
    let mut b_coef: Vec<ParamExpr> = vec![ParamExpr::zero(); n + 1 - num.len().min(n + 1)];
    b_coef.extend(num.iter().map(|c| ParamExpr::div(c.clone(), lead.clone())));
    let bn = b_coef[0].clone();
    if n == 0 {
        return StateSpace { a: vec![], b: vec![], c: vec![], d: vec![vec![bn]] };
    }
    let mut a = vec![vec![ParamExpr::zero(); n]; n];
    for (i, row) in a.iter_mut().enumerate().take(n - 1) {
        row[i + 1] = ParamExpr::one();
    }
    // x_n' = -a_0 x_1 - ... - a_{n-1} x_n + u ; a_coef[k] multiplies s^{n-1-k}
    for j in 0..n {
        a[n - 1][j] = ParamExpr::neg(a_coef[n - 1 - j].clone());
    }
    let mut b = vec![vec![ParamExpr::zero()]; n];
    b[n - 1][0] = ParamExpr::one();
    let c = vec![(0..n)
        .map(|j| {
            // coefficient of s^j in numerator minus b_n * a_j
            let bj = b_coef[n - j].clone();
            let aj = a_coef[n - 1 - j].clone();
            ParamExpr::sub(bj, ParamExpr::mul(bn.clone(), aj))
        })
        .collect()];
    StateSpace { a, b, c, d: vec![vec![bn]] }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::ParamValues;

    fn pe(s: &str) -> ParamExpr {
        s.parse().unwrap()
    }

    fn eval_poly(p: &[ParamExpr], v: &ParamValues) -> Vec<f64> {
        p.iter().map(|c| c.eval(v).unwrap()).collect()
    }

    fn vals() -> ParamValues {
        [("k".to_string(), 2.0), ("tau".to_string(), 0.5)].into_iter().collect()
    }

    #[test]
    fn first_order_tf_derivatives() {
        let num = vec![pe("k")];
        let den = vec![pe("tau"), pe("1")];
        let (n, d) = tf_param_derivative(&num, &den, "tau");
        assert_eq!(eval_poly(&n, &vals()), vec![-2.0, 0.0]);
        assert_eq!(eval_poly(&d, &vals()), vec![0.25, 1.0, 1.0]);
        let (n, d) = tf_param_derivative(&num, &den, "k");
        assert_eq!(eval_poly(&n, &vals()), vec![0.5, 1.0]);
        assert_eq!(eval_poly(&d, &vals()), vec![0.25, 1.0, 1.0]);
        let (n, _) = tf_param_derivative(&num, &den, "zeta");
        assert!(poly_is_zero(&n));
    }

    #[test]
    fn augment_first_order() {
        let a = vec![vec![pe("-1/tau")]];
        let b = vec![vec![pe("k/tau")]];
        let c = vec![vec![pe("1")]];
        let d = vec![vec![pe("0")]];
        let s = ss_augment(&a, &b, &c, &d, "tau").unwrap();
        let v = vals();
        assert_eq!(s.a[1][0].eval(&v).unwrap(), 1.0 / 0.25);
        assert_eq!(s.b[1][0].eval(&v).unwrap(), -2.0 / 0.25);
        assert!(s.a[0][1].is_zero() && s.c[1][0].is_zero());
        assert_eq!(s.a[1][1], a[0][0]);
        assert!(ss_augment(&a, &b, &c, &vec![vec![pe("0"), pe("0")]], "tau").is_err());
    }

    #[test]
    fn canonical_realization() {
        // (2s + 3) / (s^2 + 4s + 5)
        let s = tf_to_ss(&[pe("2"), pe("3")], &[pe("1"), pe("4"), pe("5")]);
        let v = ParamValues::new();
        let ev = |m: &Matrix| -> Vec<Vec<f64>> {
            m.iter().map(|r| r.iter().map(|e| e.eval(&v).unwrap()).collect()).collect()
        };
        assert_eq!(ev(&s.a), vec![vec![0.0, 1.0], vec![-5.0, -4.0]]);
        assert_eq!(ev(&s.b), vec![vec![0.0], vec![1.0]]);
        assert_eq!(ev(&s.c), vec![vec![3.0, 2.0]]);
        assert_eq!(ev(&s.d), vec![vec![0.0]]);
    }
}
