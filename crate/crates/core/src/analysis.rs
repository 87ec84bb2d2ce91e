//! Finite-difference oracle, AD/FD comparison, the numeric identifiability
//! test and the precision pathology of rescaled sequences.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::diagram::derivative_output_name;
use crate::dual::Dual;
use crate::sim::{integrate, sensitivity_extend_many, OdeModel, SimConfig, SimError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("finite difference increment must be positive, got {0}")]
    BadIncrement(f64),
    #[error("evaluation failed at {x:?}: {message}")]
    Eval { x: Vec<f64>, message: String },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FdKind {
    Forward,
    Central,
}

/// Increment rule `eps(x) = eps_rel * max(1, |x|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdScheme {
    pub kind: FdKind,
    pub eps_rel: f64,
}

impl FdScheme {
    pub fn forward(eps_rel: f64) -> FdScheme {
        FdScheme { kind: FdKind::Forward, eps_rel }
    }

    pub fn central(eps_rel: f64) -> FdScheme {
        FdScheme { kind: FdKind::Central, eps_rel }
    }

    pub fn increment(&self, x: f64) -> f64 {
        self.eps_rel * x.abs().max(1.0)
    }
}

/// Jacobian of `f` at `x` (outputs × inputs) by finite differences.
pub fn finite_difference<E: std::fmt::Display>(
    f: impl Fn(&[f64]) -> Result<Vec<f64>, E>,
    x: &[f64],
    scheme: FdScheme,
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    if !(scheme.eps_rel > 0.0) {
        return Err(AnalysisError::BadIncrement(scheme.eps_rel));
    }
    let call = |p: &[f64]| f(p).map_err(|e| AnalysisError::Eval { x: p.to_vec(), message: e.to_string() });
    let base = call(x)?;
    let mut jac = vec![vec![0.0; x.len()]; base.len()];
    for i in 0..x.len() {
        let eps = scheme.increment(x[i]);
        let mut p = x.to_vec();
        p[i] = x[i] + eps;
        let hi = call(&p)?;
        let (lo, width) = match scheme.kind {
            FdKind::Forward => (base.clone(), eps),
            FdKind::Central => {
                p[i] = x[i] - eps;
                (call(&p)?, 2.0 * eps)
            }
        };
        if hi.len() != base.len() || lo.len() != base.len() {
            return Err(AnalysisError::ShapeMismatch(format!("output length changed at input {i}")));
        }
        for (r, row) in jac.iter_mut().enumerate() {
            row[i] = (hi[r] - lo[r]) / width;
        }
    }
    Ok(jac)
}

/// Elementwise AD/FD discrepancy. The relative error of an entry is
/// `|ad - fd| / max(|ad|, |fd|, 1)`, so it is symmetric and degrades to
/// the absolute error near zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub max_abs: f64,
    pub max_abs_at: (usize, usize),
    pub max_rel: f64,
    pub max_rel_at: (usize, usize),
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for CompareReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "max abs {:.3e} at {:?}", self.max_abs, self.max_abs_at)?;
        writeln!(f, "max rel {:.3e} at {:?}", self.max_rel, self.max_rel_at)?;
        write!(f, "{} (tol {:e})", if self.pass { "pass" } else { "fail" }, self.tol)
    }
}

pub fn compare_report(ad: &[Vec<f64>], fd: &[Vec<f64>], tol: f64) -> Result<CompareReport, AnalysisError> {
    if ad.len() != fd.len() || ad.iter().zip(fd).any(|(a, b)| a.len() != b.len()) {
        return Err(AnalysisError::ShapeMismatch("AD and FD matrices differ in shape".into()));
    }
    let mut r = CompareReport { max_abs: 0.0, max_abs_at: (0, 0), max_rel: 0.0, max_rel_at: (0, 0), tol, pass: true };
    for (i, (ra, rf)) in ad.iter().zip(fd).enumerate() {
        for (j, (&a, &b)) in ra.iter().zip(rf).enumerate() {
            let abs = (a - b).abs();
            let rel = abs / a.abs().max(b.abs()).max(1.0);
            // NaN counts as the worst possible discrepancy
            if abs > r.max_abs || abs.is_nan() {
                r.max_abs = abs;
                r.max_abs_at = (i, j);
            }
            if rel > r.max_rel || rel.is_nan() {
                r.max_rel = rel;
                r.max_rel_at = (i, j);
            }
        }
    }
    r.pass = r.max_rel <= tol;
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    IdentifiableObservable,
    Inconclusive,
}

/// Sensitivity matrix of the outputs with respect to the chosen
/// parameters (initial conditions included as parameters), one row per
/// output per sample time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentifiabilityReport {
    pub params: Vec<String>,
    pub times: Vec<f64>,
    pub matrix: Vec<Vec<f64>>,
    pub determinant: Option<f64>,
    pub sigma_min: f64,
    pub norm: f64,
    pub verdict: Verdict,
}

/// Scale-normalized threshold on `sigma_min / ||M||_2`.
pub const IDENTIFIABILITY_THRESHOLD: f64 = 1e-8;

pub fn identifiability_test(
    m: &OdeModel,
    params: &[&str],
    times: &[f64],
    cfg: &SimConfig,
) -> Result<IdentifiabilityReport, AnalysisError> {
    let q = m.output_names.len();
    if params.is_empty() || times.len() * q.max(1) < params.len() {
        return Err(AnalysisError::ShapeMismatch(format!(
            "{} times x {} outputs cannot determine {} parameters",
            times.len(),
            q,
            params.len()
        )));
    }
    let ext = sensitivity_extend_many(m, params)?;
    let tf = times.iter().copied().fold(cfg.tf, f64::max);
    let tr = integrate(&ext, &SimConfig { tf, ..cfg.clone() })?;
    let mut matrix = vec![];
    for &t in times {
        for y in &m.output_names {
            let row = params
                .iter()
                .map(|p| tr.output_at(&derivative_output_name(y, p), t).unwrap_or(0.0))
                .collect();
            matrix.push(row);
        }
    }
    let rows = matrix.len();
    let cols = params.len();
    let mat = DMatrix::from_fn(rows.max(1), cols, |i, j| matrix.get(i).map_or(0.0, |r: &Vec<f64>| r[j]));
    let sv = mat.clone().singular_values();
    let norm = sv.iter().copied().fold(0.0, f64::max);
    let sigma_min = if rows >= cols { sv.iter().copied().fold(f64::INFINITY, f64::min) } else { 0.0 };
    let determinant = (rows == cols).then(|| mat.determinant());
    let verdict = if norm > 0.0 && sigma_min / norm > IDENTIFIABILITY_THRESHOLD {
        Verdict::IdentifiableObservable
    } else {
        Verdict::Inconclusive
    };
    Ok(IdentifiabilityReport {
        params: params.iter().map(|s| s.to_string()).collect(),
        times: times.to_vec(),
        matrix,
        determinant,
        sigma_min,
        norm,
        verdict,
    })
}

/// `f(x, n) = (10^n x, n + 1)` iterated from `(0, -10)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceReport {
    pub iterations: usize,
    pub value: (f64, i32),
    pub ad_derivative: f64,
    /// `(eps, forward difference)` pairs.
    pub fd: Vec<(f64, f64)>,
}

fn sequence<T: Copy>(x: T, n: i32, iterations: usize, scale: impl Fn(T, f64) -> T) -> (T, i32) {
    let (mut x, mut n) = (x, n);
    for _ in 0..iterations {
        x = scale(x, 10f64.powi(n));
        n += 1;
    }
    (x, n)
}

pub fn sequence_probe() -> SequenceReport {
    let iterations = 21;
    let (v, n) = sequence(0.0, -10, iterations, |x, s| s * x);
    let (d, _) = sequence(Dual::new(0.0, 1.0), -10, iterations, |x, s| Dual::new(s * x.v, s * x.d));
    let fd = [1e-8, 1e-6]
        .iter()
        .map(|&eps| (eps, (sequence(eps, -10, iterations, |x, s| s * x).0 - v) / eps))
        .collect();
    SequenceReport { iterations, value: (v, n), ad_derivative: d.d, fd }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{ParamExpr, ParamValues};
    use crate::tape::TapeBuilder;

    fn ok(v: Vec<f64>) -> Result<Vec<f64>, String> {
        Ok(v)
    }

    #[test]
    fn fd_examples() {
        let j = finite_difference(|x| ok(vec![x[0] * x[0]]), &[3.0], FdScheme::central(1e-6)).unwrap();
        assert!((j[0][0] - 6.0).abs() < 1e-6);
        let j = finite_difference(|_| ok(vec![4.0]), &[3.0], FdScheme::forward(1e-6)).unwrap();
        assert_eq!(j[0][0], 0.0);
        let err = |s: FdScheme| (finite_difference(|x| ok(vec![x[0].sin()]), &[0.3], s).unwrap()[0][0] - 0.3f64.cos()).abs();
        for eps in [1e-2, 1e-3, 1e-4] {
            assert!(err(FdScheme::central(eps)) < err(FdScheme::forward(eps)));
        }
        assert!(matches!(
            finite_difference(|x| ok(x.to_vec()), &[1.0], FdScheme::central(0.0)),
            Err(AnalysisError::BadIncrement(_))
        ));
    }

    #[test]
    fn compare_examples() {
        let a = vec![vec![1.0, 2.0]];
        let r = compare_report(&a, &a, 0.0).unwrap();
        assert!(r.pass && r.max_rel == 0.0);
        let r = compare_report(&[vec![1.0]], &[vec![1.1]], 0.05).unwrap();
        assert!(!r.pass);
        assert_eq!(r.max_rel_at, (0, 0));
        assert!(compare_report(&[vec![1.0]], &[vec![1.0, 2.0]], 0.1).is_err());
    }

    fn decay(params: &[(&str, f64)], rate: &[&str]) -> OdeModel {
        let pv: ParamValues = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let m = OdeModel::new(&["x"], pv, vec![]);
        let l = m.layout();
        let mut b = TapeBuilder::new(l.width());
        let x = b.input(l.x(0));
        let mut k = x;
        for r in rate {
            let t = b.input(l.theta(m.param_index(r).unwrap()));
            k = b.mul(k, t);
        }
        let f = b.neg(k);
        let rhs = b.finish(vec![f]);
        let out = b.finish(vec![x]);
        m.with_rhs(rhs).with_outputs(&["y"], out).with_init(vec!["c".parse::<ParamExpr>().unwrap()])
    }

    #[test]
    fn identifiable_decay() {
        let m = decay(&[("c", 1.0), ("theta", 1.0)], &["theta"]);
        let cfg = SimConfig { step: 1e-3, tf: 1.0, ..SimConfig::default() };
        let r = identifiability_test(&m, &["c", "theta"], &[0.5, 1.0], &cfg).unwrap();
        assert_eq!(r.verdict, Verdict::IdentifiableObservable);
        // closed form: [e^{-t}, -t e^{-t}] at t = 0.5, 1
        let det = (-0.5f64).exp() * (-(-1f64).exp()) - (-1f64).exp() * (-0.5 * (-0.5f64).exp());
        assert!((r.determinant.unwrap() - det).abs() < 1e-9);
    }

    #[test]
    fn product_is_inconclusive() {
        let m = decay(&[("c", 1.0), ("a", 2.0), ("b", 0.5)], &["a", "b"]);
        let cfg = SimConfig { step: 1e-3, tf: 1.0, ..SimConfig::default() };
        let r = identifiability_test(&m, &["a", "b"], &[0.25, 0.5, 1.0], &cfg).unwrap();
        assert_eq!(r.verdict, Verdict::Inconclusive);
        assert!(matches!(identifiability_test(&m, &["a", "b"], &[1.0], &cfg), Err(AnalysisError::ShapeMismatch(_))));
    }

    #[test]
    fn rescaling_outputs_keeps_verdict() {
        let cfg = SimConfig { step: 1e-3, tf: 1.0, ..SimConfig::default() };
        for c in [1.0, 1e-3, 1e4] {
            let m = decay(&[("c", c), ("theta", 1.0)], &["theta"]);
            // theta only: scaling c scales the single column
            let r = identifiability_test(&m, &["theta"], &[0.5, 1.0], &cfg).unwrap();
            assert_eq!(r.verdict, Verdict::IdentifiableObservable);
        }
    }

    #[test]
    fn sequence_values() {
        let r = sequence_probe();
        assert_eq!(r.value, (0.0, 11));
        assert!((r.ad_derivative - 1.0).abs() < 1e-15);
    }
}
