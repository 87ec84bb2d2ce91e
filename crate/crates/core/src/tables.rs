//! Numeric tables regenerated from the live modules.

use crate::analysis::sequence_probe;
use crate::jet::Jet;
use crate::models;
use crate::sim::{step_tape, Method, SimError};
use crate::solvers::{implicit_jet, newton, newton_jet, newton_jet_fixed, sqrt_system, warm_start_probe, SolverError};
use crate::tape::{tape_jet_eval, TapeError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TableError {
    #[error("unknown table `{0}` (expected rk4-derivs, newton-sqrt, sequence or warmstart)")]
    Unknown(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Jet(#[from] crate::jet::JetError),
}

pub const TABLES: [&str; 4] = ["rk4-derivs", "newton-sqrt", "sequence", "warmstart"];

pub fn table(which: &str) -> Result<String, TableError> {
    match which {
        "rk4-derivs" => rk4_table(11),
        "newton-sqrt" => newton_table(),
        "sequence" => Ok(sequence_table()),
        "warmstart" => warmstart_table(),
        _ => Err(TableError::Unknown(which.to_string())),
    }
}

/// Derivatives 1..=order in `h` at `h = 0` of one step of `method` for
/// `f' = -f^2` from `f = 1`.
pub fn step_derivatives(method: Method, order: usize) -> Result<Vec<f64>, TableError> {
    let t = step_tape(&models::riccati(), method)?;
    let x = [Jet::constant(1.0, order)?, Jet::constant(0.0, order)?, Jet::var(0.0, order)?];
    let y = tape_jet_eval(&t, &x)?;
    Ok(y[0].derivatives()[1..].to_vec())
}

fn rk4_table(order: usize) -> Result<String, TableError> {
    let mut s = String::from("method");
    for k in 1..=order {
        s.push_str(&format!("\t{k}"));
    }
    s.push('\n');
    for (name, m) in [("Midpoint", Method::Midpoint), ("RK4", Method::Rk4)] {
        s.push_str(name);
        for d in step_derivatives(m, order)? {
            s.push_str(&format!("\t{}", fmt_sig(d)));
        }
        s.push('\n');
    }
    let exact: Vec<f64> = (1..=order).map(|k| (1..=k).fold(if k % 2 == 0 { 1.0 } else { -1.0 }, |p, i| p * i as f64)).collect();
    s.push_str("exact");
    for d in exact {
        s.push_str(&format!("\t{}", fmt_sig(d)));
    }
    s.push('\n');
    Ok(s)
}

fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() < 1e5 {
        format!("{}", (v * 1e6).round() / 1e6)
    } else {
        format!("{v:.5e}")
    }
}

/// Second derivative of `sqrt(a)` at 1.5: nested implicit differentiation
/// at the root of the tolerance-1e-4 loop from 1.00001, and at the exact
/// root.
pub fn sqrt_second_derivatives() -> Result<(f64, f64), TableError> {
    let s = sqrt_system();
    let loose = newton(&s, &[1.00001], &[1.5], 1e-4, 50)?;
    let tight = newton(&s, &[1.00001], &[1.5], 1e-15, 50)?;
    let d = |x: &[f64]| -> Result<f64, TableError> { Ok(implicit_jet(&s, x, &[1.5], &[1.0], 2)?[0].derivatives()[2]) };
    Ok((d(&loose.x)?, d(&tight.x)?))
}

/// Order-19 derivative of `sqrt(a)` at 2 from Newton on jets started at 1:
/// after `iterations` steps.
pub fn sqrt_jet_derivative(iterations: usize) -> Result<f64, TableError> {
    let a = Jet::var(2.0, 19)?;
    Ok(newton_jet_fixed(&sqrt_system(), &[a], 1.0, iterations)?.derivatives()[19])
}

fn newton_table() -> Result<String, TableError> {
    let (loose, tight) = sqrt_second_derivatives()?;
    let mut s = String::from("quantity\tvalue\n");
    s.push_str(&format!("d2 sqrt(a)/da2 at 1.5, loop tol 1e-4\t{loose:.10}\n"));
    s.push_str(&format!("d2 sqrt(a)/da2 at 1.5, converged\t{tight:.10}\n"));
    s.push_str(&format!("d2 sqrt(a)/da2 at 1.5, exact\t{:.10}\n", -0.25 * 1.5f64.powf(-1.5)));
    for i in [1, 2, 3, 4, 5, 6] {
        s.push_str(&format!("d19 sqrt(a)/da19 at 2, {i} iterations\t{:.10e}\n", sqrt_jet_derivative(i)?));
    }
    let r = newton_jet(&sqrt_system(), &[Jet::var(2.0, 19)?], 1.0, 1e-4, 50)?;
    s.push_str(&format!(
        "d19 sqrt(a)/da19 at 2, tol 1e-4 + margin ({} iterations)\t{:.10e}\n",
        r.iterations,
        r.root.derivatives()[19]
    ));
    let exact = Jet::var(2.0, 19)?.apply(crate::ElementaryFn::Sqrt)?.derivatives()[19];
    s.push_str(&format!("d19 sqrt(a)/da19 at 2, exact\t{exact:.10e}\n"));
    Ok(s)
}

fn sequence_table() -> String {
    let r = sequence_probe();
    let mut s = String::from("quantity\tvalue\n");
    s.push_str(&format!("iterations\t{}\n", r.iterations));
    s.push_str(&format!("value\t({}, {})\n", r.value.0, r.value.1));
    s.push_str(&format!("AD derivative\t{:?}\n", r.ad_derivative));
    for (eps, d) in r.fd {
        s.push_str(&format!("FD derivative, eps {eps:e}\t{d:?}\n"));
    }
    s
}

/// Grid `0.1, 0.101, ..., 2.0`.
pub fn warmstart_grid() -> Vec<f64> {
    (0..=1900).map(|i| 0.1 + i as f64 * 1e-3).collect()
}

fn warmstart_table() -> Result<String, TableError> {
    let mut s = String::from("tol\tlocally constant\tfraction\n");
    for tol in [5e-2, 1e-4, 1e-14] {
        let r = warm_start_probe(&sqrt_system(), 1.0, &warmstart_grid(), tol)?;
        s.push_str(&format!("{tol:e}\t{}\t{:.4}\n", r.constant_points, r.fraction_constant));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_table_renders() {
        for t in TABLES {
            let s = table(t).unwrap();
            assert!(s.lines().count() >= 3, "{t}");
        }
        assert!(table("nope").is_err());
    }

    #[test]
    fn rk4_row() {
        let d = step_derivatives(Method::Rk4, 11).unwrap();
        let want = [-1.0, 2.0, -6.0, 24.0, -115.0, 600.0, -3438.75, 19530.0, -1.0773e5, 5.481e5, -2.44e6];
        for (i, w) in want.iter().enumerate() {
            let tol = if i < 8 { 1e-6 } else { 1e-2 };
            assert!((d[i] - w).abs() <= tol * w.abs(), "{i}: {} vs {w}", d[i]);
        }
    }

    #[test]
    fn newton_values() {
        let (loose, tight) = sqrt_second_derivatives().unwrap();
        assert!((loose - -0.1360827546).abs() < 1e-7);
        assert!((tight - -0.1360827636).abs() < 1e-7);
        assert!((sqrt_jet_derivative(3).unwrap() / 1.141438794e9 - 1.0).abs() < 1e-3);
    }
}
