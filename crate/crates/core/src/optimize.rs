//! Scalar parameter optimization of an accumulated cost, driven by the
//! sensitivity of the cost (or its finite difference).

use serde::Serialize;

use crate::analysis::{finite_difference, AnalysisError, FdScheme};
use crate::diagram::derivative_output_name;
use crate::sim::{integrate, sensitivity_extend, OdeModel, SimConfig, SimError, Trajectory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimizeError {
    #[error("model has no output `{0}`")]
    UnknownOutput(String),
    #[error("decimation interval {0} must be a positive multiple of the step")]
    BadDecimation(f64),
    #[error("no convergence after {} evaluations; last theta {}", .history.len(), .history.last().map_or(f64::NAN, |h| h.theta))]
    NoConvergence { history: Vec<Iterate> },
    #[error("derivative of the cost is flat between theta = {a} and {b}; secant stalled")]
    Stalled { a: f64, b: f64, history: Vec<Iterate> },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Jacobian {
    Ad,
    Fd,
}

impl std::str::FromStr for Jacobian {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ad" => Ok(Jacobian::Ad),
            "fd" => Ok(Jacobian::Fd),
            _ => Err(format!("unknown jacobian `{s}` (expected ad or fd)")),
        }
    }
}

/// How the cost is read from a trajectory. Without decimation the cost is
/// the final value of `accumulator` when given, else a left-rectangle sum of
/// `integrand` over the step grid. With decimation `T` it is
/// `sum_k T * integrand(k T)` for `k T < tf`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub integrand: String,
    pub accumulator: Option<String>,
    pub decimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeConfig {
    pub theta: String,
    pub theta0: f64,
    pub bounds: (f64, f64),
    pub jacobian: Jacobian,
    pub cost: CostSpec,
    pub sim: SimConfig,
    /// First secant probe `theta0 + probe`.
    pub probe: f64,
    pub xtol: f64,
    pub max_iter: usize,
    /// Cap on a single secant step.
    pub max_step: f64,
    pub fd_eps: f64,
}

impl OptimizeConfig {
    pub fn new(theta: &str, theta0: f64, cost: CostSpec, sim: SimConfig) -> OptimizeConfig {
        OptimizeConfig {
            theta: theta.to_string(),
            theta0,
            bounds: (0.001, 3.0),
            jacobian: Jacobian::Ad,
            cost,
            sim,
            probe: 1e-4,
            xtol: 1e-9,
            max_iter: 60,
            max_step: 0.5,
            fd_eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Iterate {
    pub theta: f64,
    pub cost: f64,
    pub gradient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizeResult {
    pub theta: f64,
    pub cost: f64,
    pub gradient: f64,
    pub iterations: usize,
    pub history: Vec<Iterate>,
}

struct Objective<'a> {
    base: &'a OdeModel,
    ext: Option<OdeModel>,
    cfg: &'a OptimizeConfig,
}

impl Objective<'_> {
    fn read(&self, tr: &Trajectory, integrand: &str, accumulator: Option<&str>) -> Result<f64, OptimizeError> {
        let missing = |n: &str| OptimizeError::UnknownOutput(n.to_string());
        let c = &self.cfg.cost;
        let sim = &self.cfg.sim;
        let t0 = tr.times.first().copied().unwrap_or(sim.t0);
        match (c.decimate, accumulator) {
            (Some(dt), _) => {
                let n = ((sim.tf - t0) / dt - 1e-9).ceil().max(0.0) as usize;
                let mut s = 0.0;
                for k in 0..n {
                    s += dt * tr.output_at(integrand, t0 + k as f64 * dt).ok_or_else(|| missing(integrand))?;
                }
                Ok(s)
            }
            (None, Some(acc)) => tr.output(acc).and_then(|v| v.last().copied()).ok_or_else(|| missing(acc)),
            (None, None) => {
                let l = tr.output(integrand).ok_or_else(|| missing(integrand))?;
                Ok(tr.times.windows(2).zip(&l).map(|(w, v)| (w[1] - w[0]) * v).sum())
            }
        }
    }

    fn cost(&self, theta: f64) -> Result<f64, OptimizeError> {
        let c = &self.cfg.cost;
        let tr = integrate(&self.base.with_param(&self.cfg.theta, theta)?, &self.cfg.sim)?;
        self.read(&tr, &c.integrand, c.accumulator.as_deref())
    }

    fn eval(&self, theta: f64) -> Result<Iterate, OptimizeError> {
        let c = &self.cfg.cost;
        match &self.ext {
            Some(ext) => {
                let tr = integrate(&ext.with_param(&self.cfg.theta, theta)?, &self.cfg.sim)?;
                let cost = self.read(&tr, &c.integrand, c.accumulator.as_deref())?;
                let di = derivative_output_name(&c.integrand, &self.cfg.theta);
                let da = c.accumulator.as_ref().map(|a| derivative_output_name(a, &self.cfg.theta));
                let gradient = self.read(&tr, &di, da.as_deref())?;
                Ok(Iterate { theta, cost, gradient })
            }
            None => {
                let cost = self.cost(theta)?;
                let g = finite_difference(|x| self.cost(x[0]).map(|v| vec![v]), &[theta], FdScheme::central(self.cfg.fd_eps))?;
                Ok(Iterate { theta, cost, gradient: g[0][0] })
            }
        }
    }
}

/// Secant iteration on `dJ/dtheta = 0`, clamped to the bounds, with steps
/// capped at `max_step` and steps that would climb replaced by a capped
/// gradient step.
pub fn optimize(m: &OdeModel, cfg: &OptimizeConfig) -> Result<OptimizeResult, OptimizeError> {
    m.param_index(&cfg.theta)?;
    if let Some(dt) = cfg.cost.decimate {
        let r = dt / cfg.sim.step;
        if !(dt > 0.0) || (r - r.round()).abs() > 1e-9 * r.max(1.0) {
            return Err(OptimizeError::BadDecimation(dt));
        }
    }
    for n in std::iter::once(&cfg.cost.integrand).chain(&cfg.cost.accumulator) {
        if m.output_index(n).is_none() {
            return Err(OptimizeError::UnknownOutput(n.clone()));
        }
    }
    let ext = match cfg.jacobian {
        Jacobian::Ad => Some(sensitivity_extend(m, &cfg.theta)?),
        Jacobian::Fd => None,
    };
    let obj = Objective { base: m, ext, cfg };
    let (lo, hi) = cfg.bounds;
    let clamp = |t: f64| t.clamp(lo, hi);
    let mut history = vec![];

    let mut a = obj.eval(clamp(cfg.theta0))?;
    history.push(a);
    if a.gradient == 0.0 {
        return Ok(done(a, history));
    }
    let mut t1 = clamp(a.theta + cfg.probe);
    if t1 == a.theta {
        t1 = clamp(a.theta - cfg.probe);
    }
    for _ in 0..cfg.max_iter {
        let b = obj.eval(t1)?;
        history.push(b);
        if b.gradient == 0.0 {
            return Ok(done(b, history));
        }
        let dg = b.gradient - a.gradient;
        if dg == 0.0 {
            return Err(OptimizeError::Stalled { a: a.theta, b: b.theta, history });
        }
        let slope = dg / (b.theta - a.theta);
        let mut step = -b.gradient / slope;
        if slope < 0.0 {
            step = -b.gradient.signum() * step.abs();
        }
        step = step.clamp(-cfg.max_step, cfg.max_step);
        let next = clamp(b.theta + step);
        if (next - b.theta).abs() <= cfg.xtol * b.theta.abs().max(1.0) {
            return Ok(done(b, history));
        }
        a = b;
        t1 = next;
    }
    Err(OptimizeError::NoConvergence { history })
}

fn done(it: Iterate, history: Vec<Iterate>) -> OptimizeResult {
    OptimizeResult { theta: it.theta, cost: it.cost, gradient: it.gradient, iterations: history.len(), history }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagram::{BlockKind as K, Diagram};
    use crate::expr::ParamExpr;
    use crate::sim::flatten;

    fn toy() -> OdeModel {
        let d = Diagram::new("toy")
            .param("theta", 0.5)
            .block("c", K::Constant { value: "(theta-2)^2".parse().unwrap() })
            .block("j", K::Integrator { initial: ParamExpr::zero(), saturation: None, follow: None })
            .link("c.1", "j.1")
            .output("L", "c.1")
            .output("J", "j.1");
        flatten(&d).unwrap()
    }

    fn cost(acc: bool, decimate: Option<f64>) -> CostSpec {
        CostSpec { integrand: "L".into(), accumulator: acc.then(|| "J".into()), decimate }
    }

    #[test]
    fn quadratic_toy() {
        let sim = SimConfig { step: 0.01, tf: 1.0, ..SimConfig::default() };
        for (j, acc, dec) in [(Jacobian::Ad, true, None), (Jacobian::Fd, true, None), (Jacobian::Ad, false, Some(0.1))] {
            let mut c = OptimizeConfig::new("theta", 0.5, cost(acc, dec), sim.clone());
            c.jacobian = j;
            let r = optimize(&toy(), &c).unwrap();
            assert!((r.theta - 2.0).abs() < 1e-10 || (j == Jacobian::Fd && (r.theta - 2.0).abs() < 1e-6), "{j:?}: {}", r.theta);
        }
    }

    #[test]
    fn bounds_hold() {
        let sim = SimConfig { step: 0.01, tf: 1.0, ..SimConfig::default() };
        let mut c = OptimizeConfig::new("theta", 0.5, cost(true, None), sim);
        c.bounds = (0.0, 1.5);
        let r = optimize(&toy(), &c).unwrap();
        assert!(r.history.iter().all(|h| (0.0..=1.5).contains(&h.theta)));
        assert_eq!(r.theta, 1.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        let sim = SimConfig { step: 0.01, tf: 1.0, ..SimConfig::default() };
        let c = OptimizeConfig::new("theta", 0.5, cost(false, Some(0.015)), sim.clone());
        assert!(matches!(optimize(&toy(), &c), Err(OptimizeError::BadDecimation(_))));
        let c = OptimizeConfig::new("nope", 0.5, cost(true, None), sim.clone());
        assert!(matches!(optimize(&toy(), &c), Err(OptimizeError::Sim(SimError::UnknownParameter { .. }))));
        let mut c = OptimizeConfig::new("theta", 0.5, cost(true, None), sim);
        c.cost.integrand = "nope".into();
        assert!(matches!(optimize(&toy(), &c), Err(OptimizeError::UnknownOutput(_))));
    }
}
