//! Fixed-step simulation of flattened models: events, impacts, delays,
//! discrete registers and sensitivity co-integration.
//!
//! Every model tape reads the same input vector
//! `[x (n), z (nz), t, θ (np), delayed (nd)]`; see [`Layout`].

mod flatten;
mod history;
mod impact;
mod integrate;
mod sensitivity;
#[cfg(test)]
mod scenarios;

use std::fmt;
use std::str::FromStr;

use crate::diagram::DiagramError;
use crate::expr::{ExprError, ParamExpr, ParamValues};
use crate::tape::{Tape, TapeBuilder, TapeError};

pub use flatten::flatten;
pub use impact::{impact_update, impact_update_detailed, ImpactBranch, ImpactOutcome, ImpactSurface, SurfaceFrame};
pub use integrate::{integrate, step_tape};
pub use sensitivity::{dde_extend, sensitivity_extend, sensitivity_extend_many};

/// Parameter name whose value is taken from [`SimConfig::heaviside_a`].
pub const HEAVISIDE_PARAM: &str = "heaviside_a";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Diagram(#[from] DiagramError),
    #[error("evaluation failed at t = {time}: {source}")]
    Eval { time: f64, source: TapeError },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("{count} events within one step at t = {time}")]
    EventStorm { time: f64, count: usize },
    #[error("sensitivities cannot cross event `{event}` at t = {time} (only impacts carry them)")]
    SensitivityAcrossEvent { event: String, time: f64 },
    #[error("unknown parameter `{name}` (available: {available})")]
    UnknownParameter { name: String, available: String },
    #[error("delayed value of `{state}` needed at t = {time}, before the start and without prehistory")]
    DelayUnderflow { state: String, time: f64 },
    #[error("delay {delay} is shorter than the step {step}")]
    DelayTooShort { delay: f64, step: f64 },
    #[error("impact metric is singular or not positive definite")]
    SingularMetric,
    #[error("impact is not transversal (normal rate {rate})")]
    NonTransversal { rate: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("model has no delays")]
    NoDelays,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    Midpoint,
    #[default]
    Rk4,
}

impl FromStr for Method {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Method, SimError> {
        match s {
            "midpoint" => Ok(Method::Midpoint),
            "rk4" => Ok(Method::Rk4),
            _ => Err(SimError::InvalidConfig(format!("unknown method `{s}` (midpoint|rk4)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Midpoint => "midpoint",
            Method::Rk4 => "rk4",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub method: Method,
    pub step: f64,
    pub t0: f64,
    pub tf: f64,
    /// Width of the bracket an event time is bisected down to.
    pub event_tol: f64,
    pub heaviside_a: f64,
    pub max_events_per_step: usize,
    /// Re-trigger suppression after an event; `None` means two steps.
    pub deadtime: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            method: Method::Rk4,
            step: 1e-3,
            t0: 0.0,
            tf: 1.0,
            event_tol: 1e-10,
            heaviside_a: 1e3,
            max_events_per_step: 8,
            deadtime: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("step must be positive");
        }
        if !(self.event_tol > 0.0 && self.event_tol < self.step) {
            return bad("event_tol must lie in (0, step)");
        }
        if !(self.heaviside_a > 0.0) {
            return bad("heaviside_a must be positive");
        }
        if !(self.t0.is_finite() && self.tf.is_finite()) {
            return bad("t0 and tf must be finite");
        }
        if self.deadtime.is_some_and(|d| !(d > 0.0)) {
            return bad("deadtime must be positive");
        }
        Ok(())
    }

    pub fn deadtime(&self) -> f64 {
        self.deadtime.unwrap_or(2.0 * self.step)
    }
}

/// Smoothed step `1/2 + atan(a x)/π`.
pub fn smooth_heaviside(a: f64, x: f64) -> f64 {
    0.5 + (a * x).atan() / std::f64::consts::PI
}

/// Positions of the tape inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub nz: usize,
    pub np: usize,
    pub nd: usize,
}

impl Layout {
    pub fn width(&self) -> usize {
        self.n + self.nz + 1 + self.np + self.nd
    }
    pub fn x(&self, i: usize) -> usize {
        i
    }
    pub fn z(&self, i: usize) -> usize {
        self.n + i
    }
    pub fn t(&self) -> usize {
        self.n + self.nz
    }
    pub fn theta(&self, i: usize) -> usize {
        self.n + self.nz + 1 + i
    }
    pub fn delayed(&self, i: usize) -> usize {
        self.n + self.nz + 1 + self.np + i
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayKind {
    /// `x_j(t - h)`
    Value,
    /// `x_j'(t - h)`
    Rate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelaySpec {
    pub state: usize,
    pub delay: ParamExpr,
    /// Value before the start; its rate is taken as zero.
    pub prehistory: Option<ParamExpr>,
    pub kind: DelayKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventAction {
    Impact { surface: ImpactSurface, positions: Vec<usize>, velocities: Vec<usize> },
    /// Maps the model inputs to the new continuous state.
    Reset(Tape),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSpec {
    pub name: String,
    /// Scalar over the model inputs; the event fires where it changes sign.
    pub guard: Tape,
    pub action: EventAction,
    pub deadtime: Option<f64>,
}

impl EventSpec {
    /// Impact event whose guard is the surface's switching function.
    pub fn impact(
        name: &str,
        layout: Layout,
        surface: ImpactSurface,
        positions: Vec<usize>,
        velocities: Vec<usize>,
    ) -> Result<EventSpec, SimError> {
        let nq = surface.dim();
        if positions.len() != nq || velocities.len() != nq {
            return Err(SimError::InvalidModel(format!(
                "impact `{name}` needs {nq} positions and velocities"
            )));
        }
        if positions.iter().chain(&velocities).any(|&i| i >= layout.n) {
            return Err(SimError::InvalidModel(format!("impact `{name}` refers to a missing state")));
        }
        let mut b = TapeBuilder::new(layout.width());
        let mut ins: Vec<_> = positions.iter().map(|&i| b.input(layout.x(i))).collect();
        ins.push(b.input(layout.t()));
        let g = b.import(surface.switching(), &ins);
        Ok(EventSpec {
            name: name.to_string(),
            guard: b.finish(g),
            action: EventAction::Impact { surface, positions, velocities },
            deadtime: None,
        })
    }
}

/// Register update applied at every sample instant.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteUpdate {
    pub sample_time: f64,
    /// New register values from the model inputs.
    pub update: Tape,
}

/// State kept in `[lo, hi]` after every step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamp {
    pub state: usize,
    pub lo: f64,
    pub hi: f64,
}

/// `x[target] += coeff(θ) * rhs[source]` at the start time.
#[derive(Debug, Clone, PartialEq)]
pub struct InitFlow {
    pub target: usize,
    pub source: usize,
    pub coeff: ParamExpr,
}

/// Bookkeeping of a sensitivity-extended model: state `j` of direction `k`
/// sits at `base_n * (1 + k) + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent {
    pub base_n: usize,
    pub base_nz: usize,
    pub thetas: Vec<usize>,
    /// Extended more than once; events are then refused.
    pub nested: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeModel {
    pub state_names: Vec<String>,
    pub register_names: Vec<String>,
    pub output_names: Vec<String>,
    /// Parameter order of the θ inputs.
    pub params: Vec<String>,
    pub param_values: ParamValues,
    pub rhs: Tape,
    pub outputs: Tape,
    pub init: Vec<ParamExpr>,
    pub init_registers: Vec<ParamExpr>,
    /// Start time; overrides the configured `t0`.
    pub init_time: Option<ParamExpr>,
    pub init_flow: Vec<InitFlow>,
    pub events: Vec<EventSpec>,
    pub delays: Vec<DelaySpec>,
    pub discrete: Option<DiscreteUpdate>,
    pub clamps: Vec<Clamp>,
    /// Times where the right-hand side may jump.
    pub breakpoints: Vec<f64>,
    pub tangent: Option<Tangent>,
}

impl OdeModel {
    /// Skeleton with zero dynamics, no outputs and zero initial state.
    /// Parameters are ordered by name.
    pub fn new(states: &[&str], params: ParamValues, delays: Vec<DelaySpec>) -> OdeModel {
        let n = states.len();
        let layout = Layout { n, nz: 0, np: params.len(), nd: delays.len() };
        let mut b = TapeBuilder::new(layout.width());
        let z = b.constant(0.0);
        OdeModel {
            state_names: states.iter().map(|s| s.to_string()).collect(),
            register_names: vec![],
            output_names: vec![],
            params: params.keys().cloned().collect(),
            param_values: params,
            rhs: b.finish(vec![z; n]),
            outputs: b.finish(vec![]),
            init: vec![ParamExpr::zero(); n],
            init_registers: vec![],
            init_time: None,
            init_flow: vec![],
            events: vec![],
            delays,
            discrete: None,
            clamps: vec![],
            breakpoints: vec![],
            tangent: None,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout {
            n: self.state_names.len(),
            nz: self.register_names.len(),
            np: self.params.len(),
            nd: self.delays.len(),
        }
    }

    pub fn param_index(&self, name: &str) -> Result<usize, SimError> {
        self.params.iter().position(|p| p == name).ok_or_else(|| SimError::UnknownParameter {
            name: name.to_string(),
            available: self.params.join(", "),
        })
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.state_names.iter().position(|s| s == name)
    }

    pub fn output_index(&self, name: &str) -> Option<usize> {
        self.output_names.iter().position(|s| s == name)
    }

    pub fn with_rhs(mut self, rhs: Tape) -> OdeModel {
        self.rhs = rhs;
        self
    }

    pub fn with_outputs(mut self, names: &[&str], outputs: Tape) -> OdeModel {
        self.output_names = names.iter().map(|s| s.to_string()).collect();
        self.outputs = outputs;
        self
    }

    pub fn with_init(mut self, init: Vec<ParamExpr>) -> OdeModel {
        self.init = init;
        self
    }

    pub fn with_event(mut self, e: EventSpec) -> OdeModel {
        self.events.push(e);
        self
    }

    /// Value of every parameter in `params` order.
    pub fn theta(&self) -> Result<Vec<f64>, SimError> {
        self.params
            .iter()
            .map(|p| {
                self.param_values.get(p).copied().ok_or_else(|| {
                    SimError::InvalidModel(format!("parameter `{p}` has no value"))
                })
            })
            .collect()
    }

    /// Copy with parameter `name` set to `value`.
    pub fn with_param(&self, name: &str, value: f64) -> Result<OdeModel, SimError> {
        self.param_index(name)?;
        let mut m = self.clone();
        m.param_values.insert(name.to_string(), value);
        Ok(m)
    }

    /// Structural consistency of tapes and indices.
    pub fn check(&self) -> Result<(), SimError> {
        let l = self.layout();
        let w = l.width();
        let bad = |m: String| Err(SimError::InvalidModel(m));
        if self.rhs.num_inputs() != w || self.rhs.outputs().len() != l.n {
            return bad(format!("rhs must map {w} inputs to {} values", l.n));
        }
        if self.outputs.num_inputs() != w || self.outputs.outputs().len() != self.output_names.len() {
            return bad(format!("outputs must map {w} inputs to {} values", self.output_names.len()));
        }
        if self.init.len() != l.n || self.init_registers.len() != l.nz {
            return bad("initial values do not match the state counts".into());
        }
        for e in &self.events {
            if e.guard.num_inputs() != w || e.guard.outputs().len() != 1 {
                return bad(format!("guard of `{}` must be scalar over {w} inputs", e.name));
            }
            if let EventAction::Reset(r) = &e.action {
                if r.num_inputs() != w || r.outputs().len() != l.n {
                    return bad(format!("reset of `{}` must map {w} inputs to {} values", e.name, l.n));
                }
            }
            if e.deadtime.is_some_and(|d| !(d > 0.0)) {
                return bad(format!("deadtime of `{}` must be positive", e.name));
            }
        }
        if self.delays.iter().any(|d| d.state >= l.n) || self.clamps.iter().any(|c| c.state >= l.n) {
            return bad("delay or clamp refers to a missing state".into());
        }
        if self.init_flow.iter().any(|f| f.target >= l.n || f.source >= l.n) {
            return bad("initial flow refers to a missing state".into());
        }
        match &self.discrete {
            Some(d) => {
                if d.update.num_inputs() != w || d.update.outputs().len() != l.nz {
                    return bad(format!("register update must map {w} inputs to {} values", l.nz));
                }
                if !(d.sample_time > 0.0) {
                    return bad("sample time must be positive".into());
                }
            }
            None if l.nz > 0 => return bad("registers without an update".into()),
            None => {}
        }
        Ok(())
    }
}

/// `name` as a CSV field, quoted when it holds a comma or a quote.
pub fn csv_field(name: &str) -> std::borrow::Cow<'_, str> {
    if name.contains([',', '"', '\n']) {
        format!("\"{}\"", name.replace('"', "\"\"")).into()
    } else {
        name.into()
    }
}

/// One firing of an event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub guard: usize,
    pub name: String,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    pub pre_outputs: Vec<f64>,
    pub post_outputs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub state_names: Vec<String>,
    pub output_names: Vec<String>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub events: Vec<EventRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn output(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.output_names.iter().position(|n| n == name)?;
        Some(self.outputs.iter().map(|r| r[j]).collect())
    }

    pub fn state(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.state_names.iter().position(|n| n == name)?;
        Some(self.states.iter().map(|r| r[j]).collect())
    }

    pub fn final_state(&self) -> Option<&[f64]> {
        self.states.last().map(|v| v.as_slice())
    }

    /// Value of output `name` at the last recorded time `<= t`.
    pub fn output_at(&self, name: &str, t: f64) -> Option<f64> {
        let j = self.output_names.iter().position(|n| n == name)?;
        let i = self.times.partition_point(|&s| s <= t + 1e-12 * t.abs().max(1.0));
        (i > 0).then(|| self.outputs[i - 1][j])
    }

    /// CSV with one row per accepted step and two rows (pre, post) per event.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for n in self.state_names.iter().chain(&self.output_names) {
            s.push(',');
            s.push_str(&csv_field(n));
        }
        s.push('\n');
        let row = |s: &mut String, t: f64, x: &[f64], y: &[f64]| {
            s.push_str(&format!("{t:.16e}"));
            for v in x.iter().chain(y) {
                s.push_str(&format!(",{v:.16e}"));
            }
            s.push('\n');
        };
        let mut ev = self.events.iter().peekable();
        for (i, &t) in self.times.iter().enumerate() {
            while let Some(e) = ev.next_if(|e| e.time <= t) {
                row(&mut s, e.time, &e.pre, &e.pre_outputs);
                row(&mut s, e.time, &e.post, &e.post_outputs);
            }
            row(&mut s, t, &self.states[i], &self.outputs[i]);
        }
        for e in ev {
            row(&mut s, e.time, &e.pre, &e.pre_outputs);
            row(&mut s, e.time, &e.post, &e.post_outputs);
        }
        s
    }
}

/// Re-home `tape` onto `width` inputs, old input `j` reading `map[j]`.
pub(crate) fn remap_inputs(tape: &Tape, width: usize, map: &[usize]) -> Tape {
    let mut b = TapeBuilder::new(width);
    let ins: Vec<_> = map.iter().map(|&j| b.input(j)).collect();
    let out = b.import(tape, &ins);
    b.finish(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heaviside_values() {
        assert_eq!(smooth_heaviside(7.0, 0.0), 0.5);
        assert!((smooth_heaviside(1e3, 0.1) - 0.99682).abs() < 5e-6);
        let xs: Vec<f64> = (-100..=100).map(|i| i as f64 * 0.05).collect();
        for w in xs.windows(2) {
            assert!(smooth_heaviside(3.0, w[0]) < smooth_heaviside(3.0, w[1]));
        }
        assert!(smooth_heaviside(1e3, -1e9) < 1e-9);
        assert!(smooth_heaviside(1e3, 1e9) > 1.0 - 1e-9);
    }

    #[test]
    fn config_checks() {
        assert!(SimConfig::default().validate().is_ok());
        let c = SimConfig { event_tol: 1.0, ..SimConfig::default() };
        assert!(matches!(c.validate(), Err(SimError::InvalidConfig(_))));
        let c = SimConfig { heaviside_a: 0.0, ..SimConfig::default() };
        assert!(c.validate().is_err());
        assert_eq!("midpoint".parse::<Method>().unwrap(), Method::Midpoint);
        assert!("euler".parse::<Method>().is_err());
    }

    #[test]
    fn csv_interleaves_events() {
        let tr = Trajectory {
            state_names: vec!["x".into()],
            output_names: vec!["y".into()],
            times: vec![0.0, 1.0],
            states: vec![vec![1.0], vec![2.0]],
            outputs: vec![vec![3.0], vec![4.0]],
            events: vec![EventRecord {
                time: 0.5,
                guard: 0,
                name: "e".into(),
                pre: vec![5.0],
                post: vec![6.0],
                pre_outputs: vec![7.0],
                post_outputs: vec![8.0],
            }],
        };
        let csv = tr.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x,y");
        assert_eq!(lines.len(), 5);
        assert!(lines[2].starts_with("5.0000000000000000e-1,5.0000000000000000e0"));
        assert!(lines[3].ends_with(",8.0000000000000000e0"));
    }
}
