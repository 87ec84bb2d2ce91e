//! Reference models used by the tests, the table generator and the CLI.

use crate::diagram::{BlockKind as K, Diagram};
use crate::expr::{ParamExpr, ParamValues};
use crate::sim::{DelayKind, DelaySpec, EventSpec, ImpactSurface, OdeModel, SimError, HEAVISIDE_PARAM};
use crate::tape::TapeBuilder;

fn pe(s: &str) -> ParamExpr {
    s.parse().expect("literal expression")
}

fn integrator(initial: &str) -> K {
    K::Integrator { initial: pe(initial), saturation: None, follow: None }
}

fn unit_step() -> K {
    K::Step { time: 0.0, level: ParamExpr::one(), initial: ParamExpr::zero() }
}

/// `y' = (-y + k u) / tau` driven by a unit step.
pub fn first_order(k: f64, tau: f64) -> Diagram {
    Diagram::new("first_order")
        .param("k", k)
        .param("tau", tau)
        .block("u", unit_step())
        .block("gk", K::Gain { gain: pe("k") })
        .block("sum", K::Sum { signs: "+-".into() })
        .block("gt", K::Gain { gain: pe("1/tau") })
        .block("int", integrator("0"))
        .link("u.1", "gk.1")
        .link("gk.1", "sum.1")
        .link("int.1", "sum.2")
        .link("sum.1", "gt.1")
        .link("gt.1", "int.1")
        .output("y", "int.1")
}

/// `x'' = -2 zeta omega x' - omega^2 x + omega^2 u` under a unit step, with
/// the running cost `J = ∫ omega^2 e^2 + q^2 e'^2`, `e = x - u`. For `t > 0`
/// `e' = x'`, which is what the integrand uses.
///
/// Outputs: `y`, `L` (integrand), `J`.
pub fn second_order(zeta: f64) -> Diagram {
    Diagram::new("second_order")
        .param("zeta", zeta)
        .param("omega", 1.0)
        .param("q", 1.0)
        .block("u", unit_step())
        .block("err", K::Sum { signs: "+-".into() })
        .block("w2", K::Gain { gain: pe("omega^2") })
        .block("damp", K::Gain { gain: pe("2*zeta*omega") })
        .block("acc", K::Sum { signs: "+-".into() })
        .block("v", integrator("0"))
        .block("x", integrator("0"))
        .block("e", K::Sum { signs: "+-".into() })
        .block("e2", K::Product { ops: "**".into() })
        .block("we2", K::Gain { gain: pe("omega^2") })
        .block("v2", K::Product { ops: "**".into() })
        .block("qv2", K::Gain { gain: pe("q^2") })
        .block("l", K::Sum { signs: "++".into() })
        .block("j", integrator("0"))
        .link("u.1", "err.1")
        .link("x.1", "err.2")
        .link("err.1", "w2.1")
        .link("v.1", "damp.1")
        .link("w2.1", "acc.1")
        .link("damp.1", "acc.2")
        .link("acc.1", "v.1")
        .link("v.1", "x.1")
        .link("x.1", "e.1")
        .link("u.1", "e.2")
        .link("e.1", "e2.1")
        .link("e.1", "e2.2")
        .link("e2.1", "we2.1")
        .link("v.1", "v2.1")
        .link("v.1", "v2.2")
        .link("v2.1", "qv2.1")
        .link("we2.1", "l.1")
        .link("qv2.1", "l.2")
        .link("l.1", "j.1")
        .output("y", "x.1")
        .output("L", "l.1")
        .output("J", "j.1")
}

/// Sample time of [`discrete_loop`].
pub const DISCRETE_TS: f64 = 0.1;

/// Unit feedback around `K Ts/(z-1)` followed by `(z+1)/(z^2 + a z + b)`.
pub fn discrete_loop() -> Diagram {
    Diagram::new("discrete_loop")
        .param("K", 2.0)
        .param("Ts", DISCRETE_TS)
        .param("a", -1.2)
        .param("b", 0.5)
        .block("u", unit_step())
        .block("sum", K::Sum { signs: "+-".into() })
        .block("integ", K::TransferFnZ {
            num: vec![pe("K*Ts")],
            den: vec![pe("1"), pe("-1")],
            sample_time: DISCRETE_TS,
        })
        .block("plant", K::TransferFnZ {
            num: vec![pe("1"), pe("1")],
            den: vec![pe("1"), pe("a"), pe("b")],
            sample_time: DISCRETE_TS,
        })
        .link("u.1", "sum.1")
        .link("plant.1", "sum.2")
        .link("sum.1", "integ.1")
        .link("integ.1", "plant.1")
        .output("y", "plant.1")
}

/// The closed form of `dY/dK` for [`discrete_loop`] as a single discrete
/// transfer function under the same step, evaluated at the loop's
/// parameter values.
pub fn discrete_loop_derivative_oracle() -> Diagram {
    let (k, ts, a, b) = (2.0, DISCRETE_TS, -1.2, 0.5);
    let num = [1.0, a, b - 1.0, -a, -b].map(|c| ParamExpr::c(ts * c)).to_vec();
    let d = [1.0, a - 1.0, k * ts - a + b, k * ts - b];
    let mut d2 = [0.0; 7];
    for (i, x) in d.iter().enumerate() {
        for (j, y) in d.iter().enumerate() {
            d2[i + j] += x * y;
        }
    }
    Diagram::new("discrete_loop_dk")
        .block("u", unit_step())
        .block("h", K::TransferFnZ { num, den: d2.map(ParamExpr::c).to_vec(), sample_time: ts })
        .link("u.1", "h.1")
        .output("dy/dK", "h.1")
}

/// `x'(t) = -x(t - h)`, `x = 1` for `t <= 0`.
pub fn dde_scalar(h: f64) -> OdeModel {
    let params: ParamValues = [("h".to_string(), h)].into_iter().collect();
    let delay = DelaySpec {
        state: 0,
        delay: pe("h"),
        prehistory: Some(ParamExpr::one()),
        kind: DelayKind::Value,
    };
    let m = OdeModel::new(&["x"], params, vec![delay]);
    let l = m.layout();
    let mut b = TapeBuilder::new(l.width());
    let xd = b.input(l.delayed(0));
    let f = b.neg(xd);
    let x = b.input(l.x(0));
    let rhs = b.finish(vec![f]);
    let out = b.finish(vec![x]);
    m.with_rhs(rhs).with_outputs(&["x"], out).with_init(vec![ParamExpr::one()])
}

/// Unit-mass particle on a line, `q' = v`, `v' = 0`, starting at `q0` with
/// speed `v0`; the potential is `0` for `q < 0` and `delta` for `q >= 0`.
/// Kinetic energy is `v^2`.
pub fn particle_step(delta: f64, q0: f64, v0: f64) -> Result<OdeModel, SimError> {
    let params: ParamValues =
        [("q0".to_string(), q0), ("v0".to_string(), v0), ("delta".to_string(), delta)].into_iter().collect();
    let m = OdeModel::new(&["q", "v"], params, vec![]);
    let l = m.layout();
    let mut b = TapeBuilder::new(l.width());
    let v = b.input(l.x(1));
    let q = b.input(l.x(0));
    let zero = b.constant(0.0);
    let rhs = b.finish(vec![v, zero]);
    let out = b.finish(vec![q, v]);
    let surface = ImpactSurface::plane(&[vec![1.0]], delta, 0.0, &[1.0], 0.0, 0.0)?;
    let ev = EventSpec::impact("step", l, surface, vec![0], vec![1])?;
    Ok(m.with_rhs(rhs)
        .with_outputs(&["q", "v"], out)
        .with_init(vec![pe("q0"), pe("v0")])
        .with_event(ev))
}

/// [`particle_step`] with the potential step smoothed:
/// `E(q) = delta (1/2 + atan(a q)/π)`, so `v' = -E'(q)/2`.
pub fn particle_smooth(delta: f64, q0: f64, v0: f64) -> OdeModel {
    let params: ParamValues = [
        ("q0".to_string(), q0),
        ("v0".to_string(), v0),
        ("delta".to_string(), delta),
        (HEAVISIDE_PARAM.to_string(), 1e3),
    ]
    .into_iter()
    .collect();
    let m = OdeModel::new(&["q", "v"], params, vec![]);
    let l = m.layout();
    let mut b = TapeBuilder::new(l.width());
    let (q, v) = (b.input(l.x(0)), b.input(l.x(1)));
    let a = b.input(l.theta(m.param_index(HEAVISIDE_PARAM).expect("declared")));
    let d = b.input(l.theta(m.param_index("delta").expect("declared")));
    let aq = b.mul(a, q);
    let sq = b.mul(aq, aq);
    let one = b.constant(1.0);
    let den = b.add(one, sq);
    let num = b.mul(d, a);
    let dh = b.div(num, den);
    let acc = b.scale(-0.5 / std::f64::consts::PI, dh);
    let rhs = b.finish(vec![v, acc]);
    let out = b.finish(vec![q, v]);
    m.with_rhs(rhs).with_outputs(&["q", "v"], out).with_init(vec![pe("q0"), pe("v0")])
}

/// `f' = -f^2`, `f(0) = 1`.
pub fn riccati() -> OdeModel {
    let m = OdeModel::new(&["f"], ParamValues::new(), vec![]);
    let l = m.layout();
    let mut b = TapeBuilder::new(l.width());
    let f = b.input(l.x(0));
    let sq = b.mul(f, f);
    let r = b.neg(sq);
    let rhs = b.finish(vec![r]);
    let out = b.finish(vec![f]);
    m.with_rhs(rhs).with_outputs(&["f"], out).with_init(vec![ParamExpr::one()])
}
