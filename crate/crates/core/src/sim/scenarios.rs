use super::*;
use crate::diagram::{agdm_diff, BlockKind as K, Diagram};
use crate::jet::Jet;
use crate::models;
use crate::tape::tape_jet_eval;

fn cfg(step: f64, tf: f64) -> SimConfig {
    SimConfig { step, tf, ..SimConfig::default() }
}

fn last(tr: &Trajectory, name: &str) -> f64 {
    *tr.output(name).unwrap().last().unwrap()
}

#[test]
fn riccati_rk4() {
    let tr = integrate(&models::riccati(), &cfg(1e-3, 1.0)).unwrap();
    assert!((last(&tr, "f") - 0.5).abs() < 1e-8);
    assert!((tr.times.last().unwrap() - 1.0).abs() < 1e-15);
    for w in tr.times.windows(2) {
        assert!(w[1] > w[0]);
    }
}

#[test]
fn rk4_fourth_order() {
    let err = |h: f64| (last(&integrate(&models::riccati(), &cfg(h, 1.0)).unwrap(), "f") - 0.5).abs();
    let r = err(0.1) / err(0.05);
    assert!((12.0..=20.0).contains(&r), "{r}");
}

#[test]
fn step_tape_jet_rows() {
    let m = models::riccati();
    let want_rk4 = [-1.0, 2.0, -6.0, 24.0, -115.0, 600.0, -3438.75, 19530.0];
    let want_mid = [-1.0, 2.0, -1.5, 0.0, 0.0, 0.0];
    for (method, want) in [(Method::Rk4, &want_rk4[..]), (Method::Midpoint, &want_mid[..])] {
        let t = step_tape(&m, method).unwrap();
        let order = 8;
        let x = [Jet::constant(1.0, order).unwrap(), Jet::constant(0.0, order).unwrap(), Jet::var(0.0, order).unwrap()];
        let y = &tape_jet_eval(&t, &x).unwrap()[0];
        let d = y.derivatives();
        for (i, w) in want.iter().enumerate() {
            assert!((d[i + 1] - w).abs() <= 1e-9 * w.abs().max(1.0), "{method} {i}: {} vs {w}", d[i + 1]);
        }
    }
}

#[test]
fn first_order_flattens() {
    let m = flatten(&models::first_order(2.0, 0.5)).unwrap();
    assert_eq!(m.state_names, vec!["int"]);
    let l = m.layout();
    let mut inp = vec![0.0; l.width()];
    inp[l.x(0)] = 0.3;
    inp[l.t()] = 1.0;
    inp[l.theta(m.param_index("k").unwrap())] = 2.0;
    inp[l.theta(m.param_index("tau").unwrap())] = 0.5;
    let f = m.rhs.eval(&inp).unwrap()[0];
    assert!((f - (-0.3 + 2.0) / 0.5).abs() < 1e-15);
}

fn tau_oracle(k: f64, tau: f64, t: f64) -> f64 {
    -k * t * (-t / tau).exp() / (tau * tau)
}

#[test]
fn first_order_sensitivity_both_routes() {
    let d = models::first_order(1.0, 0.5);
    let c = cfg(1e-3, 5.0);
    let sens = integrate(&sensitivity_extend(&flatten(&d).unwrap(), "tau").unwrap(), &c).unwrap();
    let agdm = integrate(&flatten(&agdm_diff(&d, "tau").unwrap()).unwrap(), &c).unwrap();
    let (a, b) = (sens.output("dy/dtau").unwrap(), agdm.output("dy/dtau").unwrap());
    let mut worst: f64 = 0.0;
    for (i, &t) in sens.times.iter().enumerate() {
        worst = worst.max((a[i] - tau_oracle(1.0, 0.5, t)).abs());
        assert!((a[i] - b[i]).abs() < 1e-9);
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn pure_gain_has_no_states() {
    let d = Diagram::new("g")
        .block("u", K::Step { time: 0.0, level: ParamExpr::c(3.0), initial: ParamExpr::zero() })
        .block("g", K::Gain { gain: ParamExpr::c(2.0) })
        .link("u.1", "g.1")
        .output("y", "g.1");
    let m = flatten(&d).unwrap();
    assert_eq!(m.layout().n, 0);
    let tr = integrate(&m, &cfg(0.1, 1.0)).unwrap();
    assert!(tr.output("y").unwrap().iter().all(|&v| v == 6.0));
}

#[test]
fn second_order_tf_step() {
    let zeta: f64 = 0.3;
    let d = Diagram::new("tf")
        .block("u", K::Step { time: 0.0, level: ParamExpr::one(), initial: ParamExpr::zero() })
        .block("h", K::TransferFnS {
            num: vec![ParamExpr::one()],
            den: vec![ParamExpr::one(), ParamExpr::c(2.0 * zeta), ParamExpr::one()],
        })
        .link("u.1", "h.1")
        .output("y", "h.1");
    let m = flatten(&d).unwrap();
    assert_eq!(m.layout().n, 2);
    let tr = integrate(&m, &cfg(1e-3, 5.0)).unwrap();
    let wd = (1.0 - zeta * zeta).sqrt();
    let y = tr.output("y").unwrap();
    for (i, &t) in tr.times.iter().enumerate() {
        let exact = 1.0 - (-zeta * t).exp() * ((wd * t).cos() + zeta / wd * (wd * t).sin());
        assert!((y[i] - exact).abs() < 1e-6);
    }
}

#[test]
fn exponential_sensitivity() {
    let params: ParamValues = [("theta".to_string(), 0.5)].into_iter().collect();
    let m = OdeModel::new(&["x"], params, vec![]);
    let l = m.layout();
    let mut b = TapeBuilder::new(l.width());
    let (x, th) = (b.input(l.x(0)), b.input(l.theta(0)));
    let f = b.mul(th, x);
    let m = m.with_rhs(b.finish(vec![f])).with_outputs(&["x"], b.finish(vec![x])).with_init(vec![ParamExpr::one()]);
    let tr = integrate(&sensitivity_extend(&m, "theta").unwrap(), &cfg(1e-3, 2.0)).unwrap();
    let s = last(&tr, "dx/dtheta");
    assert!((s - 2.0 * 1f64.exp()).abs() < 1e-8, "{s}");
    assert!(matches!(sensitivity_extend(&m, "nope"), Err(SimError::UnknownParameter { .. })));
}

#[test]
fn parameter_dependent_start() {
    // x' = -x + t, x(h) = 2, h = theta
    let params: ParamValues = [("h".to_string(), 0.3)].into_iter().collect();
    let mut m = OdeModel::new(&["x"], params, vec![]);
    let l = m.layout();
    let mut b = TapeBuilder::new(l.width());
    let (x, t) = (b.input(l.x(0)), b.input(l.t()));
    let f = b.sub(t, x);
    m = m.with_rhs(b.finish(vec![f])).with_outputs(&["x"], b.finish(vec![x])).with_init(vec![ParamExpr::c(2.0)]);
    m.init_time = Some("h".parse().unwrap());
    let tr = integrate(&sensitivity_extend(&m, "h").unwrap(), &cfg(1e-3, 1.0)).unwrap();
    assert_eq!(tr.times[0], 0.3);
    assert!((tr.outputs[0][1] - -(0.3 - 2.0)).abs() < 1e-15);
    let fd = |h: f64| last(&integrate(&m.with_param("h", h).unwrap(), &cfg(1e-3, 1.0)).unwrap(), "x");
    let e = 1e-5;
    let want = (fd(0.3 + e) - fd(0.3 - e)) / (2.0 * e);
    assert!((last(&tr, "dx/dh") - want).abs() < 1e-6);
}

#[test]
fn dde_method_of_steps() {
    let h = 1.0;
    let m = dde_extend(&models::dde_scalar(h), "h").unwrap();
    let tr = integrate(&m, &cfg(1e-3, 2.0)).unwrap();
    let (x, s) = (tr.output("x").unwrap(), tr.output("dx/dh").unwrap());
    for (i, &t) in tr.times.iter().enumerate() {
        let (xe, se) = if t <= h { (1.0 - t, 0.0) } else { (1.0 - t + (t - h).powi(2) / 2.0, -(t - h)) };
        assert!((x[i] - xe).abs() < 1e-9, "x at {t}");
        assert!((s[i] - se).abs() < 1e-6, "x_h at {t}: {} vs {se}", s[i]);
    }
    assert!(matches!(dde_extend(&models::riccati(), "h"), Err(SimError::UnknownParameter { .. }) | Err(SimError::NoDelays)));
}

#[test]
fn dde_without_prehistory_underflows() {
    let mut m = models::dde_scalar(0.5);
    m.delays[0].prehistory = None;
    assert!(matches!(integrate(&m, &cfg(1e-2, 1.0)), Err(SimError::DelayUnderflow { .. })));
    assert!(matches!(integrate(&models::dde_scalar(1e-3), &cfg(1e-2, 1.0)), Err(SimError::DelayTooShort { .. })));
}

#[test]
fn particle_crossing_and_rebound() {
    let c = cfg(1e-3, 2.0);
    let tr = integrate(&models::particle_step(0.5, -1.0, 1.0).unwrap(), &c).unwrap();
    assert_eq!(tr.events.len(), 1);
    let e = &tr.events[0];
    assert!((e.time - 1.0).abs() < 1e-9);
    assert_eq!(e.pre[0], e.post[0]);
    assert!((e.post[1] - 0.5f64.sqrt()).abs() < 1e-12);
    let q = last(&tr, "q");
    assert!((q - 0.5f64.sqrt() * (2.0 - e.time) - e.post[0]).abs() < 1e-9);

    let tr = integrate(&models::particle_step(2.0, -1.0, 1.0).unwrap(), &c).unwrap();
    assert_eq!(tr.events.len(), 1);
    assert!((tr.events[0].post[1] + 1.0).abs() < 1e-12);
    assert!(last(&tr, "q") < 0.0);
}

#[test]
fn impact_sensitivity_matches_differences() {
    let c = cfg(1e-3, 2.0);
    let m = models::particle_step(0.5, -1.0, 1.2).unwrap();
    let tr = integrate(&sensitivity_extend(&m, "v0").unwrap(), &c).unwrap();
    let q = |v0: f64| last(&integrate(&m.with_param("v0", v0).unwrap(), &c).unwrap(), "q");
    let e = 1e-6;
    let fd = (q(1.2 + e) - q(1.2 - e)) / (2.0 * e);
    // closed form: q(T) = (T - 1/v0) sqrt(v0^2 - delta)
    let (v0, t) = (1.2f64, 2.0);
    let vp = (v0 * v0 - 0.5).sqrt();
    let exact = (t - 1.0 / v0) * v0 / vp + vp / (v0 * v0);
    assert!((fd - exact).abs() < 1e-5, "{fd} {exact}");
    assert!((last(&tr, "dq/dv0") - exact).abs() < 1e-6, "{} {exact}", last(&tr, "dq/dv0"));
}

#[test]
fn reset_refuses_sensitivities() {
    let m = models::riccati().with_param("x", 0.0);
    assert!(m.is_err());
    let mut m = models::particle_step(0.5, -1.0, 1.0).unwrap();
    let l = m.layout();
    let mut b = TapeBuilder::new(l.width());
    let q = b.input(l.x(0));
    let v = b.input(l.x(1));
    let nv = b.neg(v);
    m.events[0].action = EventAction::Reset(b.finish(vec![q, nv]));
    let tr = integrate(&m, &cfg(1e-3, 2.0)).unwrap();
    assert!((tr.events[0].post[1] + 1.0).abs() < 1e-15);
    let s = sensitivity_extend(&m, "v0").unwrap();
    assert!(matches!(integrate(&s, &cfg(1e-3, 2.0)), Err(SimError::SensitivityAcrossEvent { .. })));
}

#[test]
fn smoothing_approaches_event_model() {
    let exact = last(&integrate(&models::particle_step(0.5, -1.0, 1.0).unwrap(), &cfg(1e-3, 2.0)).unwrap(), "q");
    let mut prev = f64::INFINITY;
    for a in [1e1, 1e2, 1e3] {
        let c = SimConfig { heaviside_a: a, ..cfg(1e-4, 2.0) };
        let q = last(&integrate(&models::particle_smooth(0.5, -1.0, 1.0), &c).unwrap(), "q");
        let d = (q - exact).abs();
        assert!(d < prev, "a = {a}: {d} !< {prev}");
        prev = d;
    }
}

#[test]
fn unit_delay_accumulator() {
    // s[k+1] = s[k] + 1 sampled every 0.1
    let d = Diagram::new("acc")
        .block("one", K::Constant { value: ParamExpr::one() })
        .block("sum", K::Sum { signs: "++".into() })
        .block("z", K::UnitDelay { initial: ParamExpr::zero(), sample_time: 0.1 })
        .link("one.1", "sum.1")
        .link("z.1", "sum.2")
        .link("sum.1", "z.1")
        .output("y", "z.1");
    let tr = integrate(&flatten(&d).unwrap(), &cfg(0.01, 1.0)).unwrap();
    let y = tr.output("y").unwrap();
    for (i, &t) in tr.times.iter().enumerate() {
        let k = (t / 0.1 + 1e-9).floor();
        assert_eq!(y[i], k, "t = {t}");
    }
    assert!(matches!(integrate(&flatten(&d).unwrap(), &cfg(0.03, 1.0)), Err(SimError::InvalidConfig(_))));
}

#[test]
fn discrete_loop_derivative() {
    let c = cfg(DISCRETE_STEP, 3.0);
    let d = models::discrete_loop();
    let a = integrate(&flatten(&agdm_diff(&d, "K").unwrap()).unwrap(), &c).unwrap();
    let o = integrate(&flatten(&models::discrete_loop_derivative_oracle()).unwrap(), &c).unwrap();
    let s = integrate(&sensitivity_extend(&flatten(&d).unwrap(), "K").unwrap(), &c).unwrap();
    let (x, y, z) = (a.output("dy/dK").unwrap(), o.output("dy/dK").unwrap(), s.output("dy/dK").unwrap());
    assert!(y.iter().any(|v| v.abs() > 0.1));
    for i in 0..x.len() {
        assert!((x[i] - y[i]).abs() < 1e-8, "{i}: {} {}", x[i], y[i]);
        assert!((x[i] - z[i]).abs() < 1e-12);
    }
}

const DISCRETE_STEP: f64 = 0.01;

#[test]
fn saturated_integrator_pins() {
    let d = Diagram::new("sat")
        .param("r", 1.0)
        .block("u", K::Constant { value: "r".parse().unwrap() })
        .block("i", K::Integrator { initial: ParamExpr::zero(), saturation: Some([-0.5, 0.5]), follow: None })
        .link("u.1", "i.1")
        .output("y", "i.1");
    let m = flatten(&d).unwrap();
    let tr = integrate(&sensitivity_extend(&m, "r").unwrap(), &cfg(1e-3, 1.0)).unwrap();
    assert_eq!(last(&tr, "y"), 0.5);
    let s = tr.output("dy/dr").unwrap();
    // grows like t until the bound is hit at t = 0.5, then frozen
    let i = tr.times.iter().position(|&t| t >= 0.3).unwrap();
    assert!((s[i] - tr.times[i]).abs() < 1e-12);
    assert!((last(&tr, "dy/dr") - 0.5).abs() < 2e-3);
}

#[test]
fn csv_is_deterministic() {
    let d = models::first_order(1.0, 0.5);
    let m = sensitivity_extend(&flatten(&d).unwrap(), "tau").unwrap();
    let a = integrate(&m, &cfg(1e-2, 1.0)).unwrap().to_csv();
    let b = integrate(&m, &cfg(1e-2, 1.0)).unwrap().to_csv();
    assert_eq!(a, b);
    assert!(a.starts_with("t,int,dint/dtau,y,dy/dtau\n"));
}
