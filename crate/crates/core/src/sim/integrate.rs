//! Fixed-step integration with event localization.

use super::history::{History, Lookup};
use super::{
    DelayKind, EventAction, EventRecord, Method, OdeModel, SimConfig, SimError, Trajectory, HEAVISIDE_PARAM,
};
use crate::expr::ParamValues;
use crate::tape::{forward_gradient, Tape, TapeBuilder};

struct Run<'a> {
    m: &'a OdeModel,
    c: &'a SimConfig,
    theta: Vec<f64>,
    /// (delay, prehistory)
    delays: Vec<(f64, Option<f64>)>,
    hist: History,
}

fn crossed(g0: f64, g1: f64) -> bool {
    (g0 < 0.0 && g1 >= 0.0) || (g0 > 0.0 && g1 <= 0.0)
}

impl Run<'_> {
    fn inputs(&self, x: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>, SimError> {
        let l = self.m.layout();
        let mut v = Vec::with_capacity(l.width());
        v.extend_from_slice(x);
        v.extend_from_slice(z);
        v.push(t);
        v.extend_from_slice(&self.theta);
        for (spec, &(h, pre)) in self.m.delays.iter().zip(&self.delays) {
            let s = t - h;
            let val = match self.hist.get(spec.state, s, spec.kind) {
                Lookup::Value(v) => v,
                Lookup::Before => match (pre, spec.kind) {
                    (Some(p), DelayKind::Value) => p,
                    (Some(_), DelayKind::Rate) => 0.0,
                    (None, _) => {
                        return Err(SimError::DelayUnderflow {
                            state: self.m.state_names[spec.state].clone(),
                            time: s,
                        })
                    }
                },
                Lookup::After => return Err(SimError::DelayTooShort { delay: h, step: self.c.step }),
            };
            v.push(val);
        }
        Ok(v)
    }

    fn eval(&self, tape: &Tape, x: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>, SimError> {
        let inp = self.inputs(x, z, t)?;
        tape.eval(&inp).map_err(|source| SimError::Eval { time: t, source })
    }

    fn rhs(&self, x: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>, SimError> {
        self.eval(&self.m.rhs, x, z, t)
    }

    fn clamp(&self, x: &mut [f64]) {
        for c in &self.m.clamps {
            x[c.state] = x[c.state].clamp(c.lo, c.hi);
        }
    }

    /// One step of length `h`; with `left` the final stage reads the time
    /// just before `t + h`.
    fn step(&self, x: &[f64], z: &[f64], t: f64, h: f64, left: bool) -> Result<Vec<f64>, SimError> {
        let axpy = |a: f64, k: &[f64]| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect() };
        let te = if left { (t + h).next_down() } else { t + h };
        let mut out = match self.c.method {
            Method::Midpoint => {
                let k1 = self.rhs(x, z, t)?;
                let k2 = self.rhs(&axpy(h / 2.0, &k1), z, t + h / 2.0)?;
                axpy(h, &k2)
            }
            Method::Rk4 => {
                let k1 = self.rhs(x, z, t)?;
                let k2 = self.rhs(&axpy(h / 2.0, &k1), z, t + h / 2.0)?;
                let k3 = self.rhs(&axpy(h / 2.0, &k2), z, t + h / 2.0)?;
                let k4 = self.rhs(&axpy(h, &k3), z, te)?;
                x.iter()
                    .enumerate()
                    .map(|(i, xi)| xi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                    .collect()
            }
        };
        self.clamp(&mut out);
        Ok(out)
    }

    fn guards(&self, x: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>, SimError> {
        self.m.events.iter().map(|e| Ok(self.eval(&e.guard, x, z, t)?[0])).collect()
    }

    fn row(&self, tr: &mut Trajectory, x: &[f64], z: &[f64], t: f64) -> Result<(), SimError> {
        let y = self.eval(&self.m.outputs, x, z, t)?;
        tr.times.push(t);
        tr.states.push(x.to_vec());
        tr.outputs.push(y);
        Ok(())
    }

    fn remember(&mut self, x: &[f64], z: &[f64], t: f64) -> Result<(), SimError> {
        if !self.m.delays.is_empty() {
            let f = self.rhs(x, z, t)?;
            self.hist.push(t, x, &f);
        }
        Ok(())
    }

    /// New continuous state after event `e` fires at `(x, t)`.
    fn act(&self, e: usize, x: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>, SimError> {
        let ev = &self.m.events[e];
        let refuse = || SimError::SensitivityAcrossEvent { event: ev.name.clone(), time: t };
        match &ev.action {
            EventAction::Reset(r) => {
                if self.m.tangent.is_some() {
                    return Err(refuse());
                }
                self.eval(r, x, z, t)
            }
            EventAction::Impact { surface, positions, velocities } => {
                let q: Vec<f64> = positions.iter().map(|&i| x[i]).collect();
                let v: Vec<f64> = velocities.iter().map(|&i| x[i]).collect();
                let Some(tg) = &self.m.tangent else {
                    let o = super::impact_update_detailed(surface, &q, &v, t)?;
                    let mut post = x.to_vec();
                    for (&i, vi) in velocities.iter().zip(o.velocity) {
                        post[i] = vi;
                    }
                    return Ok(post);
                };
                if tg.nested {
                    return Err(refuse());
                }
                let nb = tg.base_n;
                let nq = q.len();
                let (o, jac) = surface.jacobian(&q, &v, t)?;
                let mut post = x.to_vec();
                for (&i, &vi) in velocities.iter().zip(&o.velocity) {
                    post[i] = vi;
                }
                let l = self.m.layout();
                let inp = self.inputs(x, z, t)?;
                let fm = self.rhs(x, z, t)?;
                let fp = self.rhs(&post, z, t)?;
                let g = forward_gradient(&ev.guard, &inp).map_err(|source| SimError::Eval { time: t, source })?;
                let g = &g[0];
                let gx = &g[..nb];
                let gf: f64 = (0..nb).map(|i| gx[i] * fm[i]).sum::<f64>() + g[l.t()];
                if gf.abs() < 1e-300 {
                    return Err(SimError::NonTransversal { rate: gf });
                }
                for (k, &th) in tg.thetas.iter().enumerate() {
                    let off = nb * (1 + k);
                    let s = &x[off..off + nb];
                    let gs: f64 = (0..nb).map(|i| gx[i] * s[i]).sum::<f64>() + g[l.theta(th)];
                    let tau = -gs / gf;
                    let w: Vec<f64> = (0..nb).map(|i| s[i] + fm[i] * tau).collect();
                    let mut sp = w.clone();
                    for (r, &vi) in velocities.iter().enumerate() {
                        let mut acc = jac[r][2 * nq] * tau;
                        for c in 0..nq {
                            acc += jac[r][c] * w[positions[c]] + jac[r][nq + c] * w[velocities[c]];
                        }
                        sp[vi] = acc;
                    }
                    for i in 0..nb {
                        post[off + i] = sp[i] - fp[i] * tau;
                    }
                }
                Ok(post)
            }
        }
    }

    /// Earliest event in `(t, t1]`: index, time and state there.
    fn locate(
        &self,
        x: &[f64],
        z: &[f64],
        t: f64,
        x1: &[f64],
        t1: f64,
        left: bool,
        dead: &[f64],
    ) -> Result<Option<(usize, f64, Vec<f64>)>, SimError> {
        if self.m.events.is_empty() {
            return Ok(None);
        }
        let g0 = self.guards(x, z, t)?;
        let g1 = self.guards(x1, z, t1)?;
        let mut best: Option<(usize, f64)> = None;
        for e in 0..g0.len() {
            if t1 <= dead[e] || !crossed(g0[e], g1[e]) {
                continue;
            }
            let (mut lo, mut hi) = (t, t1);
            while hi - lo > self.c.event_tol {
                let mid = 0.5 * (lo + hi);
                let xm = self.step(x, z, t, mid - t, false)?;
                let gm = self.eval(&self.m.events[e].guard, &xm, z, mid)?[0];
                if crossed(g0[e], gm) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            if best.is_none_or(|(_, tb)| hi < tb) {
                best = Some((e, hi));
            }
        }
        let Some((e, te)) = best else { return Ok(None) };
        let xe = if te == t1 { x1.to_vec() } else { self.step(x, z, t, te - t, left && te == t1)? };
        Ok(Some((e, te, xe)))
    }
}

/// Parameter values with the smoothing slope taken from the configuration.
fn effective_params(m: &OdeModel, c: &SimConfig) -> ParamValues {
    let mut pv = m.param_values.clone();
    if let Some(a) = pv.get_mut(HEAVISIDE_PARAM) {
        *a = c.heaviside_a;
    }
    pv
}

/// Integrate `m` over `[t0, tf]` on a fixed grid.
pub fn integrate(m: &OdeModel, c: &SimConfig) -> Result<Trajectory, SimError> {
    c.validate()?;
    m.check()?;
    let pv = effective_params(m, c);
    let theta = m.params.iter().map(|p| pv[p]).collect::<Vec<_>>();
    let t0 = match &m.init_time {
        Some(e) => e.eval(&pv)?,
        None => c.t0,
    };
    if !(c.tf > t0) {
        return Err(SimError::InvalidConfig(format!("tf = {} must exceed the start time {t0}", c.tf)));
    }
    let mut delays = vec![];
    let mut breakpoints: Vec<f64> = m.breakpoints.clone();
    for d in &m.delays {
        let h = d.delay.eval(&pv)?;
        if !(h >= c.step * (1.0 - 1e-9)) {
            return Err(SimError::DelayTooShort { delay: h, step: c.step });
        }
        let pre = d.prehistory.as_ref().map(|p| p.eval(&pv)).transpose()?;
        delays.push((h, pre));
        // the solution is only piecewise smooth across multiples of the delay
        breakpoints.extend((1..=4).map(|k| t0 + k as f64 * h));
    }
    breakpoints.retain(|&b| b > t0 && b < c.tf);
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup();

    let every = match &m.discrete {
        Some(d) => {
            let r = d.sample_time / c.step;
            let k = r.round();
            if k < 1.0 || (r - k).abs() > 1e-9 * r {
                return Err(SimError::InvalidConfig(format!(
                    "sample time {} must be a multiple of the step {}",
                    d.sample_time, c.step
                )));
            }
            k as usize
        }
        None => 0,
    };

    let mut run = Run { m, c, theta, delays, hist: History::default() };
    let mut x = m.init.iter().map(|e| e.eval(&pv)).collect::<Result<Vec<f64>, _>>()?;
    let mut z = m.init_registers.iter().map(|e| e.eval(&pv)).collect::<Result<Vec<f64>, _>>()?;
    if !m.init_flow.is_empty() {
        let f = run.rhs(&x, &z, t0)?;
        for fl in &m.init_flow {
            x[fl.target] += fl.coeff.eval(&pv)? * f[fl.source];
        }
    }
    run.clamp(&mut x);
    if let Some(d) = &m.discrete {
        z = run.eval(&d.update, &x, &z, t0)?;
    }
    run.remember(&x, &z, t0)?;

    let mut tr = Trajectory {
        state_names: m.state_names.clone(),
        output_names: m.output_names.clone(),
        ..Trajectory::default()
    };
    run.row(&mut tr, &x, &z, t0)?;

    let nsteps = (((c.tf - t0) / c.step) - 1e-9).ceil().max(1.0) as usize;
    let mut dead = vec![f64::NEG_INFINITY; m.events.len()];
    let mut bp = 0;
    let mut t = t0;
    for k in 1..=nsteps {
        let t_grid = if k == nsteps { c.tf } else { t0 + k as f64 * c.step };
        let snap = 1e-12 * t_grid.abs().max(1.0);
        let mut fired = 0;
        while t < t_grid {
            while bp < breakpoints.len() && breakpoints[bp] <= t + snap {
                bp += 1;
            }
            let (t_end, left) = match breakpoints.get(bp) {
                Some(&b) if b < t_grid - snap => (b, true),
                Some(&b) if b <= t_grid + snap => (t_grid, true),
                _ => (t_grid, false),
            };
            let x1 = run.step(&x, &z, t, t_end - t, left)?;
            if let Some((e, te, xe)) = run.locate(&x, &z, t, &x1, t_end, left, &dead)? {
                fired += 1;
                if fired > c.max_events_per_step {
                    return Err(SimError::EventStorm { time: te, count: fired });
                }
                run.remember(&xe, &z, te)?;
                let post = run.act(e, &xe, &z, te)?;
                let ev = &m.events[e];
                tr.events.push(EventRecord {
                    time: te,
                    guard: e,
                    name: ev.name.clone(),
                    pre_outputs: run.eval(&m.outputs, &xe, &z, te)?,
                    post_outputs: run.eval(&m.outputs, &post, &z, te)?,
                    pre: xe,
                    post: post.clone(),
                });
                run.remember(&post, &z, te)?;
                dead[e] = te + ev.deadtime.unwrap_or_else(|| c.deadtime());
                x = post;
                t = te;
                continue;
            }
            x = x1;
            t = t_end;
            if t < t_grid {
                run.remember(&x, &z, t)?;
                run.row(&mut tr, &x, &z, t)?;
            }
        }
        t = t_grid;
        if let Some(d) = &m.discrete {
            if k % every == 0 {
                z = run.eval(&d.update, &x, &z, t)?;
            }
        }
        run.remember(&x, &z, t)?;
        run.row(&mut tr, &x, &z, t)?;
    }
    Ok(tr)
}

/// One integrator step as a tape over `[x, t, θ, h]`, for models without
/// registers or delays.
pub fn step_tape(m: &OdeModel, method: Method) -> Result<Tape, SimError> {
    m.check()?;
    let l = m.layout();
    if l.nz > 0 || l.nd > 0 {
        return Err(SimError::Unsupported("step tape of a model with registers or delays".into()));
    }
    let w = l.width() + 1;
    let mut b = TapeBuilder::new(w);
    let x: Vec<_> = (0..l.n).map(|i| b.input(i)).collect();
    let t = b.input(l.t());
    let theta: Vec<_> = (0..l.np).map(|i| b.input(l.theta(i))).collect();
    let h = b.input(l.width());
    let half = b.scale(0.5, h);
    let th = b.add(t, half);
    let te = b.add(t, h);
    let f = |b: &mut TapeBuilder, xs: &[usize], ts: usize| {
        let mut ins = xs.to_vec();
        ins.push(ts);
        ins.extend_from_slice(&theta);
        b.import(&m.rhs, &ins)
    };
    let axpy = |b: &mut TapeBuilder, a: usize, k: &[usize]| -> Vec<usize> {
        x.iter()
            .zip(k)
            .map(|(&xi, &ki)| {
                let s = b.mul(a, ki);
                b.add(xi, s)
            })
            .collect()
    };
    let out = match method {
        Method::Midpoint => {
            let k1 = f(&mut b, &x, t);
            let x2 = axpy(&mut b, half, &k1);
            let k2 = f(&mut b, &x2, th);
            axpy(&mut b, h, &k2)
        }
        Method::Rk4 => {
            let k1 = f(&mut b, &x, t);
            let x2 = axpy(&mut b, half, &k1);
            let k2 = f(&mut b, &x2, th);
            let x3 = axpy(&mut b, half, &k2);
            let k3 = f(&mut b, &x3, th);
            let x4 = axpy(&mut b, h, &k3);
            let k4 = f(&mut b, &x4, te);
            let sixth = b.scale(1.0 / 6.0, h);
            let mut out = vec![];
            for i in 0..l.n {
                let s23 = b.add(k2[i], k3[i]);
                let s23 = b.scale(2.0, s23);
                let s14 = b.add(k1[i], k4[i]);
                let s = b.add(s14, s23);
                let d = b.mul(sixth, s);
                out.push(b.add(x[i], d));
            }
            out
        }
    };
    Ok(b.finish(out))
}
