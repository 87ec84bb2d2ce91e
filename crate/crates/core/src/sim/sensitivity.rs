//! Forward sensitivity equations by tape push-forward.

use super::{DelayKind, DelaySpec, DiscreteUpdate, EventAction, EventSpec, InitFlow, OdeModel, SimError, Tangent};
use crate::diagram::derivative_output_name;
use crate::expr::ParamExpr;
use crate::tape::{NodeId, Tape, TapeBuilder};

/// `m` extended with `∂x/∂θ` for one parameter.
pub fn sensitivity_extend(m: &OdeModel, theta: &str) -> Result<OdeModel, SimError> {
    sensitivity_extend_many(m, &[theta])
}

/// Delay-aware variant; refuses models without delays.
pub fn dde_extend(m: &OdeModel, theta: &str) -> Result<OdeModel, SimError> {
    if m.delays.is_empty() {
        return Err(SimError::NoDelays);
    }
    sensitivity_extend(m, theta)
}

/// Tangent slots feeding one delayed input in one direction.
struct DelayTangent {
    slot: usize,
    /// Delayed rate of the base state, weighted by `-∂h/∂θ`.
    rate: Option<(usize, ParamExpr)>,
}

/// `m` extended with the sensitivities for every parameter in `thetas`.
/// State `j` of direction `k` sits at `n * (1 + k) + j`.
pub fn sensitivity_extend_many(m: &OdeModel, thetas: &[&str]) -> Result<OdeModel, SimError> {
    m.check()?;
    let idx = thetas.iter().map(|t| m.param_index(t)).collect::<Result<Vec<_>, _>>()?;
    let l = m.layout();
    let (n, nz, k) = (l.n, l.nz, thetas.len());
    let nested = m.tangent.is_some();
    if let Some(h) = &m.init_time {
        if !m.init_flow.is_empty() && thetas.iter().any(|t| h.depends_on(t)) {
            return Err(SimError::Unsupported("start time depending on a parameter, extended twice".into()));
        }
    }

    let mut delays = m.delays.clone();
    let mut dtan: Vec<Vec<DelayTangent>> = vec![];
    for (kk, th) in thetas.iter().enumerate() {
        let mut row = vec![];
        for d in &m.delays {
            let dh = d.delay.diff(th);
            let slot = delays.len();
            delays.push(DelaySpec {
                state: d.state + n * (1 + kk),
                delay: d.delay.clone(),
                prehistory: d.prehistory.as_ref().map(|p| p.diff(th)),
                kind: d.kind,
            });
            let rate = if dh.is_zero() {
                None
            } else if d.kind == DelayKind::Rate {
                return Err(SimError::Unsupported(format!(
                    "sensitivity of a delayed rate whose delay depends on `{th}`"
                )));
            } else {
                let rs = delays.len();
                delays.push(DelaySpec {
                    state: d.state,
                    delay: d.delay.clone(),
                    prehistory: d.prehistory.clone(),
                    kind: DelayKind::Rate,
                });
                Some((rs, ParamExpr::neg(dh)))
            };
            row.push(DelayTangent { slot, rate });
        }
        dtan.push(row);
    }

    let mut out = OdeModel {
        state_names: m.state_names.clone(),
        register_names: m.register_names.clone(),
        output_names: m.output_names.clone(),
        delays,
        tangent: Some(Tangent { base_n: n, base_nz: nz, thetas: idx.clone(), nested }),
        ..m.clone()
    };
    for th in thetas {
        out.state_names.extend(m.state_names.iter().map(|s| derivative_output_name(s, th)));
        out.register_names.extend(m.register_names.iter().map(|s| derivative_output_name(s, th)));
        out.output_names.extend(m.output_names.iter().map(|s| derivative_output_name(s, th)));
        out.init.extend(m.init.iter().map(|g| g.diff(th)));
        out.init_registers.extend(m.init_registers.iter().map(|g| g.diff(th)));
    }
    if let Some(h) = &m.init_time {
        for (kk, th) in thetas.iter().enumerate() {
            let dh = h.diff(th);
            if dh.is_zero() {
                continue;
            }
            for i in 0..n {
                out.init_flow.push(InitFlow { target: n * (1 + kk) + i, source: i, coeff: ParamExpr::neg(dh.clone()) });
            }
        }
    }
    let nl = out.layout();
    let width = nl.width();

    // base inputs of the old layout inside the new one
    let map: Vec<usize> = (0..l.width())
        .map(|j| {
            if j < n {
                nl.x(j)
            } else if j < n + nz {
                nl.z(j - n)
            } else if j == l.t() {
                nl.t()
            } else if j < l.delayed(0) {
                nl.theta(j - l.theta(0))
            } else {
                nl.delayed(j - l.delayed(0))
            }
        })
        .collect();

    let mut b = TapeBuilder::new(width);
    let base: Vec<NodeId> = map.iter().map(|&j| b.input(j)).collect();
    let theta_nodes: Vec<NodeId> = (0..l.np).map(|i| b.input(nl.theta(i))).collect();
    let params = m.params.clone();
    let mut tangents: Vec<Vec<Option<NodeId>>> = vec![];
    for kk in 0..k {
        let mut tan = vec![None; l.width()];
        for i in 0..n {
            tan[l.x(i)] = Some(b.input(nl.x(n * (1 + kk) + i)));
        }
        for i in 0..nz {
            tan[l.z(i)] = Some(b.input(nl.z(nz * (1 + kk) + i)));
        }
        tan[l.theta(idx[kk])] = Some(b.constant(1.0));
        for (j, dt) in dtan[kk].iter().enumerate() {
            let mut v = b.input(nl.delayed(dt.slot));
            if let Some((rs, coeff)) = &dt.rate {
                let lookup = |name: &str| params.iter().position(|p| p == name).map(|i| theta_nodes[i]);
                let c = coeff.compile(&mut b, &lookup)?;
                let r = b.input(nl.delayed(*rs));
                let cr = b.mul(c, r);
                v = b.add(v, cr);
            }
            tan[l.delayed(j)] = Some(v);
        }
        tangents.push(tan);
    }

    let extend = |b: &mut TapeBuilder, tape: &Tape| -> Tape {
        let mut outs = b.import(tape, &base);
        for tan in &tangents {
            let (_, dt) = b.push_forward(tape, &base, tan);
            outs.extend(dt.into_iter().map(|d| d.unwrap_or_else(|| b.constant(0.0))));
        }
        b.finish(outs)
    };
    out.rhs = extend(&mut b, &m.rhs);
    out.outputs = extend(&mut b, &m.outputs);
    out.discrete = m
        .discrete
        .as_ref()
        .map(|d| DiscreteUpdate { sample_time: d.sample_time, update: extend(&mut b, &d.update) });
    out.events = m
        .events
        .iter()
        .map(|e| {
            let guard = super::remap_inputs(&e.guard, width, &map);
            let action = match &e.action {
                EventAction::Reset(r) => {
                    // shape only: sensitivities refuse resets at run time
                    let mut outs = b.import(r, &base);
                    outs.extend((n..nl.n).map(|i| b.input(nl.x(i))));
                    EventAction::Reset(b.finish(outs))
                }
                a => a.clone(),
            };
            EventSpec { name: e.name.clone(), guard, action, deadtime: e.deadtime }
        })
        .collect();
    Ok(out)
}
