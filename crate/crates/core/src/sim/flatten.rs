//! Diagram to state equations.
//!
//! Integrators and continuous linear blocks own states. Discrete blocks own
//! registers: their internal state and the value they hold between samples.
//! Signals are compiled twice when needed: "held" (between samples, discrete
//! blocks show their registers) and "live" (at a sample instant, discrete
//! blocks show the value they are about to latch).

use std::collections::HashMap;

use super::{Clamp, DelayKind, DelaySpec, DiscreteUpdate, Layout, OdeModel, SimError};
use crate::diagram::{
    inline_subsystems, tf_to_ss, validate, BlockKind, DelayOutput, Diagram, DiagramError, LookupOutput, PortRef,
    StateSpace,
};
use crate::expr::ParamExpr;
use crate::tape::{Cmp, NodeId, TapeBuilder};

struct Cont {
    start: usize,
    ss: Option<StateSpace>,
}

struct Disc {
    s_start: usize,
    w_start: usize,
    ss: Option<StateSpace>,
}

struct Flat<'a> {
    d: &'a Diagram,
    drivers: std::collections::BTreeMap<PortRef, PortRef>,
    b: TapeBuilder,
    layout: Layout,
    theta: Vec<NodeId>,
    param_idx: HashMap<String, usize>,
    cont: HashMap<String, Cont>,
    disc: HashMap<String, Disc>,
    delay_slot: HashMap<String, usize>,
    memo: HashMap<(PortRef, bool), NodeId>,
}

fn unsupported(block: &str, why: &str) -> SimError {
    SimError::Unsupported(format!("block `{block}`: {why}"))
}

fn ss_of(kind: &BlockKind) -> Option<StateSpace> {
    match kind {
        BlockKind::TransferFnS { num, den } | BlockKind::TransferFnZ { num, den, .. } => Some(tf_to_ss(num, den)),
        BlockKind::StateSpaceC { a, b, c, d } | BlockKind::StateSpaceD { a, b, c, d, .. } => {
            Some(StateSpace { a: a.clone(), b: b.clone(), c: c.clone(), d: d.clone() })
        }
        _ => None,
    }
}

impl Flat<'_> {
    fn expr(&mut self, e: &ParamExpr) -> Result<NodeId, SimError> {
        let (theta, idx) = (&self.theta, &self.param_idx);
        Ok(e.compile(&mut self.b, &|name| idx.get(name).map(|&i| theta[i]))?)
    }

    /// `Σ row[i] * xs[i]`
    fn lin(&mut self, row: &[ParamExpr], xs: &[NodeId]) -> Result<NodeId, SimError> {
        let mut terms = Vec::new();
        for (c, &x) in row.iter().zip(xs) {
            if c.is_zero() {
                continue;
            }
            let k = self.expr(c)?;
            terms.push(self.b.mul(k, x));
        }
        Ok(self.b.sum(&terms))
    }

    /// `D u`, reading only the inputs with a nonzero coefficient.
    fn feedthrough(&mut self, block: &str, row: &[ParamExpr], live: bool) -> Result<NodeId, SimError> {
        let mut terms = Vec::new();
        for (p, c) in row.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            let k = self.expr(c)?;
            let u = self.input(block, p + 1, live)?;
            terms.push(self.b.mul(k, u));
        }
        Ok(self.b.sum(&terms))
    }

    fn input(&mut self, block: &str, port: usize, live: bool) -> Result<NodeId, SimError> {
        let r = self
            .drivers
            .get(&PortRef::new(block, port))
            .cloned()
            .ok_or_else(|| SimError::InvalidModel(format!("input {block}.{port} is not driven")))?;
        self.sig(&r, live)
    }

    fn inputs(&mut self, block: &str, n: usize, live: bool) -> Result<Vec<NodeId>, SimError> {
        (1..=n).map(|p| self.input(block, p, live)).collect()
    }

    fn sig(&mut self, r: &PortRef, live: bool) -> Result<NodeId, SimError> {
        if let Some(&id) = self.memo.get(&(r.clone(), live)) {
            return Ok(id);
        }
        let d = self.d;
        let blk = d.find(&r.block).ok_or_else(|| SimError::InvalidModel(format!("no block `{}`", r.block)))?;
        let id = blk.id.as_str();
        let l = self.layout;
        let node = match &blk.kind {
            BlockKind::Integrator { .. } => {
                let s = self.cont[id].start;
                self.b.input(l.x(s))
            }
            BlockKind::TransferFnS { .. } | BlockKind::StateSpaceC { .. } => {
                let c = &self.cont[id];
                let ss = c.ss.clone().expect("linear block realized");
                let start = c.start;
                let xs: Vec<NodeId> = (0..ss.a.len()).map(|i| self.b.input(l.x(start + i))).collect();
                let cx = self.lin(&ss.c.get(r.port - 1).cloned().unwrap_or_default(), &xs)?;
                let du = self.feedthrough(id, &ss.d[r.port - 1], live)?;
                self.b.add(cx, du)
            }
            BlockKind::TransferFnZ { .. } | BlockKind::StateSpaceD { .. } => {
                let c = &self.disc[id];
                if live {
                    let ss = c.ss.clone().expect("linear block realized");
                    let start = c.s_start;
                    let xs: Vec<NodeId> = (0..ss.a.len()).map(|i| self.b.input(l.z(start + i))).collect();
                    let cx = self.lin(&ss.c.get(r.port - 1).cloned().unwrap_or_default(), &xs)?;
                    let du = self.feedthrough(id, &ss.d[r.port - 1], true)?;
                    self.b.add(cx, du)
                } else {
                    let w = c.w_start + r.port - 1;
                    self.b.input(l.z(w))
                }
            }
            BlockKind::UnitDelay { .. } => {
                let c = &self.disc[id];
                let k = if live { c.s_start } else { c.w_start };
                self.b.input(l.z(k))
            }
            BlockKind::RateTransition { .. } => {
                if live {
                    self.input(id, 1, true)?
                } else {
                    let k = self.disc[id].w_start;
                    self.b.input(l.z(k))
                }
            }
            BlockKind::Gain { gain } => {
                let u = self.input(id, 1, live)?;
                let g = self.expr(gain)?;
                self.b.mul(g, u)
            }
            BlockKind::Sum { signs } => {
                let mut terms = Vec::new();
                for (i, s) in signs.chars().enumerate() {
                    let u = self.input(id, i + 1, live)?;
                    terms.push(if s == '-' { self.b.neg(u) } else { u });
                }
                self.b.sum(&terms)
            }
            BlockKind::Product { ops } => {
                let mut acc = self.b.constant(1.0);
                for (i, o) in ops.chars().enumerate() {
                    let u = self.input(id, i + 1, live)?;
                    acc = if o == '/' { self.b.div(acc, u) } else { self.b.mul(acc, u) };
                }
                acc
            }
            BlockKind::Fn { func } => {
                let u = self.input(id, 1, live)?;
                self.b.apply(*func, u)
            }
            BlockKind::Switch { threshold } => {
                let us = self.inputs(id, 3, live)?;
                self.b.branch(us[1], Cmp::Ge, *threshold, us[0], us[2])
            }
            BlockKind::Saturation { lower, upper } => {
                let u = self.input(id, 1, live)?;
                let (lo, hi) = (self.b.constant(*lower), self.b.constant(*upper));
                let inner = self.b.branch(u, Cmp::Lt, *lower, lo, u);
                self.b.branch(u, Cmp::Ge, *upper, hi, inner)
            }
            BlockKind::SaturationDynamic => {
                let us = self.inputs(id, 3, live)?;
                let over = self.b.sub(us[1], us[0]);
                let under = self.b.sub(us[1], us[2]);
                let inner = self.b.branch(under, Cmp::Lt, 0.0, us[2], us[1]);
                self.b.branch(over, Cmp::Ge, 0.0, us[0], inner)
            }
            BlockKind::LookupTable1D { breakpoints: bp, values: v, output, .. } => {
                let u = self.input(id, 1, live)?;
                let m = bp.len();
                let slope = |i: usize| (v[i + 1] - v[i]) / (bp[i + 1] - bp[i]);
                let mut acc = match output {
                    LookupOutput::Value => self.b.constant(v[m - 1]),
                    LookupOutput::Slope => self.b.constant(0.0),
                };
                for i in (0..m - 1).rev() {
                    let seg = match output {
                        LookupOutput::Value => {
                            let k = self.b.constant(-bp[i]);
                            let du = self.b.add(u, k);
                            let lin = self.b.scale(slope(i), du);
                            let c = self.b.constant(v[i]);
                            self.b.add(c, lin)
                        }
                        LookupOutput::Slope => self.b.constant(slope(i)),
                    };
                    acc = self.b.branch(u, Cmp::Lt, bp[i + 1], seg, acc);
                }
                let below = match output {
                    LookupOutput::Value => self.b.constant(v[0]),
                    LookupOutput::Slope => self.b.constant(0.0),
                };
                self.b.branch(u, Cmp::Lt, bp[0], below, acc)
            }
            BlockKind::Constant { value } => self.expr(value)?,
            BlockKind::Step { time, level, initial } => {
                let t = self.b.input(l.t());
                let (on, off) = (self.expr(level)?, self.expr(initial)?);
                self.b.branch(t, Cmp::Ge, *time, on, off)
            }
            BlockKind::TransportDelay { .. } => self.b.input(l.delayed(self.delay_slot[id])),
            BlockKind::Demux { .. } => {
                let src = self
                    .drivers
                    .get(&PortRef::new(id, 1))
                    .cloned()
                    .ok_or_else(|| SimError::InvalidModel(format!("demux `{id}` is not driven")))?;
                self.input(&src.block, r.port, live)?
            }
            BlockKind::Mux { .. } => return Err(unsupported(id, "a bundle is not a scalar signal")),
            BlockKind::Inport { .. } | BlockKind::Subsystem { .. } => {
                return Err(unsupported(id, "subsystems must be inlined"))
            }
        };
        self.memo.insert((r.clone(), live), node);
        Ok(node)
    }

    /// `own`, or zero while the saturated state `x` is pinned at a bound
    /// and pushed outwards by `u`.
    fn gated(&mut self, x: NodeId, u: NodeId, lo: f64, hi: f64, own: NodeId) -> NodeId {
        let zero = self.b.constant(0.0);
        let up = self.b.branch(u, Cmp::Gt, 0.0, zero, own);
        let down = self.b.branch(u, Cmp::Lt, 0.0, zero, own);
        let low = self.b.branch(x, Cmp::Le, lo, down, own);
        self.b.branch(x, Cmp::Ge, hi, up, low)
    }
}

/// Compile a diagram into an [`OdeModel`].
pub fn flatten(d: &Diagram) -> Result<OdeModel, SimError> {
    let report = validate(d);
    if !report.is_ok() {
        return Err(DiagramError::Validation(report).into());
    }
    let d = inline_subsystems(d);
    let params: Vec<String> = d.params.keys().cloned().collect();

    let mut states: Vec<String> = vec![];
    let mut init: Vec<ParamExpr> = vec![];
    let mut regs: Vec<String> = vec![];
    let mut init_regs: Vec<ParamExpr> = vec![];
    let mut cont = HashMap::new();
    let mut disc = HashMap::new();
    let mut sample: Option<f64> = None;
    let mut breakpoints = vec![];
    let mut clamps = vec![];

    let mut use_sample = |id: &str, ts: f64| -> Result<(), SimError> {
        match sample {
            Some(s) if (s - ts).abs() > 1e-12 * s.abs() => {
                Err(unsupported(id, &format!("sample time {ts} differs from {s}; one rate per model")))
            }
            _ => {
                sample = Some(ts);
                Ok(())
            }
        }
    };
    for blk in &d.blocks {
        let id = blk.id.as_str();
        match &blk.kind {
            BlockKind::Integrator { initial, saturation, .. } => {
                cont.insert(id.to_string(), Cont { start: states.len(), ss: None });
                if let Some([lo, hi]) = saturation {
                    clamps.push(Clamp { state: states.len(), lo: *lo, hi: *hi });
                }
                states.push(id.to_string());
                init.push(initial.clone());
            }
            k @ (BlockKind::TransferFnS { .. } | BlockKind::StateSpaceC { .. }) => {
                let ss = ss_of(k).expect("linear");
                let n = ss.a.len();
                cont.insert(id.to_string(), Cont { start: states.len(), ss: Some(ss) });
                for i in 0..n {
                    states.push(format!("{id}[{}]", i + 1));
                    init.push(ParamExpr::zero());
                }
            }
            k @ (BlockKind::TransferFnZ { sample_time, .. } | BlockKind::StateSpaceD { sample_time, .. }) => {
                use_sample(id, *sample_time)?;
                let ss = ss_of(k).expect("linear");
                let (n, p) = (ss.a.len(), ss.d.len());
                let s_start = regs.len();
                for i in 0..n {
                    regs.push(format!("{id}[{}]", i + 1));
                    init_regs.push(ParamExpr::zero());
                }
                let w_start = regs.len();
                for i in 0..p {
                    regs.push(format!("{id}:out{}", i + 1));
                    init_regs.push(ParamExpr::zero());
                }
                disc.insert(id.to_string(), Disc { s_start, w_start, ss: Some(ss) });
            }
            BlockKind::UnitDelay { initial, sample_time } => {
                use_sample(id, *sample_time)?;
                let s_start = regs.len();
                regs.push(id.to_string());
                regs.push(format!("{id}:out"));
                init_regs.push(initial.clone());
                init_regs.push(initial.clone());
                disc.insert(id.to_string(), Disc { s_start, w_start: s_start + 1, ss: None });
            }
            BlockKind::RateTransition { sample_time } => {
                use_sample(id, *sample_time)?;
                let w_start = regs.len();
                regs.push(format!("{id}:out"));
                init_regs.push(ParamExpr::zero());
                disc.insert(id.to_string(), Disc { s_start: w_start, w_start, ss: None });
            }
            BlockKind::Step { time, .. } => breakpoints.push(*time),
            _ => {}
        }
    }

    let drivers = d.drivers();
    let mut delays = vec![];
    let mut delay_slot = HashMap::new();
    for blk in &d.blocks {
        if let BlockKind::TransportDelay { delay, prehistory, output } = &blk.kind {
            let src = &drivers[&PortRef::new(blk.id.clone(), 1)];
            let state = match d.find(&src.block).map(|b| &b.kind) {
                Some(BlockKind::Integrator { .. }) => cont[&src.block].start,
                _ => return Err(unsupported(&blk.id, "the delayed signal must be an integrator output")),
            };
            delay_slot.insert(blk.id.clone(), delays.len());
            delays.push(DelaySpec {
                state,
                delay: delay.clone(),
                prehistory: Some(prehistory.clone()),
                kind: match output {
                    DelayOutput::Value => DelayKind::Value,
                    DelayOutput::Rate => DelayKind::Rate,
                },
            });
        }
    }

    let layout = Layout { n: states.len(), nz: regs.len(), np: params.len(), nd: delays.len() };
    let mut b = TapeBuilder::new(layout.width());
    let theta = (0..params.len()).map(|i| b.input(layout.theta(i))).collect();
    let mut f = Flat {
        d: &d,
        drivers,
        b,
        layout,
        theta,
        param_idx: params.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect(),
        cont,
        disc,
        delay_slot,
        memo: HashMap::new(),
    };

    let mut rhs = vec![0; layout.n];
    for blk in &d.blocks {
        let id = blk.id.as_str();
        match &blk.kind {
            BlockKind::Integrator { saturation, follow, .. } => {
                let s = f.cont[id].start;
                let u = f.input(id, 1, false)?;
                let target = match (saturation, follow) {
                    (Some([lo, hi]), _) => Some((id.to_string(), *lo, *hi)),
                    (None, Some(t)) => match d.find(t).map(|b| &b.kind) {
                        Some(BlockKind::Integrator { saturation: Some([lo, hi]), .. }) => Some((t.clone(), *lo, *hi)),
                        _ => return Err(unsupported(id, &format!("follows `{t}`, which is not a saturated integrator"))),
                    },
                    (None, None) => None,
                };
                rhs[s] = match target {
                    Some((t, lo, hi)) => {
                        let ts = f.cont[&t].start;
                        let x = f.b.input(layout.x(ts));
                        let ut = f.input(&t, 1, false)?;
                        f.gated(x, ut, lo, hi, u)
                    }
                    None => u,
                };
            }
            BlockKind::TransferFnS { .. } | BlockKind::StateSpaceC { .. } => {
                let (start, ss) = {
                    let c = &f.cont[id];
                    (c.start, c.ss.clone().expect("realized"))
                };
                let xs: Vec<NodeId> = (0..ss.a.len()).map(|i| f.b.input(layout.x(start + i))).collect();
                let us = f.inputs(id, ss.d[0].len(), false)?;
                for i in 0..ss.a.len() {
                    let ax = f.lin(&ss.a[i], &xs)?;
                    let bu = f.lin(&ss.b[i], &us)?;
                    rhs[start + i] = f.b.add(ax, bu);
                }
            }
            _ => {}
        }
    }

    let mut update = vec![0; layout.nz];
    for blk in &d.blocks {
        let id = blk.id.as_str();
        let Some(c) = f.disc.get(id) else { continue };
        let (s_start, w_start, ss) = (c.s_start, c.w_start, c.ss.clone());
        match &blk.kind {
            BlockKind::UnitDelay { .. } => {
                update[s_start] = f.input(id, 1, true)?;
                update[w_start] = f.b.input(layout.z(s_start));
            }
            BlockKind::RateTransition { .. } => update[w_start] = f.input(id, 1, true)?,
            _ => {
                let ss = ss.expect("realized");
                let xs: Vec<NodeId> = (0..ss.a.len()).map(|i| f.b.input(layout.z(s_start + i))).collect();
                let us = f.inputs(id, ss.d[0].len(), true)?;
                for i in 0..ss.a.len() {
                    let ax = f.lin(&ss.a[i], &xs)?;
                    let bu = f.lin(&ss.b[i], &us)?;
                    update[s_start + i] = f.b.add(ax, bu);
                }
                for p in 0..ss.d.len() {
                    update[w_start + p] = f.sig(&PortRef::new(id, p + 1), true)?;
                }
            }
        }
    }

    let mut outs = vec![];
    for o in &d.outputs {
        outs.push(f.sig(&o.from, false)?);
    }

    let rhs = f.b.finish(rhs);
    let outputs = f.b.finish(outs);
    let discrete = sample.map(|ts| DiscreteUpdate { sample_time: ts, update: f.b.finish(update) });
    Ok(OdeModel {
        state_names: states,
        register_names: regs,
        output_names: d.outputs.iter().map(|o| o.name.clone()).collect(),
        params,
        param_values: d.params.clone(),
        rhs,
        outputs,
        init,
        init_registers: init_regs,
        init_time: None,
        init_flow: vec![],
        events: vec![],
        delays,
        discrete,
        clamps,
        breakpoints,
        tangent: None,
    })
}
