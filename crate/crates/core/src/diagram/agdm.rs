//! Graphic differentiation: a diagram in, the same diagram plus a derivative
//! flow out.

use std::collections::{BTreeMap, BTreeSet};

use super::linear::{poly_is_zero, ss_augment, tf_param_derivative};
use super::prune::prune_blocks;
use super::{
    validate, Block, BlockKind, DelayOutput, DerivativeRecord, Diagram, DiagramError, Link, LookupDerivative,
    LookupOutput, OutputSpec, PortRef,
};
use crate::elementary::ElementaryFn;
use crate::expr::ParamExpr;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgdmOptions {
    /// Remove structurally zero derivative blocks afterwards.
    pub prune: bool,
    /// Use central differences for every finite-difference lookup table.
    pub fd_central: bool,
}

impl Default for AgdmOptions {
    fn default() -> Self {
        AgdmOptions { prune: true, fd_central: false }
    }
}

/// `d(<id>)/d(<theta>)[n]`, or `d2(<x>)/d(<theta>)2[m,n]` when `id` is
/// already a first derivative with respect to `theta`.
pub fn derivative_block_name(id: &str, theta: &str, n: usize) -> String {
    match split_first_derivative(id, theta) {
        Some((x, m)) => format!("d2({x})/d({theta})2[{m},{n}]"),
        None => format!("d({id})/d({theta})[{n}]"),
    }
}

fn split_first_derivative<'a>(id: &'a str, theta: &str) -> Option<(&'a str, &'a str)> {
    let rest = id.strip_prefix("d(")?;
    let marker = format!(")/d({theta})[");
    let at = rest.rfind(&marker)?;
    let idx = rest[at + marker.len()..].strip_suffix(']')?;
    if idx.is_empty() || !idx.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    Some((&rest[..at], idx))
}

/// `d<y>/d<theta>`, collapsing `d(d<y>/d<theta>)/d<theta>` to `d2<y>/d<theta>2`.
pub fn derivative_output_name(name: &str, theta: &str) -> String {
    let suffix = format!("/d{theta}");
    if let Some(y) = name.strip_prefix('d').and_then(|r| r.strip_suffix(&suffix)) {
        if !y.is_empty() && !name.starts_with("d2") {
            return format!("d2{y}/d{theta}2");
        }
    }
    if name.contains('/') {
        format!("d({name})/d{theta}")
    } else {
        format!("d{name}/d{theta}")
    }
}

pub(crate) fn zero_source_name(theta: &str) -> String {
    format!("d(0)/d({theta})")
}

/// Differentiate `d` with respect to parameter `theta` with default options.
pub fn agdm_diff(d: &Diagram, theta: &str) -> Result<Diagram, DiagramError> {
    agdm_diff_with(d, theta, &AgdmOptions::default())
}

pub fn agdm_diff_with(d: &Diagram, theta: &str, opts: &AgdmOptions) -> Result<Diagram, DiagramError> {
    d.require_param(theta)?;
    let report = validate(d);
    if !report.is_ok() {
        return Err(DiagramError::Validation(report));
    }
    let out = transform(d, theta, opts, &BTreeMap::new(), false)?;
    let report = validate(&out);
    if !report.is_ok() {
        return Err(DiagramError::Validation(report));
    }
    Ok(out)
}

struct Ctx<'a> {
    theta: &'a str,
    opts: &'a AgdmOptions,
    taken: BTreeSet<String>,
    blocks: Vec<Block>,
    links: Vec<Link>,
    new_ids: Vec<String>,
    zero: Option<String>,
    warnings: Vec<String>,
}

impl Ctx<'_> {
    fn add(&mut self, id: String, kind: BlockKind) -> String {
        debug_assert!(!self.taken.contains(&id), "duplicate derivative block {id}");
        self.taken.insert(id.clone());
        self.new_ids.push(id.clone());
        self.blocks.push(Block::new(id.clone(), kind));
        id
    }

    fn wire(&mut self, from: PortRef, to: &str, port: usize) {
        self.links.push(Link { from, to: PortRef::new(to, port) });
    }

    fn zero(&mut self) -> PortRef {
        if let Some(z) = &self.zero {
            return PortRef::new(z.clone(), 1);
        }
        let name = zero_source_name(self.theta);
        if !self.taken.contains(&name) {
            self.add(name.clone(), BlockKind::Constant { value: ParamExpr::zero() });
        }
        self.zero = Some(name.clone());
        PortRef::new(name, 1)
    }
}

/// Derivative signals of the ports feeding one block, plus the block's own
/// helper naming.
struct Site<'b> {
    block: &'b Block,
    ins: Vec<PortRef>,
    dins: Vec<Option<PortRef>>,
}

impl Site<'_> {
    fn name(&self, ctx: &Ctx, n: usize) -> String {
        derivative_block_name(&self.block.id, ctx.theta, n)
    }

    fn du(&self, ctx: &mut Ctx, i: usize) -> PortRef {
        match &self.dins[i] {
            Some(r) => r.clone(),
            None => ctx.zero(),
        }
    }

    fn y(&self) -> PortRef {
        PortRef::new(self.block.id.clone(), 1)
    }
}

fn k_gain(g: ParamExpr) -> BlockKind {
    BlockKind::Gain { gain: g }
}

fn k_sum(signs: &str) -> BlockKind {
    BlockKind::Sum { signs: signs.to_string() }
}

fn k_prod(ops: &str) -> BlockKind {
    BlockKind::Product { ops: ops.to_string() }
}

/// Emit `[1] = Sum(terms)`.
fn emit_sum(ctx: &mut Ctx, site: &Site, terms: Vec<(char, PortRef)>) {
    let signs: String = terms.iter().map(|t| t.0).collect();
    let id = ctx.add(site.name(ctx, 1), k_sum(&signs));
    for (i, (_, r)) in terms.into_iter().enumerate() {
        ctx.wire(r, &id, i + 1);
    }
}

fn rule_gain(ctx: &mut Ctx, site: &Site, g: &ParamExpr) {
    let dg = g.diff(ctx.theta);
    let active_in = site.dins[0].is_some();
    match (active_in, dg.is_zero()) {
        (true, true) | (false, true) => {
            let du = site.du(ctx, 0);
            let id = ctx.add(site.name(ctx, 1), k_gain(g.clone()));
            ctx.wire(du, &id, 1);
        }
        (false, false) => {
            let id = ctx.add(site.name(ctx, 1), k_gain(dg));
            ctx.wire(site.ins[0].clone(), &id, 1);
        }
        (true, false) => {
            let du = site.du(ctx, 0);
            let a = ctx.add(site.name(ctx, 2), k_gain(g.clone()));
            ctx.wire(du, &a, 1);
            let b = ctx.add(site.name(ctx, 3), k_gain(dg));
            ctx.wire(site.ins[0].clone(), &b, 1);
            emit_sum(ctx, site, vec![('+', PortRef::new(a, 1)), ('+', PortRef::new(b, 1))]);
        }
    }
}

fn rule_sum(ctx: &mut Ctx, site: &Site, signs: &str) {
    let id = ctx.add(site.name(ctx, 1), k_sum(signs));
    for i in 0..site.ins.len() {
        let du = site.du(ctx, i);
        ctx.wire(du, &id, i + 1);
    }
}

fn rule_product(ctx: &mut Ctx, site: &Site, ops: &str) {
    let ops: Vec<char> = ops.chars().collect();
    let mut terms = Vec::new();
    let mut n = 2;
    for i in 0..ops.len() {
        let Some(du) = site.dins[i].clone() else { continue };
        let id = site.name(ctx, n);
        n += 1;
        if ops[i] == '*' {
            let mut o = String::from("*");
            let mut srcs = vec![du];
            for (j, &op) in ops.iter().enumerate() {
                if j != i {
                    o.push(op);
                    srcs.push(site.ins[j].clone());
                }
            }
            ctx.add(id.clone(), k_prod(&o));
            for (k, s) in srcs.into_iter().enumerate() {
                ctx.wire(s, &id, k + 1);
            }
            terms.push(('+', PortRef::new(id, 1)));
        } else {
            // d(1/u) = -y du / u  with y the full product
            ctx.add(id.clone(), k_prod("**/"));
            ctx.wire(site.y(), &id, 1);
            ctx.wire(du, &id, 2);
            ctx.wire(site.ins[i].clone(), &id, 3);
            terms.push(('-', PortRef::new(id, 1)));
        }
    }
    emit_sum(ctx, site, terms);
}

fn rule_fn(ctx: &mut Ctx, site: &Site, f: ElementaryFn) {
    let u = site.ins[0].clone();
    let du = site.du(ctx, 0);
    let fin = site.name(ctx, 1);
    // returns the id whose output times du (or over, for `div`) is the result
    let prod = |ctx: &mut Ctx, ops: &str, srcs: Vec<PortRef>, id: String| {
        ctx.add(id.clone(), k_prod(ops));
        for (k, s) in srcs.into_iter().enumerate() {
            ctx.wire(s, &id, k + 1);
        }
    };
    match f {
        ElementaryFn::Exp => prod(ctx, "**", vec![site.y(), du], fin),
        ElementaryFn::Log => prod(ctx, "*/", vec![du, u], fin),
        ElementaryFn::Sin => {
            let c = ctx.add(site.name(ctx, 2), BlockKind::Fn { func: ElementaryFn::Cos });
            ctx.wire(u, &c, 1);
            prod(ctx, "**", vec![PortRef::new(c, 1), du], fin);
        }
        ElementaryFn::Cos => {
            let s = ctx.add(site.name(ctx, 2), BlockKind::Fn { func: ElementaryFn::Sin });
            ctx.wire(u, &s, 1);
            let p = site.name(ctx, 3);
            prod(ctx, "**", vec![PortRef::new(s, 1), du], p.clone());
            let id = ctx.add(fin, k_gain(ParamExpr::c(-1.0)));
            ctx.wire(PortRef::new(p, 1), &id, 1);
        }
        ElementaryFn::Tan => {
            let c = ctx.add(site.name(ctx, 2), BlockKind::Fn { func: ElementaryFn::Cos });
            ctx.wire(u, &c, 1);
            let c = PortRef::new(c, 1);
            prod(ctx, "*//", vec![du, c.clone(), c], fin);
        }
        ElementaryFn::Atan => {
            let sq = site.name(ctx, 2);
            prod(ctx, "**", vec![u.clone(), u], sq.clone());
            let one = ctx.add(site.name(ctx, 3), BlockKind::Constant { value: ParamExpr::one() });
            let s = ctx.add(site.name(ctx, 4), k_sum("++"));
            ctx.wire(PortRef::new(sq, 1), &s, 1);
            ctx.wire(PortRef::new(one, 1), &s, 2);
            prod(ctx, "*/", vec![du, PortRef::new(s, 1)], fin);
        }
        ElementaryFn::Sqrt => {
            let p = site.name(ctx, 2);
            prod(ctx, "*/", vec![du, site.y()], p.clone());
            let id = ctx.add(fin, k_gain(ParamExpr::c(0.5)));
            ctx.wire(PortRef::new(p, 1), &id, 1);
        }
        ElementaryFn::Pow(p) => {
            let q = site.name(ctx, 2);
            if p - 1.0 == 0.0 {
                let id = ctx.add(fin, k_gain(ParamExpr::c(p)));
                ctx.wire(du, &id, 1);
                return;
            }
            let w = ctx.add(site.name(ctx, 3), BlockKind::Fn { func: ElementaryFn::Pow(p - 1.0) });
            ctx.wire(u, &w, 1);
            prod(ctx, "**", vec![PortRef::new(w, 1), du], q.clone());
            let id = ctx.add(fin, k_gain(ParamExpr::c(p)));
            ctx.wire(PortRef::new(q, 1), &id, 1);
        }
        ElementaryFn::Abs => {
            // sign(u) du, with the switch tie at u = 0 passing +du
            let n = ctx.add(site.name(ctx, 2), k_gain(ParamExpr::c(-1.0)));
            ctx.wire(du.clone(), &n, 1);
            let id = ctx.add(fin, BlockKind::Switch { threshold: 0.0 });
            ctx.wire(du, &id, 1);
            ctx.wire(u, &id, 2);
            ctx.wire(PortRef::new(n, 1), &id, 3);
        }
    }
}

fn rule_tf(ctx: &mut Ctx, site: &Site, kind: &BlockKind) {
    let (num, den, ts) = match kind {
        BlockKind::TransferFnS { num, den } => (num, den, None),
        BlockKind::TransferFnZ { num, den, sample_time } => (num, den, Some(*sample_time)),
        _ => unreachable!(),
    };
    let make = |n: Vec<ParamExpr>, d: Vec<ParamExpr>| match ts {
        None => BlockKind::TransferFnS { num: n, den: d },
        Some(t) => BlockKind::TransferFnZ { num: n, den: d, sample_time: t },
    };
    let (dn, dd) = tf_param_derivative(num, den, ctx.theta);
    let source = !poly_is_zero(&dn);
    match (site.dins[0].is_some(), source) {
        (_, false) => {
            let du = site.du(ctx, 0);
            let id = ctx.add(site.name(ctx, 1), make(num.clone(), den.clone()));
            ctx.wire(du, &id, 1);
        }
        (false, true) => {
            let id = ctx.add(site.name(ctx, 1), make(dn, dd));
            ctx.wire(site.ins[0].clone(), &id, 1);
        }
        (true, true) => {
            let du = site.du(ctx, 0);
            let a = ctx.add(site.name(ctx, 2), make(num.clone(), den.clone()));
            ctx.wire(du, &a, 1);
            let b = ctx.add(site.name(ctx, 3), make(dn, dd));
            ctx.wire(site.ins[0].clone(), &b, 1);
            emit_sum(ctx, site, vec![('+', PortRef::new(a, 1)), ('+', PortRef::new(b, 1))]);
        }
    }
}

fn rule_ss(ctx: &mut Ctx, site: &Site, kind: &BlockKind) -> Result<(), DiagramError> {
    let (a, b, c, d, ts) = match kind {
        BlockKind::StateSpaceC { a, b, c, d } => (a, b, c, d, None),
        BlockKind::StateSpaceD { a, b, c, d, sample_time } => (a, b, c, d, Some(*sample_time)),
        _ => unreachable!(),
    };
    let s = ss_augment(a, b, c, d, ctx.theta)?;
    let kind = match ts {
        None => BlockKind::StateSpaceC { a: s.a, b: s.b, c: s.c, d: s.d },
        Some(t) => BlockKind::StateSpaceD { a: s.a, b: s.b, c: s.c, d: s.d, sample_time: t },
    };
    let m = site.ins.len();
    let id = ctx.add(site.name(ctx, 1), kind);
    for i in 0..m {
        ctx.wire(site.ins[i].clone(), &id, i + 1);
        let du = site.du(ctx, i);
        ctx.wire(du, &id, m + i + 1);
    }
    Ok(())
}

fn rule_lookup(ctx: &mut Ctx, site: &Site, breakpoints: &[f64], values: &[f64], how: LookupDerivative) {
    let u = site.ins[0].clone();
    let du = site.du(ctx, 0);
    let fin = site.name(ctx, 1);
    let table = |output| BlockKind::LookupTable1D {
        breakpoints: breakpoints.to_vec(),
        values: values.to_vec(),
        output,
        derivative: LookupDerivative::Slope,
    };
    let how = match how {
        LookupDerivative::Fd if ctx.opts.fd_central => LookupDerivative::FdCentral,
        h => h,
    };
    let slope = match how {
        LookupDerivative::Slope => {
            let s = ctx.add(site.name(ctx, 2), table(LookupOutput::Slope));
            ctx.wire(u, &s, 1);
            PortRef::new(s, 1)
        }
        LookupDerivative::Fd | LookupDerivative::FdCentral => {
            let eta = breakpoints.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
            let central = how == LookupDerivative::FdCentral;
            ctx.warnings.push(format!(
                "{}: derivative of lookup table `{}` by {} difference with increment {eta}",
                fin,
                site.block.id,
                if central { "central" } else { "forward" }
            ));
            // shifted copies of the table evaluated at u + eta (and u - eta)
            let c = ctx.add(site.name(ctx, 2), BlockKind::Constant { value: ParamExpr::c(eta) });
            let up = ctx.add(site.name(ctx, 3), k_sum("++"));
            ctx.wire(u.clone(), &up, 1);
            ctx.wire(PortRef::new(c.clone(), 1), &up, 2);
            let tu = ctx.add(site.name(ctx, 4), table(LookupOutput::Value));
            ctx.wire(PortRef::new(up, 1), &tu, 1);
            let lo = if central {
                let dn = ctx.add(site.name(ctx, 5), k_sum("+-"));
                ctx.wire(u, &dn, 1);
                ctx.wire(PortRef::new(c, 1), &dn, 2);
                let tl = ctx.add(site.name(ctx, 6), table(LookupOutput::Value));
                ctx.wire(PortRef::new(dn, 1), &tl, 1);
                PortRef::new(tl, 1)
            } else {
                site.y()
            };
            let diff = ctx.add(site.name(ctx, 7), k_sum("+-"));
            ctx.wire(PortRef::new(tu, 1), &diff, 1);
            ctx.wire(lo, &diff, 2);
            let width = if central { 2.0 * eta } else { eta };
            let g = ctx.add(site.name(ctx, 8), k_gain(ParamExpr::c(1.0 / width)));
            ctx.wire(PortRef::new(diff, 1), &g, 1);
            PortRef::new(g, 1)
        }
    };
    let id = ctx.add(fin, k_prod("**"));
    ctx.wire(slope, &id, 1);
    ctx.wire(du, &id, 2);
}

fn rule_delay(ctx: &mut Ctx, site: &Site, delay: &ParamExpr, prehistory: &ParamExpr, output: DelayOutput) -> Result<(), DiagramError> {
    let dh = delay.diff(ctx.theta);
    let dphi = prehistory.diff(ctx.theta);
    let copy = BlockKind::TransportDelay { delay: delay.clone(), prehistory: dphi, output };
    if dh.is_zero() {
        let du = site.du(ctx, 0);
        let id = ctx.add(site.name(ctx, 1), copy);
        ctx.wire(du, &id, 1);
        return Ok(());
    }
    if output == DelayOutput::Rate {
        return Err(DiagramError::Unsupported {
            block: site.block.id.clone(),
            reason: format!("the rate output of a delay that depends on `{}`", ctx.theta),
        });
    }
    let du = site.du(ctx, 0);
    let a = ctx.add(site.name(ctx, 2), copy);
    ctx.wire(du, &a, 1);
    let r = ctx.add(
        site.name(ctx, 3),
        BlockKind::TransportDelay { delay: delay.clone(), prehistory: ParamExpr::zero(), output: DelayOutput::Rate },
    );
    ctx.wire(site.ins[0].clone(), &r, 1);
    let g = ctx.add(site.name(ctx, 4), k_gain(ParamExpr::neg(dh)));
    ctx.wire(PortRef::new(r, 1), &g, 1);
    emit_sum(ctx, site, vec![('+', PortRef::new(a, 1)), ('+', PortRef::new(g, 1))]);
    ctx.warnings.push(format!(
        "{}: sensitivity to the delay of `{}` uses the delayed rate of its input (DDE sensitivity)",
        site.name(ctx, 1),
        site.block.id
    ));
    Ok(())
}

fn rule_subsystem(ctx: &mut Ctx, site: &Site, inner: &Diagram) -> Result<(), DiagramError> {
    let m = site.ins.len();
    let mut widened = inner.clone();
    let mut seeds = BTreeMap::new();
    let inports: Vec<(String, usize)> = inner
        .blocks
        .iter()
        .filter_map(|b| match b.kind {
            BlockKind::Inport { index } => Some((b.id.clone(), index)),
            _ => None,
        })
        .collect();
    for (id, k) in inports {
        let did = derivative_block_name(&id, ctx.theta, 1);
        widened.blocks.push(Block::new(did.clone(), BlockKind::Inport { index: m + k }));
        widened.annotations.derivative_blocks.push(did.clone());
        let active = site.dins[k - 1].is_some();
        seeds.insert(PortRef::new(id, 1), active.then(|| PortRef::new(did, 1)));
    }
    let widened = transform(&widened, ctx.theta, ctx.opts, &seeds, true)?;
    ctx.warnings.extend(widened.annotations.warnings.iter().map(|w| format!("{}/{w}", site.block.id)));
    let id = ctx.add(site.name(ctx, 1), BlockKind::Subsystem { diagram: Box::new(widened) });
    for i in 0..m {
        ctx.wire(site.ins[i].clone(), &id, i + 1);
        let du = site.du(ctx, i);
        ctx.wire(du, &id, m + i + 1);
    }
    Ok(())
}

fn emit(ctx: &mut Ctx, site: &Site) -> Result<(), DiagramError> {
    let theta = ctx.theta;
    match &site.block.kind {
        BlockKind::Gain { gain } => rule_gain(ctx, site, gain),
        BlockKind::Sum { signs } => rule_sum(ctx, site, signs),
        BlockKind::Product { ops } => rule_product(ctx, site, ops),
        BlockKind::Fn { func } => rule_fn(ctx, site, *func),
        BlockKind::Integrator { initial, saturation, follow } => {
            let follow = if saturation.is_some() { Some(site.block.id.clone()) } else { follow.clone() };
            let du = site.du(ctx, 0);
            let id = ctx.add(
                site.name(ctx, 1),
                BlockKind::Integrator { initial: initial.diff(theta), saturation: None, follow },
            );
            ctx.wire(du, &id, 1);
        }
        k @ (BlockKind::TransferFnS { .. } | BlockKind::TransferFnZ { .. }) => rule_tf(ctx, site, k),
        k @ (BlockKind::StateSpaceC { .. } | BlockKind::StateSpaceD { .. }) => rule_ss(ctx, site, k)?,
        BlockKind::Switch { threshold } => {
            let (a, b) = (site.du(ctx, 0), site.du(ctx, 2));
            let id = ctx.add(site.name(ctx, 1), BlockKind::Switch { threshold: *threshold });
            ctx.wire(a, &id, 1);
            ctx.wire(site.ins[1].clone(), &id, 2);
            ctx.wire(b, &id, 3);
        }
        BlockKind::Saturation { lower, upper } => {
            let u = site.ins[0].clone();
            let du = site.du(ctx, 0);
            let z = ctx.zero();
            let hi = ctx.add(site.name(ctx, 2), BlockKind::Switch { threshold: *upper });
            ctx.wire(z.clone(), &hi, 1);
            ctx.wire(u.clone(), &hi, 2);
            ctx.wire(du, &hi, 3);
            let id = ctx.add(site.name(ctx, 1), BlockKind::Switch { threshold: *lower });
            ctx.wire(PortRef::new(hi, 1), &id, 1);
            ctx.wire(u, &id, 2);
            ctx.wire(z, &id, 3);
        }
        BlockKind::SaturationDynamic => {
            if site.dins[0].is_some() || site.dins[2].is_some() {
                ctx.warnings.push(format!(
                    "{}: bounds of `{}` depend on `{theta}` but are treated as constant",
                    site.name(ctx, 1),
                    site.block.id
                ));
            }
            let (up, u, lo) = (site.ins[0].clone(), site.ins[1].clone(), site.ins[2].clone());
            let du = site.du(ctx, 1);
            let z = ctx.zero();
            let over = ctx.add(site.name(ctx, 2), k_sum("+-"));
            ctx.wire(u.clone(), &over, 1);
            ctx.wire(up, &over, 2);
            let hi = ctx.add(site.name(ctx, 3), BlockKind::Switch { threshold: 0.0 });
            ctx.wire(z.clone(), &hi, 1);
            ctx.wire(PortRef::new(over, 1), &hi, 2);
            ctx.wire(du, &hi, 3);
            let under = ctx.add(site.name(ctx, 4), k_sum("+-"));
            ctx.wire(u, &under, 1);
            ctx.wire(lo, &under, 2);
            let id = ctx.add(site.name(ctx, 1), BlockKind::Switch { threshold: 0.0 });
            ctx.wire(PortRef::new(hi, 1), &id, 1);
            ctx.wire(PortRef::new(under, 1), &id, 2);
            ctx.wire(z, &id, 3);
        }
        BlockKind::LookupTable1D { breakpoints, values, derivative, .. } => {
            rule_lookup(ctx, site, breakpoints, values, *derivative)
        }
        BlockKind::Constant { value } => {
            ctx.add(site.name(ctx, 1), BlockKind::Constant { value: value.diff(theta) });
        }
        BlockKind::Step { time, level, initial } => {
            ctx.add(
                site.name(ctx, 1),
                BlockKind::Step { time: *time, level: level.diff(theta), initial: initial.diff(theta) },
            );
        }
        BlockKind::TransportDelay { delay, prehistory, output } => rule_delay(ctx, site, delay, prehistory, *output)?,
        BlockKind::Mux { n } => {
            let id = ctx.add(site.name(ctx, 1), BlockKind::Mux { n: *n });
            for i in 0..*n {
                let du = site.du(ctx, i);
                ctx.wire(du, &id, i + 1);
            }
        }
        BlockKind::Demux { .. } | BlockKind::RateTransition { .. } => {
            let du = site.du(ctx, 0);
            let id = ctx.add(site.name(ctx, 1), site.block.kind.clone());
            ctx.wire(du, &id, 1);
        }
        BlockKind::UnitDelay { initial, sample_time } => {
            let du = site.du(ctx, 0);
            let id = ctx.add(
                site.name(ctx, 1),
                BlockKind::UnitDelay { initial: initial.diff(theta), sample_time: *sample_time },
            );
            ctx.wire(du, &id, 1);
        }
        BlockKind::Subsystem { diagram } => rule_subsystem(ctx, site, diagram)?,
        BlockKind::Inport { .. } => {
            return Err(DiagramError::Unsupported {
                block: site.block.id.clone(),
                reason: "inport without an enclosing subsystem".into(),
            })
        }
    }
    Ok(())
}

/// Port of the derivative flow carrying `∂(block.port)/∂θ`.
fn assigned_port(b: &Block, port: usize, theta: &str) -> PortRef {
    let base = derivative_block_name(&b.id, theta, 1);
    match &b.kind {
        BlockKind::StateSpaceC { .. } | BlockKind::StateSpaceD { .. } | BlockKind::Subsystem { .. } => {
            PortRef::new(base, b.kind.num_outputs() + port)
        }
        _ => PortRef::new(base, port),
    }
}

/// Which output ports carry a nonzero derivative.
fn activity(
    d: &Diagram,
    theta: &str,
    known: &BTreeMap<PortRef, Option<PortRef>>,
    drivers: &BTreeMap<PortRef, PortRef>,
) -> BTreeSet<String> {
    let mut active: BTreeSet<String> = BTreeSet::new();
    let port_active = |r: &PortRef, active: &BTreeSet<String>| -> bool {
        match known.get(r) {
            Some(s) => s.is_some(),
            None => active.contains(&r.block),
        }
    };
    loop {
        let mut changed = false;
        for b in &d.blocks {
            if active.contains(&b.id) || known.contains_key(&PortRef::new(b.id.clone(), 1)) {
                continue;
            }
            let input = |p: usize| drivers.get(&PortRef::new(b.id.clone(), p)).is_some_and(|r| port_active(r, &active));
            let on = match &b.kind {
                BlockKind::Inport { .. } => false,
                BlockKind::Switch { .. } => input(1) || input(3),
                BlockKind::LookupTable1D { output: LookupOutput::Slope, .. } => false,
                BlockKind::SaturationDynamic => input(2),
                k => k.depends_on(theta) || (1..=k.num_inputs()).any(input),
            };
            if on {
                active.insert(b.id.clone());
                changed = true;
            }
        }
        if !changed {
            return active;
        }
    }
}

/// Core transform. `seeds` fixes derivative signals of given ports (used for
/// subsystem inports); with `all_companions` every output gets a companion in
/// order, which subsystem port widening relies on.
fn transform(
    d: &Diagram,
    theta: &str,
    opts: &AgdmOptions,
    seeds: &BTreeMap<PortRef, Option<PortRef>>,
    all_companions: bool,
) -> Result<Diagram, DiagramError> {
    let drivers = d.drivers();
    let mut known: BTreeMap<PortRef, Option<PortRef>> = BTreeMap::new();
    for r in &d.annotations.derivatives {
        if r.wrt == theta && d.find(&r.of.block).is_some() {
            known.insert(r.of.clone(), r.signal.clone());
        }
    }
    known.extend(seeds.iter().map(|(k, v)| (k.clone(), v.clone())));
    let active = activity(d, theta, &known, &drivers);

    let signal = |r: &PortRef| -> Option<PortRef> {
        if let Some(s) = known.get(r) {
            return s.clone();
        }
        if active.contains(&r.block) {
            let b = d.find(&r.block).expect("driver exists");
            return Some(assigned_port(b, r.port, theta));
        }
        None
    };

    let mut ctx = Ctx {
        theta,
        opts,
        taken: d.blocks.iter().map(|b| b.id.clone()).collect(),
        blocks: d.blocks.clone(),
        links: d.links.clone(),
        new_ids: vec![],
        zero: None,
        warnings: vec![],
    };
    if ctx.taken.contains(&zero_source_name(theta)) {
        ctx.zero = Some(zero_source_name(theta));
    }

    for b in &d.blocks {
        if !active.contains(&b.id) {
            continue;
        }
        let n = b.kind.num_inputs();
        let mut ins = Vec::with_capacity(n);
        let mut dins = Vec::with_capacity(n);
        for p in 1..=n {
            let src = drivers.get(&PortRef::new(b.id.clone(), p)).expect("validated wiring").clone();
            dins.push(signal(&src));
            ins.push(src);
        }
        emit(&mut ctx, &Site { block: b, ins, dins })?;
    }

    let mut outputs = d.outputs.clone();
    let mut names: BTreeSet<String> = outputs.iter().map(|o| o.name.clone()).collect();
    for o in &d.outputs {
        let mut name = derivative_output_name(&o.name, theta);
        if names.contains(&name) {
            if !all_companions {
                continue;
            }
            let mut k = 2;
            while names.contains(&format!("{name}#{k}")) {
                k += 1;
            }
            name = format!("{name}#{k}");
        }
        let from = match signal(&o.from) {
            Some(s) => s,
            None => ctx.zero(),
        };
        names.insert(name.clone());
        outputs.push(OutputSpec { name, from });
    }

    let mut records = d.annotations.derivatives.clone();
    for b in &d.blocks {
        for p in 1..=b.kind.num_outputs() {
            let of = PortRef::new(b.id.clone(), p);
            if !known.contains_key(&of) {
                records.push(DerivativeRecord { of: of.clone(), wrt: theta.to_string(), signal: signal(&of) });
            }
        }
    }

    let mut annotations = d.annotations.clone();
    annotations.derivatives = records;
    annotations.derivative_blocks.extend(ctx.new_ids.iter().cloned());
    annotations.warnings.extend(ctx.warnings);
    let mut out = Diagram {
        schema: d.schema,
        name: d.name.clone(),
        params: d.params.clone(),
        blocks: ctx.blocks,
        links: ctx.links,
        outputs,
        annotations,
    };
    if opts.prune {
        let candidates: BTreeSet<String> = ctx.new_ids.into_iter().collect();
        out = prune_blocks(&out, &candidates, &zero_source_name(theta));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagram::BlockKind as K;

    fn pe(s: &str) -> ParamExpr {
        s.parse().unwrap()
    }

    pub(crate) fn first_order() -> Diagram {
        Diagram::new("first_order")
            .param("k", 1.0)
            .param("tau", 0.5)
            .block("u", K::Step { time: 0.0, level: ParamExpr::one(), initial: ParamExpr::zero() })
            .block("gk", K::Gain { gain: pe("k") })
            .block("sum", K::Sum { signs: "+-".into() })
            .block("gt", K::Gain { gain: pe("1/tau") })
            .block("int", K::Integrator { initial: ParamExpr::zero(), saturation: None, follow: None })
            .link("u.1", "gk.1")
            .link("gk.1", "sum.1")
            .link("int.1", "sum.2")
            .link("sum.1", "gt.1")
            .link("gt.1", "int.1")
            .output("y", "int.1")
    }

    #[test]
    fn names() {
        assert_eq!(derivative_block_name("int", "tau", 1), "d(int)/d(tau)[1]");
        assert_eq!(derivative_block_name("d(int)/d(tau)[1]", "tau", 2), "d2(int)/d(tau)2[1,2]");
        assert_eq!(derivative_block_name("d(int)/d(tau)[1]", "k", 1), "d(d(int)/d(tau)[1])/d(k)[1]");
        assert_eq!(derivative_output_name("y", "tau"), "dy/dtau");
        assert_eq!(derivative_output_name("dy/dtau", "tau"), "d2y/dtau2");
        assert_eq!(derivative_output_name("dy/dk", "tau"), "d(dy/dk)/dtau");
    }

    #[test]
    fn first_order_wrt_tau() {
        let d = first_order();
        let a = agdm_diff(&d, "tau").unwrap();
        // original untouched
        assert_eq!(&a.blocks[..d.blocks.len()], &d.blocks[..]);
        assert_eq!(&a.links[..d.links.len()], &d.links[..]);
        let dy = &a.outputs[1];
        assert_eq!(dy.name, "dy/dtau");
        assert_eq!(dy.from, PortRef::new("d(int)/d(tau)[1]", 1));
        // step and k-gain are θ-free: their derivative blocks never appear
        assert!(a.find("d(u)/d(tau)[1]").is_none());
        assert!(a.find("d(gk)/d(tau)[1]").is_none());
        match &a.find("d(gt)/d(tau)[3]").unwrap().kind {
            K::Gain { gain } => assert_eq!(gain.to_string(), "-1/tau^2"),
            k => panic!("{k:?}"),
        }
        let again = parse_roundtrip(&a);
        assert_eq!(again, a);
    }

    fn parse_roundtrip(d: &Diagram) -> Diagram {
        crate::diagram::parse_diagram(&d.to_json()).unwrap()
    }

    #[test]
    fn theta_free_model_has_zero_derivative() {
        let d = first_order().param("zeta", 0.3);
        let a = agdm_diff(&d, "zeta").unwrap();
        assert_eq!(a.outputs[1].from, PortRef::new("d(0)/d(zeta)", 1));
        assert_eq!(a.blocks.len(), d.blocks.len() + 1);
    }

    #[test]
    fn unknown_parameter() {
        match agdm_diff(&first_order(), "omega") {
            Err(DiagramError::UnknownParameter { available, .. }) => assert_eq!(available, "k, tau"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn second_pass_reuses_first() {
        let d = first_order();
        let a = agdm_diff(&d, "tau").unwrap();
        let b = agdm_diff(&a, "tau").unwrap();
        let names: Vec<&str> = b.outputs.iter().map(|o| o.name.as_str()).collect();
        assert_eq!(names, ["y", "dy/dtau", "d2y/dtau2"]);
        assert_eq!(b.blocks.iter().filter(|x| x.id.starts_with("d(")).count(),
                   a.blocks.iter().filter(|x| x.id.starts_with("d(")).count());
        assert_eq!(b.outputs[2].from, PortRef::new("d2(int)/d(tau)2[1,1]", 1));
    }

    #[test]
    fn switch_copy_tests_original_signal() {
        let d = Diagram::new("sw")
            .param("k", 2.0)
            .block("c", K::Constant { value: pe("k") })
            .block("t", K::Step { time: 1.0, level: ParamExpr::one(), initial: ParamExpr::zero() })
            .block("z", K::Constant { value: ParamExpr::zero() })
            .block("s", K::Switch { threshold: 0.5 })
            .link("c.1", "s.1")
            .link("t.1", "s.2")
            .link("z.1", "s.3")
            .output("y", "s.1");
        let a = agdm_diff(&d, "k").unwrap();
        assert_eq!(a.input_source("d(s)/d(k)[1]", 2), Some(&PortRef::new("t", 1)));
        assert_eq!(a.input_source("d(s)/d(k)[1]", 1), Some(&PortRef::new("d(c)/d(k)[1]", 1)));
        assert_eq!(a.input_source("d(s)/d(k)[1]", 3), Some(&PortRef::new("d(0)/d(k)", 1)));
    }

    #[test]
    fn lookup_fd_warns() {
        let d = Diagram::new("lut")
            .param("k", 2.0)
            .block("c", K::Constant { value: pe("k") })
            .block("t", K::LookupTable1D {
                breakpoints: vec![0.0, 1.0, 3.0],
                values: vec![0.0, 2.0, 3.0],
                output: LookupOutput::Value,
                derivative: LookupDerivative::Fd,
            })
            .link("c.1", "t.1")
            .output("y", "t.1");
        let a = agdm_diff(&d, "k").unwrap();
        assert_eq!(a.annotations.warnings.len(), 1);
        assert!(a.annotations.warnings[0].contains("forward"));
        let c = agdm_diff_with(&d, "k", &AgdmOptions { fd_central: true, ..Default::default() }).unwrap();
        assert!(c.annotations.warnings[0].contains("central"));
        let mut slope = d.clone();
        if let K::LookupTable1D { derivative, .. } = &mut slope.blocks[1].kind {
            *derivative = LookupDerivative::Slope;
        }
        assert!(agdm_diff(&slope, "k").unwrap().annotations.warnings.is_empty());
    }

    #[test]
    fn subsystem_is_widened() {
        let inner = Diagram::new("inner")
            .block("in1", K::Inport { index: 1 })
            .block("g", K::Gain { gain: pe("k") })
            .link("in1.1", "g.1")
            .output("o", "g.1");
        let d = Diagram::new("outer")
            .param("k", 2.0)
            .block("c", K::Constant { value: pe("k") })
            .block("s", K::Subsystem { diagram: Box::new(inner) })
            .link("c.1", "s.1")
            .output("y", "s.1");
        let a = agdm_diff(&d, "k").unwrap();
        let ds = a.find("d(s)/d(k)[1]").unwrap();
        assert_eq!(ds.kind.num_inputs(), 2);
        assert_eq!(ds.kind.num_outputs(), 2);
        assert_eq!(a.outputs[1].from, PortRef::new("d(s)/d(k)[1]", 2));
    }
}
