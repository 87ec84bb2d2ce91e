use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use super::{Block, BlockKind, Diagram, Link, OutputSpec, PortRef};
use crate::expr::ParamValues;

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoOutputs,
    DuplicateId(String),
    MissingBlock { context: String, block: String },
    PortOutOfRange { context: String, port: PortRef },
    UnconnectedInput(PortRef),
    MultipleDrivers(PortRef),
    AlgebraicLoop { cycle: Vec<String> },
    ImproperTransferFn { block: String, num_degree: usize, den_degree: usize },
    ZeroLeadingDenominator { block: String },
    BadLookupTable { block: String, reason: String },
    UnknownParameter { block: String, name: String },
    BadBundle { block: String, reason: String },
    BadInports { block: String, reason: String },
    BadDimensions { block: String, reason: String },
    BadField { block: String, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoOutputs => write!(f, "diagram declares no outputs"),
            Violation::DuplicateId(id) => write!(f, "block id `{id}` used more than once"),
            Violation::MissingBlock { context, block } => write!(f, "{context}: no block `{block}`"),
            Violation::PortOutOfRange { context, port } => write!(f, "{context}: port {port} does not exist"),
            Violation::UnconnectedInput(p) => write!(f, "input {p} is not driven"),
            Violation::MultipleDrivers(p) => write!(f, "input {p} has more than one driver"),
            Violation::AlgebraicLoop { cycle } => write!(f, "algebraic loop: {}", cycle.join(" -> ")),
            Violation::ImproperTransferFn { block, num_degree, den_degree } => write!(
                f,
                "transfer function `{block}` is improper (numerator degree {num_degree} > denominator degree {den_degree})"
            ),
            Violation::ZeroLeadingDenominator { block } => {
                write!(f, "transfer function `{block}` has a zero leading denominator coefficient")
            }
            Violation::BadLookupTable { block, reason } => write!(f, "lookup table `{block}`: {reason}"),
            Violation::UnknownParameter { block, name } => {
                write!(f, "block `{block}` refers to unknown parameter `{name}`")
            }
            Violation::BadBundle { block, reason } => write!(f, "bundle misuse at `{block}`: {reason}"),
            Violation::BadInports { block, reason } => write!(f, "subsystem `{block}`: {reason}"),
            Violation::BadDimensions { block, reason } => write!(f, "state space `{block}`: {reason}"),
            Violation::BadField { block, reason } => write!(f, "block `{block}`: {reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "ok");
        }
        for v in &self.violations {
            writeln!(f, "- {v}")?;
        }
        Ok(())
    }
}

/// Degree of a descending coefficient list after dropping structurally
/// zero leading terms.
pub(crate) fn effective_degree(coeffs: &[crate::expr::ParamExpr]) -> usize {
    let lead = coeffs.iter().take_while(|c| c.is_zero()).count();
    coeffs.len().saturating_sub(lead + 1)
}

/// Whether output depends algebraically (same instant) on input.
pub(crate) fn has_feedthrough(kind: &BlockKind) -> bool {
    match kind {
        BlockKind::Integrator { .. } | BlockKind::UnitDelay { .. } | BlockKind::TransportDelay { .. } => false,
        BlockKind::TransferFnS { num, den } | BlockKind::TransferFnZ { num, den, .. } => {
            effective_degree(num) >= effective_degree(den) && num.iter().any(|c| !c.is_zero())
        }
        BlockKind::StateSpaceC { d, .. } | BlockKind::StateSpaceD { d, .. } => {
            d.iter().flatten().any(|e| !e.is_zero())
        }
        _ => true,
    }
}

fn check_blocks(d: &Diagram, params: &ParamValues, out: &mut Vec<Violation>) {
    let mut ids = BTreeSet::new();
    for b in &d.blocks {
        if !ids.insert(b.id.as_str()) {
            out.push(Violation::DuplicateId(b.id.clone()));
        }
        let id = b.id.clone();
        let field = |reason: String| Violation::BadField { block: id.clone(), reason };
        for e in b.kind.exprs() {
            for name in e.params() {
                if !params.contains_key(&name) {
                    out.push(Violation::UnknownParameter { block: b.id.clone(), name });
                }
            }
        }
        if let BlockKind::TransferFnZ { sample_time, .. }
        | BlockKind::StateSpaceD { sample_time, .. }
        | BlockKind::UnitDelay { sample_time, .. }
        | BlockKind::RateTransition { sample_time } = &b.kind
        {
            if !(*sample_time > 0.0 && sample_time.is_finite()) {
                out.push(field(format!("sample time {sample_time} must be positive")));
            }
        }
        match &b.kind {
            BlockKind::Sum { signs } => {
                if signs.is_empty() || signs.chars().any(|c| c != '+' && c != '-') {
                    out.push(field(format!("signs `{signs}` must be a non-empty string of + and -")));
                }
            }
            BlockKind::Product { ops } => {
                if ops.is_empty() || ops.chars().any(|c| c != '*' && c != '/') {
                    out.push(field(format!("ops `{ops}` must be a non-empty string of * and /")));
                }
            }
            BlockKind::TransferFnS { num, den } | BlockKind::TransferFnZ { num, den, .. } => {
                if den.is_empty() || den[0].is_zero() || den[0].eval(params).ok() == Some(0.0) {
                    out.push(Violation::ZeroLeadingDenominator { block: b.id.clone() });
                }
                let (nd, dd) = (effective_degree(num), effective_degree(den));
                if nd > dd {
                    out.push(Violation::ImproperTransferFn { block: b.id.clone(), num_degree: nd, den_degree: dd });
                }
            }
            BlockKind::StateSpaceC { a, b: bm, c, d: dm } | BlockKind::StateSpaceD { a, b: bm, c, d: dm, .. } => {
                if let Err(reason) = super::linear::check_ss_dims(a, bm, c, dm) {
                    out.push(Violation::BadDimensions { block: b.id.clone(), reason });
                }
            }
            BlockKind::LookupTable1D { breakpoints, values, .. } => {
                let reason = if breakpoints.len() < 2 {
                    Some("needs at least two breakpoints".to_string())
                } else if breakpoints.len() != values.len() {
                    Some(format!("{} breakpoints but {} values", breakpoints.len(), values.len()))
                } else if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
                    Some("breakpoints must be strictly increasing".to_string())
                } else if breakpoints.iter().chain(values).any(|v| !v.is_finite()) {
                    Some("non-finite entry".to_string())
                } else {
                    None
                };
                if let Some(reason) = reason {
                    out.push(Violation::BadLookupTable { block: b.id.clone(), reason });
                }
            }
            BlockKind::Saturation { lower, upper } => {
                if !(lower < upper) {
                    out.push(field(format!("lower bound {lower} must be below upper bound {upper}")));
                }
            }
            BlockKind::Integrator { saturation: Some([lo, hi]), .. } if !(lo < hi) => {
                out.push(field(format!("saturation [{lo}, {hi}] is empty")));
            }
            BlockKind::Integrator { follow: Some(f), .. } => {
                let ok = matches!(d.find(f).map(|t| &t.kind), Some(BlockKind::Integrator { saturation: Some(_), .. }));
                if !ok {
                    out.push(field(format!("follows `{f}`, which is not a saturated integrator")));
                }
            }
            BlockKind::Mux { n } | BlockKind::Demux { n } if *n == 0 => {
                out.push(field("bundle width must be positive".into()));
            }
            BlockKind::Step { time, .. } if !time.is_finite() => {
                out.push(field("step time must be finite".into()));
            }
            BlockKind::Subsystem { diagram } => {
                let mut idx: Vec<usize> = diagram
                    .blocks
                    .iter()
                    .filter_map(|x| match x.kind {
                        BlockKind::Inport { index } => Some(index),
                        _ => None,
                    })
                    .collect();
                idx.sort_unstable();
                if idx.iter().enumerate().any(|(i, &k)| k != i + 1) {
                    out.push(Violation::BadInports {
                        block: b.id.clone(),
                        reason: format!("inport indices {idx:?} must be 1..n without gaps"),
                    });
                }
                if diagram.outputs.is_empty() {
                    out.push(Violation::BadInports { block: b.id.clone(), reason: "no outputs".into() });
                }
                let mut inner_params = params.clone();
                inner_params.extend(diagram.params.clone());
                let mut inner = Vec::new();
                check_blocks(diagram, &inner_params, &mut inner);
                check_wiring(diagram, &mut inner);
                out.extend(inner.into_iter().map(|v| prefix_violation(&b.id, v)));
            }
            _ => {}
        }
    }
}

fn prefix_violation(prefix: &str, v: Violation) -> Violation {
    let p = |s: String| format!("{prefix}/{s}");
    match v {
        Violation::DuplicateId(s) => Violation::DuplicateId(p(s)),
        Violation::ImproperTransferFn { block, num_degree, den_degree } => {
            Violation::ImproperTransferFn { block: p(block), num_degree, den_degree }
        }
        Violation::ZeroLeadingDenominator { block } => Violation::ZeroLeadingDenominator { block: p(block) },
        Violation::BadLookupTable { block, reason } => Violation::BadLookupTable { block: p(block), reason },
        Violation::UnknownParameter { block, name } => Violation::UnknownParameter { block: p(block), name },
        Violation::BadBundle { block, reason } => Violation::BadBundle { block: p(block), reason },
        Violation::BadInports { block, reason } => Violation::BadInports { block: p(block), reason },
        Violation::BadDimensions { block, reason } => Violation::BadDimensions { block: p(block), reason },
        Violation::BadField { block, reason } => Violation::BadField { block: p(block), reason },
        Violation::UnconnectedInput(r) => Violation::UnconnectedInput(PortRef::new(p(r.block), r.port)),
        Violation::MultipleDrivers(r) => Violation::MultipleDrivers(PortRef::new(p(r.block), r.port)),
        Violation::AlgebraicLoop { cycle } => Violation::AlgebraicLoop { cycle: cycle.into_iter().map(p).collect() },
        other => other,
    }
}

/// Link references, driver counts and bundle typing.
fn check_wiring(d: &Diagram, out: &mut Vec<Violation>) {
    let by_id: HashMap<&str, &Block> = d.blocks.iter().map(|b| (b.id.as_str(), b)).collect();
    let check = |context: String, r: &PortRef, input: bool, out: &mut Vec<Violation>| -> bool {
        match by_id.get(r.block.as_str()) {
            None => {
                out.push(Violation::MissingBlock { context, block: r.block.clone() });
                false
            }
            Some(b) => {
                let n = if input { b.kind.num_inputs() } else { b.kind.num_outputs() };
                if r.port == 0 || r.port > n {
                    out.push(Violation::PortOutOfRange { context, port: r.clone() });
                    false
                } else {
                    true
                }
            }
        }
    };
    let mut drivers: BTreeMap<PortRef, usize> = BTreeMap::new();
    for (i, l) in d.links.iter().enumerate() {
        let a = check(format!("links[{i}].from"), &l.from, false, out);
        let b = check(format!("links[{i}].to"), &l.to, true, out);
        if a && b {
            *drivers.entry(l.to.clone()).or_default() += 1;
            let src = by_id[l.from.block.as_str()];
            let dst = by_id[l.to.block.as_str()];
            let src_bundle = matches!(src.kind, BlockKind::Mux { .. });
            match (&src.kind, &dst.kind) {
                (BlockKind::Mux { n }, BlockKind::Demux { n: m }) if n != m => out.push(Violation::BadBundle {
                    block: dst.id.clone(),
                    reason: format!("demux of width {m} fed by mux of width {n}"),
                }),
                (BlockKind::Mux { .. }, BlockKind::Demux { .. }) => {}
                (_, BlockKind::Demux { .. }) => out.push(Violation::BadBundle {
                    block: dst.id.clone(),
                    reason: "demux input must come from a mux".into(),
                }),
                _ if src_bundle => out.push(Violation::BadBundle {
                    block: dst.id.clone(),
                    reason: format!("bundle from `{}` may only feed a demux", src.id),
                }),
                _ => {}
            }
        }
    }
    for (i, o) in d.outputs.iter().enumerate() {
        if check(format!("outputs[{i}].from"), &o.from, false, out) {
            if let Some(Block { kind: BlockKind::Mux { .. }, id }) = by_id.get(o.from.block.as_str()).copied() {
                out.push(Violation::BadBundle { block: id.clone(), reason: "a bundle cannot be an output".into() });
            }
        }
    }
    for b in &d.blocks {
        for p in 1..=b.kind.num_inputs() {
            let r = PortRef::new(b.id.clone(), p);
            match drivers.get(&r).copied().unwrap_or(0) {
                0 => out.push(Violation::UnconnectedInput(r)),
                1 => {}
                _ => out.push(Violation::MultipleDrivers(r)),
            }
        }
    }
}

fn find_algebraic_loop(d: &Diagram) -> Option<Vec<String>> {
    let index: HashMap<&str, usize> = d.blocks.iter().enumerate().map(|(i, b)| (b.id.as_str(), i)).collect();
    let n = d.blocks.len();
    let mut adj: Vec<Vec<usize>> = vec![vec![]; n];
    for l in &d.links {
        let (Some(&s), Some(&t)) = (index.get(l.from.block.as_str()), index.get(l.to.block.as_str())) else {
            continue;
        };
        if has_feedthrough(&d.blocks[t].kind) {
            adj[s].push(t);
        }
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; n];
    let mut stack: Vec<usize> = Vec::new();
    fn dfs(v: usize, adj: &[Vec<usize>], state: &mut [u8], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
        state[v] = 1;
        stack.push(v);
        for &w in &adj[v] {
            if state[w] == 1 {
                let start = stack.iter().position(|&x| x == w).expect("on stack");
                let mut cyc = stack[start..].to_vec();
                cyc.push(w);
                return Some(cyc);
            }
            if state[w] == 0 {
                if let Some(c) = dfs(w, adj, state, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        state[v] = 2;
        None
    }
    for v in 0..n {
        if state[v] == 0 {
            if let Some(c) = dfs(v, &adj, &mut state, &mut stack) {
                return Some(c.into_iter().map(|i| d.blocks[i].id.clone()).collect());
            }
        }
    }
    None
}

/// Check a diagram; never fails, returns every violation found.
pub fn validate(d: &Diagram) -> ValidationReport {
    let mut v = Vec::new();
    if d.outputs.is_empty() {
        v.push(Violation::NoOutputs);
    }
    check_blocks(d, &d.params, &mut v);
    check_wiring(d, &mut v);
    if v.is_empty() {
        let flat = inline_subsystems(d);
        if let Some(cycle) = find_algebraic_loop(&flat) {
            v.push(Violation::AlgebraicLoop { cycle });
        }
        for b in &flat.blocks {
            if let BlockKind::Inport { .. } = b.kind {
                v.push(Violation::BadInports {
                    block: b.id.clone(),
                    reason: "inport outside a subsystem".into(),
                });
            }
        }
    }
    ValidationReport { violations: v }
}

enum SubOut {
    Internal(PortRef),
    Inport(usize),
}

/// Replace every subsystem by its blocks, ids prefixed with `<subsystem>/`.
///
/// The diagram must be wired correctly (see [`validate`]); dangling
/// references are dropped.
pub fn inline_subsystems(d: &Diagram) -> Diagram {
    if !d.blocks.iter().any(|b| matches!(b.kind, BlockKind::Subsystem { .. })) {
        return d.clone();
    }
    let mut blocks = Vec::new();
    // (subsystem, source inside or inport index, prefixed destination)
    let mut inner_links: Vec<(String, Result<PortRef, usize>, PortRef)> = Vec::new();
    let mut out_map: HashMap<(String, usize), SubOut> = HashMap::new();
    let subsystems: BTreeSet<String> = d
        .blocks
        .iter()
        .filter(|b| matches!(b.kind, BlockKind::Subsystem { .. }))
        .map(|b| b.id.clone())
        .collect();

    for b in &d.blocks {
        let BlockKind::Subsystem { diagram } = &b.kind else {
            blocks.push(b.clone());
            continue;
        };
        let inner = inline_subsystems(diagram);
        let pre = |s: &str| format!("{}/{}", b.id, s);
        let inports: HashMap<&str, usize> = inner
            .blocks
            .iter()
            .filter_map(|x| match x.kind {
                BlockKind::Inport { index } => Some((x.id.as_str(), index)),
                _ => None,
            })
            .collect();
        for x in &inner.blocks {
            if inports.contains_key(x.id.as_str()) {
                continue;
            }
            let mut x = x.clone();
            x.id = pre(&x.id);
            if let BlockKind::Integrator { follow: Some(f), .. } = &mut x.kind {
                *f = pre(f);
            }
            blocks.push(x);
        }
        for l in &inner.links {
            let from = match inports.get(l.from.block.as_str()) {
                Some(&k) => Err(k),
                None => Ok(PortRef::new(pre(&l.from.block), l.from.port)),
            };
            inner_links.push((b.id.clone(), from, PortRef::new(pre(&l.to.block), l.to.port)));
        }
        for (p, o) in inner.outputs.iter().enumerate() {
            let v = match inports.get(o.from.block.as_str()) {
                Some(&k) => SubOut::Inport(k),
                None => SubOut::Internal(PortRef::new(pre(&o.from.block), o.from.port)),
            };
            out_map.insert((b.id.clone(), p + 1), v);
        }
    }

    let drivers = d.drivers();
    fn resolve(
        src: &PortRef,
        subs: &BTreeSet<String>,
        out_map: &HashMap<(String, usize), SubOut>,
        drivers: &BTreeMap<PortRef, PortRef>,
        depth: usize,
    ) -> Option<PortRef> {
        if !subs.contains(&src.block) {
            return Some(src.clone());
        }
        if depth > 64 {
            return None;
        }
        match out_map.get(&(src.block.clone(), src.port))? {
            SubOut::Internal(r) => Some(r.clone()),
            SubOut::Inport(k) => {
                let outer = drivers.get(&PortRef::new(src.block.clone(), *k))?;
                resolve(outer, subs, out_map, drivers, depth + 1)
            }
        }
    }

    let mut links = Vec::new();
    for l in &d.links {
        if subsystems.contains(&l.to.block) {
            continue;
        }
        if let Some(from) = resolve(&l.from, &subsystems, &out_map, &drivers, 0) {
            links.push(Link { from, to: l.to.clone() });
        }
    }
    for (sub, from, to) in inner_links {
        let from = match from {
            Ok(r) => Some(r),
            Err(k) => drivers
                .get(&PortRef::new(sub.clone(), k))
                .and_then(|r| resolve(r, &subsystems, &out_map, &drivers, 0)),
        };
        if let Some(from) = from {
            links.push(Link { from, to });
        }
    }
    let outputs = d
        .outputs
        .iter()
        .filter_map(|o| {
            resolve(&o.from, &subsystems, &out_map, &drivers, 0).map(|from| OutputSpec { name: o.name.clone(), from })
        })
        .collect();
    Diagram {
        schema: d.schema,
        name: d.name.clone(),
        params: d.params.clone(),
        blocks,
        links,
        outputs,
        annotations: d.annotations.clone(),
    }
}
