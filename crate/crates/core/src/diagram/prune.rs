//! Structural-zero elimination.

use std::collections::{BTreeMap, BTreeSet};

use super::{Block, BlockKind, Diagram, Link, PortRef};
use crate::expr::ParamExpr;

/// Remove every block whose output is structurally zero.
pub fn prune_zero(d: &Diagram) -> Diagram {
    let all: BTreeSet<String> = d.blocks.iter().map(|b| b.id.clone()).collect();
    let mut name = "zero".to_string();
    while all.contains(&name) {
        name.push('0');
    }
    prune_blocks(d, &all, &name)
}

fn zero_set(d: &Diagram, candidates: &BTreeSet<String>) -> BTreeSet<String> {
    let drivers = d.drivers();
    let mut zero: BTreeSet<String> = BTreeSet::new();
    loop {
        let mut changed = false;
        for b in &d.blocks {
            if zero.contains(&b.id) || !candidates.contains(&b.id) {
                continue;
            }
            let z = |p: usize| drivers.get(&PortRef::new(b.id.clone(), p)).is_some_and(|r| zero.contains(&r.block));
            let all_in = |n: usize| (1..=n).all(z);
            let is_zero = match &b.kind {
                BlockKind::Constant { value } => value.is_zero(),
                BlockKind::Step { level, initial, .. } => level.is_zero() && initial.is_zero(),
                BlockKind::Gain { gain } => gain.is_zero() || z(1),
                BlockKind::Sum { signs } => all_in(signs.chars().count()),
                BlockKind::Product { ops } => {
                    let ops: Vec<char> = ops.chars().collect();
                    let hit = ops.iter().enumerate().any(|(i, &o)| o == '*' && z(i + 1));
                    let div0 = ops.iter().enumerate().any(|(i, &o)| o == '/' && z(i + 1));
                    hit && !div0
                }
                BlockKind::Integrator { initial, .. } | BlockKind::UnitDelay { initial, .. } => {
                    initial.is_zero() && z(1)
                }
                BlockKind::TransportDelay { prehistory, .. } => prehistory.is_zero() && z(1),
                BlockKind::TransferFnS { .. }
                | BlockKind::TransferFnZ { .. }
                | BlockKind::RateTransition { .. }
                | BlockKind::Demux { .. } => z(1),
                BlockKind::StateSpaceC { .. } | BlockKind::StateSpaceD { .. } | BlockKind::Mux { .. } => {
                    all_in(b.kind.num_inputs())
                }
                BlockKind::Switch { .. } => z(1) && z(3),
                _ => false,
            };
            if is_zero {
                zero.insert(b.id.clone());
                changed = true;
            }
        }
        if !changed {
            return zero;
        }
    }
}

/// Prune zero blocks among `candidates`; inputs that cannot be dropped are
/// fed from a zero constant named `zero_name`.
pub(crate) fn prune_blocks(d: &Diagram, candidates: &BTreeSet<String>, zero_name: &str) -> Diagram {
    let zero = zero_set(d, candidates);
    if zero.is_empty() {
        return d.clone();
    }
    let mut out = d.clone();
    out.blocks.retain(|b| !zero.contains(&b.id));
    let zref = PortRef::new(zero_name, 1);
    let mut need_zero = false;

    // Sum inputs fed by zeros are dropped; other inputs are refed.
    let mut sum_keep: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for b in &mut out.blocks {
        if let BlockKind::Sum { signs } = &mut b.kind {
            let chars: Vec<char> = signs.chars().collect();
            let keep: Vec<usize> = (1..=chars.len())
                .filter(|&p| {
                    d.input_source(&b.id, p).is_none_or(|r| !zero.contains(&r.block))
                })
                .collect();
            if !keep.is_empty() && keep.len() < chars.len() {
                *signs = keep.iter().map(|&p| chars[p - 1]).collect();
                sum_keep.insert(b.id.clone(), keep);
            }
        }
    }
    let mut links = Vec::with_capacity(out.links.len());
    for l in &out.links {
        if zero.contains(&l.to.block) {
            continue;
        }
        if let Some(keep) = sum_keep.get(&l.to.block) {
            if let Some(i) = keep.iter().position(|&p| p == l.to.port) {
                links.push(Link { from: l.from.clone(), to: PortRef::new(l.to.block.clone(), i + 1) });
            }
            continue;
        }
        if zero.contains(&l.from.block) {
            need_zero = true;
            links.push(Link { from: zref.clone(), to: l.to.clone() });
        } else {
            links.push(l.clone());
        }
    }
    out.links = links;
    for o in &mut out.outputs {
        if zero.contains(&o.from.block) {
            o.from = zref.clone();
            need_zero = true;
        }
    }
    for r in &mut out.annotations.derivatives {
        if r.signal.as_ref().is_some_and(|s| zero.contains(&s.block)) {
            r.signal = None;
        }
    }
    out.annotations.derivative_blocks.retain(|id| !zero.contains(id));
    if need_zero && out.find(zero_name).is_none() {
        out.blocks.push(Block::new(zero_name, BlockKind::Constant { value: ParamExpr::zero() }));
        out.annotations.derivative_blocks.push(zero_name.to_string());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagram::BlockKind as K;

    fn pe(s: &str) -> ParamExpr {
        s.parse().unwrap()
    }

    #[test]
    fn zero_subtree_removed() {
        let d = Diagram::new("z")
            .block("c", K::Constant { value: pe("0") })
            .block("g", K::Gain { gain: pe("3") })
            .block("i", K::Integrator { initial: ParamExpr::zero(), saturation: None, follow: None })
            .link("c.1", "g.1")
            .link("g.1", "i.1")
            .output("y", "i.1");
        let p = prune_zero(&d);
        assert_eq!(p.blocks.len(), 1);
        assert_eq!(p.blocks[0].id, "zero");
        assert_eq!(p.outputs[0].from, PortRef::new("zero", 1));
    }

    #[test]
    fn sum_arity_reduced() {
        let d = Diagram::new("s")
            .block("c", K::Constant { value: pe("0") })
            .block("one", K::Constant { value: pe("1") })
            .block("s", K::Sum { signs: "+-".into() })
            .link("c.1", "s.1")
            .link("one.1", "s.2")
            .output("y", "s.1");
        let p = prune_zero(&d);
        match &p.find("s").unwrap().kind {
            K::Sum { signs } => assert_eq!(signs, "-"),
            k => panic!("{k:?}"),
        }
        assert_eq!(p.links, vec![Link { from: PortRef::new("one", 1), to: PortRef::new("s", 1) }]);
        assert!(p.find("zero").is_none());
        assert!(crate::diagram::validate(&p).is_ok());
    }

    #[test]
    fn switch_arm_keeps_zero_source() {
        let d = Diagram::new("sw")
            .block("c", K::Constant { value: pe("0") })
            .block("one", K::Constant { value: pe("1") })
            .block("s", K::Switch { threshold: 0.0 })
            .link("one.1", "s.1")
            .link("one.1", "s.2")
            .link("c.1", "s.3")
            .output("y", "s.1");
        let p = prune_zero(&d);
        assert_eq!(p.input_source("s", 3), Some(&PortRef::new("zero", 1)));
        assert!(crate::diagram::validate(&p).is_ok());
    }
}
