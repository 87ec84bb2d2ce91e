use std::collections::HashMap;

use super::{Cmp, Node, NodeId, NodeKind, Tape};
use crate::elementary::ElementaryFn;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Key {
    tag: u8,
    a: u64,
    b: u64,
    children: Vec<NodeId>,
}

fn key_of(kind: &NodeKind, children: &[NodeId]) -> Key {
    let (tag, a, b) = match *kind {
        NodeKind::Input(j) => (0, j as u64, 0),
        NodeKind::Const(c) => (1, c.to_bits(), 0),
        NodeKind::Add => (2, 0, 0),
        NodeKind::Sub => (3, 0, 0),
        NodeKind::Mul => (4, 0, 0),
        NodeKind::Div => (5, 0, 0),
        NodeKind::Apply(f) => {
            let p = if let ElementaryFn::Pow(p) = f { p.to_bits() } else { 0 };
            (6, f.name().as_bytes().iter().fold(0u64, |h, &c| h * 31 + c as u64), p)
        }
        NodeKind::Branch { cmp, threshold } => (7, cmp as u64, threshold.to_bits()),
    };
    Key { tag, a, b, children: children.to_vec() }
}

/// Incremental tape construction with constant folding, algebraic
/// identities (`x+0`, `x*1`, `x*0`...) and common-subexpression sharing.
#[derive(Debug, Clone)]
pub struct TapeBuilder {
    nodes: Vec<Node>,
    num_inputs: usize,
    memo: HashMap<Key, NodeId>,
}

impl TapeBuilder {
    pub fn new(num_inputs: usize) -> TapeBuilder {
        TapeBuilder { nodes: Vec::new(), num_inputs, memo: HashMap::new() }
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, id: NodeId) -> NodeKind {
        self.nodes[id].kind
    }

    pub fn const_value(&self, id: NodeId) -> Option<f64> {
        match self.nodes[id].kind {
            NodeKind::Const(c) => Some(c),
            _ => None,
        }
    }

    fn is_const(&self, id: NodeId, c: f64) -> bool {
        self.const_value(id) == Some(c)
    }

    fn push(&mut self, kind: NodeKind, children: Vec<NodeId>) -> NodeId {
        let key = key_of(&kind, &children);
        if let Some(&id) = self.memo.get(&key) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(Node { kind, children });
        self.memo.insert(key, id);
        id
    }

    pub fn input(&mut self, j: usize) -> NodeId {
        assert!(j < self.num_inputs, "input {j} out of range {}", self.num_inputs);
        self.push(NodeKind::Input(j), vec![])
    }

    pub fn constant(&mut self, c: f64) -> NodeId {
        // -0.0 and 0.0 share a node so that folding sees one zero.
        let c = if c == 0.0 { 0.0 } else { c };
        self.push(NodeKind::Const(c), vec![])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => self.constant(x + y),
            (Some(x), _) if x == 0.0 => b,
            (_, Some(y)) if y == 0.0 => a,
            _ => self.push(NodeKind::Add, vec![a.min(b), a.max(b)]),
        }
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => self.constant(x - y),
            (_, Some(y)) if y == 0.0 => a,
            _ if a == b => self.constant(0.0),
            _ => self.push(NodeKind::Sub, vec![a, b]),
        }
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => self.constant(x * y),
            (Some(x), _) | (_, Some(x)) if x == 0.0 => self.constant(0.0),
            (Some(x), _) if x == 1.0 => b,
            (_, Some(y)) if y == 1.0 => a,
            _ => self.push(NodeKind::Mul, vec![a.min(b), a.max(b)]),
        }
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) if y != 0.0 => self.constant(x / y),
            (Some(x), _) if x == 0.0 => self.constant(0.0),
            (_, Some(y)) if y == 1.0 => a,
            _ => self.push(NodeKind::Div, vec![a, b]),
        }
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        if let Some(c) = self.const_value(a) {
            return self.constant(-c);
        }
        let z = self.constant(0.0);
        self.push(NodeKind::Sub, vec![z, a])
    }

    pub fn scale(&mut self, c: f64, a: NodeId) -> NodeId {
        let k = self.constant(c);
        self.mul(k, a)
    }

    pub fn sum(&mut self, terms: &[NodeId]) -> NodeId {
        let mut acc = self.constant(0.0);
        for &t in terms {
            acc = self.add(acc, t);
        }
        acc
    }

    pub fn apply(&mut self, f: ElementaryFn, a: NodeId) -> NodeId {
        if let Some(c) = self.const_value(a) {
            if let Ok(v) = f.eval(c) {
                return self.constant(v);
            }
        }
        match f {
            ElementaryFn::Pow(p) if p == 1.0 => a,
            ElementaryFn::Pow(p) if p == 0.0 => self.constant(1.0),
            _ => self.push(NodeKind::Apply(f), vec![a]),
        }
    }

    /// `if cond <cmp> threshold { then } else { else_ }`.
    pub fn branch(&mut self, cond: NodeId, cmp: Cmp, threshold: f64, then: NodeId, else_: NodeId) -> NodeId {
        if then == else_ {
            return then;
        }
        if let Some(c) = self.const_value(cond) {
            return if cmp.test(c, threshold) { then } else { else_ };
        }
        self.push(NodeKind::Branch { cmp, threshold }, vec![cond, then, else_])
    }

    /// Replay `tape` with its inputs bound to `inputs` (node ids in this
    /// builder) and return the ids of its outputs.
    pub fn import(&mut self, tape: &Tape, inputs: &[NodeId]) -> Vec<NodeId> {
        self.push_forward(tape, inputs, &vec![None; inputs.len()]).0
    }

    /// Replay `tape` and emit its directional derivative alongside.
    ///
    /// `tangents[j]` is the tangent of input `j` (`None` for structural
    /// zero). Returns the output ids and the output tangent ids. Branch
    /// tangents reuse the original condition and threshold. The tangent of
    /// `abs` is emitted as a sign branch, so the emitted program takes the
    /// `>= 0` side at the kink instead of failing there.
    pub fn push_forward(
        &mut self,
        tape: &Tape,
        inputs: &[NodeId],
        tangents: &[Option<NodeId>],
    ) -> (Vec<NodeId>, Vec<Option<NodeId>>) {
        assert_eq!(inputs.len(), tape.num_inputs());
        assert_eq!(tangents.len(), tape.num_inputs());
        let mut map: Vec<NodeId> = Vec::with_capacity(tape.len());
        let mut tan: Vec<Option<NodeId>> = Vec::with_capacity(tape.len());
        for node in tape.nodes() {
            let c = &node.children;
            let (v, t) = match node.kind {
                NodeKind::Input(j) => (inputs[j], tangents[j]),
                NodeKind::Const(x) => (self.constant(x), None),
                NodeKind::Add => {
                    let v = self.add(map[c[0]], map[c[1]]);
                    let t = match (tan[c[0]], tan[c[1]]) {
                        (Some(a), Some(b)) => Some(self.add(a, b)),
                        (a, b) => a.or(b),
                    };
                    (v, t)
                }
                NodeKind::Sub => {
                    let v = self.sub(map[c[0]], map[c[1]]);
                    let t = match (tan[c[0]], tan[c[1]]) {
                        (Some(a), Some(b)) => Some(self.sub(a, b)),
                        (Some(a), None) => Some(a),
                        (None, Some(b)) => Some(self.neg(b)),
                        (None, None) => None,
                    };
                    (v, t)
                }
                NodeKind::Mul => {
                    let (a, b) = (map[c[0]], map[c[1]]);
                    let v = self.mul(a, b);
                    let l = tan[c[0]].map(|ta| self.mul(ta, b));
                    let r = tan[c[1]].map(|tb| self.mul(a, tb));
                    let t = match (l, r) {
                        (Some(l), Some(r)) => Some(self.add(l, r)),
                        (l, r) => l.or(r),
                    };
                    (v, t)
                }
                NodeKind::Div => {
                    let (a, b) = (map[c[0]], map[c[1]]);
                    let v = self.div(a, b);
                    let t = match (tan[c[0]], tan[c[1]]) {
                        (None, None) => None,
                        (ta, tb) => {
                            let cb = tb.map(|tb| self.mul(v, tb));
                            let num = match (ta, cb) {
                                (Some(ta), Some(cb)) => self.sub(ta, cb),
                                (Some(ta), None) => ta,
                                (None, Some(cb)) => self.neg(cb),
                                (None, None) => unreachable!(),
                            };
                            Some(self.div(num, b))
                        }
                    };
                    (v, t)
                }
                NodeKind::Apply(f) => {
                    let a = map[c[0]];
                    let v = self.apply(f, a);
                    let t = tan[c[0]].map(|ta| self.apply_tangent(f, a, v, ta));
                    (v, t)
                }
                NodeKind::Branch { cmp, threshold } => {
                    let v = self.branch(map[c[0]], cmp, threshold, map[c[1]], map[c[2]]);
                    let t = match (tan[c[1]], tan[c[2]]) {
                        (None, None) => None,
                        (tt, te) => {
                            let tt = tt.unwrap_or_else(|| self.constant(0.0));
                            let te = te.unwrap_or_else(|| self.constant(0.0));
                            Some(self.branch(map[c[0]], cmp, threshold, tt, te))
                        }
                    };
                    (v, t)
                }
            };
            map.push(v);
            tan.push(t.filter(|&id| !self.is_const(id, 0.0)));
        }
        let outs = tape.outputs().iter().map(|&o| map[o]).collect();
        let touts = tape.outputs().iter().map(|&o| tan[o]).collect();
        (outs, touts)
    }

    fn apply_tangent(&mut self, f: ElementaryFn, a: NodeId, y: NodeId, ta: NodeId) -> NodeId {
        match f {
            ElementaryFn::Exp => self.mul(y, ta),
            ElementaryFn::Log => self.div(ta, a),
            ElementaryFn::Sin => {
                let c = self.apply(ElementaryFn::Cos, a);
                self.mul(c, ta)
            }
            ElementaryFn::Cos => {
                let s = self.apply(ElementaryFn::Sin, a);
                let m = self.mul(s, ta);
                self.neg(m)
            }
            ElementaryFn::Tan => {
                let one = self.constant(1.0);
                let yy = self.mul(y, y);
                let d = self.add(one, yy);
                self.mul(d, ta)
            }
            ElementaryFn::Atan => {
                let one = self.constant(1.0);
                let aa = self.mul(a, a);
                let d = self.add(one, aa);
                self.div(ta, d)
            }
            ElementaryFn::Sqrt => {
                let two_y = self.scale(2.0, y);
                self.div(ta, two_y)
            }
            ElementaryFn::Pow(p) => {
                if p == 0.0 {
                    return self.constant(0.0);
                }
                let pm = if p == 2.0 { a } else { self.apply(ElementaryFn::Pow(p - 1.0), a) };
                let d = self.scale(p, pm);
                self.mul(d, ta)
            }
            ElementaryFn::Abs => {
                let nt = self.neg(ta);
                self.branch(a, Cmp::Ge, 0.0, ta, nt)
            }
        }
    }

    /// Freeze into a tape keeping only nodes reachable from `outputs`.
    pub fn finish(&self, outputs: Vec<NodeId>) -> Tape {
        let n = self.nodes.len();
        let mut live = vec![false; n];
        for &o in &outputs {
            live[o] = true;
        }
        for id in (0..n).rev() {
            if live[id] {
                for &c in &self.nodes[id].children {
                    live[c] = true;
                }
            }
        }
        let mut renum = vec![usize::MAX; n];
        let mut nodes = Vec::new();
        for id in 0..n {
            if live[id] {
                renum[id] = nodes.len();
                let node = &self.nodes[id];
                nodes.push(Node {
                    kind: node.kind,
                    children: node.children.iter().map(|&c| renum[c]).collect(),
                });
            }
        }
        let outputs = outputs.iter().map(|&o| renum[o]).collect();
        Tape::new(nodes, self.num_inputs, outputs).expect("builder keeps tape invariants")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_and_shares() {
        let mut b = TapeBuilder::new(1);
        let x = b.input(0);
        let z = b.constant(0.0);
        let one = b.constant(1.0);
        assert_eq!(b.add(x, z), x);
        assert_eq!(b.mul(one, x), x);
        let zero = b.mul(x, z);
        assert_eq!(b.const_value(zero), Some(0.0));
        let s1 = b.apply(ElementaryFn::Sin, x);
        let s2 = b.apply(ElementaryFn::Sin, x);
        assert_eq!(s1, s2);
        let p = b.add(s1, x);
        let q = b.add(x, s1);
        assert_eq!(p, q);
        assert_eq!(b.input(0), x);
    }

    #[test]
    fn finish_prunes_dead_nodes() {
        let mut b = TapeBuilder::new(2);
        let x = b.input(0);
        let y = b.input(1);
        let _dead = b.apply(ElementaryFn::Exp, y);
        let s = b.apply(ElementaryFn::Sin, x);
        let t = b.finish(vec![s]);
        assert_eq!(t.len(), 2);
        assert_eq!(t.num_inputs(), 2);
    }

    #[test]
    fn push_forward_product() {
        let mut src = TapeBuilder::new(2);
        let x = src.input(0);
        let y = src.input(1);
        let m = src.mul(x, y);
        let e = src.apply(ElementaryFn::Exp, m);
        let tape = src.finish(vec![e]);

        // inputs: x, y, dx, dy
        let mut b = TapeBuilder::new(4);
        let ins: Vec<_> = (0..4).map(|j| b.input(j)).collect();
        let (o, t) = b.push_forward(&tape, &ins[..2], &[Some(ins[2]), Some(ins[3])]);
        let out = b.finish(vec![o[0], t[0].unwrap()]);
        let v = out.eval(&[0.5, 2.0, 1.0, 0.0]).unwrap();
        assert!((v[0] - 1f64.exp()).abs() < 1e-15);
        assert!((v[1] - 2.0 * 1f64.exp()).abs() < 1e-14);
    }
}
