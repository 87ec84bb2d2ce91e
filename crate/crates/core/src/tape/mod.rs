//! Straight-line programs with conditional nodes.
//!
//! Every node only refers to earlier nodes, so a single pass in index order
//! evaluates the program. A [`NodeKind::Branch`] node has three children
//! `[condition, then, else]`; both arms are present on the tape and the
//! comparison of the condition value against a threshold selects one of them
//! at evaluation time.
//!
//! Evaluation is generic over [`Scalar`], which gives plain values, dual
//! numbers, vector duals and jets from the same sweep. Failures inside the
//! arm that is not selected are discarded.

mod builder;
mod modes;
mod patch;
mod scalar;

use std::fmt;

use crate::elementary::{ElementaryFn, Fault};
use crate::jet::JetError;

pub use builder::TapeBuilder;
pub use modes::{
    forward_gradient, hessian, op_count, reverse_gradient, tape_eval, tape_jet_eval, OpMode,
};
pub use patch::{boundary_audit, taylor_patch, BoundaryFinding, DEFAULT_PATCH_WINDOW};
pub use scalar::Scalar;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TapeError {
    #[error("evaluation failed at node {node}: {fault}")]
    EvalDomainError { node: NodeId, fault: Fault },
    #[error("node {node} is not differentiable at the evaluation point")]
    NonDifferentiablePoint { node: NodeId },
    #[error("jet evaluation failed at node {node}: {source}")]
    Jet { node: NodeId, source: JetError },
    #[error("expected {expected} inputs, got {got}")]
    InputLength { expected: usize, got: usize },
    #[error("no output with index {0}")]
    UnknownOutput(usize),
    #[error("malformed tape: {0}")]
    Malformed(String),
    #[error("taylor patch not applicable: {0}")]
    PatchUnsupported(String),
}

impl TapeError {
    pub(crate) fn from_fault(node: NodeId, fault: Fault) -> TapeError {
        match fault {
            Fault::NonDifferentiable => TapeError::NonDifferentiablePoint { node },
            f => TapeError::EvalDomainError { node, fault: f },
        }
    }
}

/// Comparison used by branch nodes: `condition <cmp> threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cmp {
    Ge,
    Gt,
    Le,
    Lt,
    Eq,
    Ne,
}

impl Cmp {
    pub fn test(self, x: f64, threshold: f64) -> bool {
        match self {
            Cmp::Ge => x >= threshold,
            Cmp::Gt => x > threshold,
            Cmp::Le => x <= threshold,
            Cmp::Lt => x < threshold,
            Cmp::Eq => x == threshold,
            Cmp::Ne => x != threshold,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Cmp::Ge => "ge",
            Cmp::Gt => "gt",
            Cmp::Le => "le",
            Cmp::Lt => "lt",
            Cmp::Eq => "eq",
            Cmp::Ne => "ne",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeKind {
    Input(usize),
    Const(f64),
    Add,
    Sub,
    Mul,
    Div,
    Apply(ElementaryFn),
    Branch { cmp: Cmp, threshold: f64 },
}

impl NodeKind {
    pub fn arity(&self) -> usize {
        match self {
            NodeKind::Input(_) | NodeKind::Const(_) => 0,
            NodeKind::Apply(_) => 1,
            NodeKind::Add | NodeKind::Sub | NodeKind::Mul | NodeKind::Div => 2,
            NodeKind::Branch { .. } => 3,
        }
    }

    /// Whether this node performs an arithmetic operation (counts toward `s`).
    pub fn is_operation(&self) -> bool {
        !matches!(self, NodeKind::Input(_) | NodeKind::Const(_) | NodeKind::Branch { .. })
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKind::Input(j) => write!(f, "input({j})"),
            NodeKind::Const(c) => write!(f, "const({c:?})"),
            NodeKind::Add => f.write_str("add"),
            NodeKind::Sub => f.write_str("sub"),
            NodeKind::Mul => f.write_str("mul"),
            NodeKind::Div => f.write_str("div"),
            NodeKind::Apply(func) => write!(f, "apply({func})"),
            NodeKind::Branch { cmp, threshold } => write!(f, "branch({} {threshold:?})", cmp.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub children: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    nodes: Vec<Node>,
    num_inputs: usize,
    outputs: Vec<NodeId>,
}

type Slot<S> = Result<S, (NodeId, <S as Scalar>::Error)>;

impl Tape {
    /// Build a tape from raw nodes, checking ordering and input invariants.
    pub fn new(nodes: Vec<Node>, num_inputs: usize, outputs: Vec<NodeId>) -> Result<Tape, TapeError> {
        let mut seen = vec![false; num_inputs];
        for (id, node) in nodes.iter().enumerate() {
            if node.children.len() != node.kind.arity() {
                return Err(TapeError::Malformed(format!(
                    "node {id} ({}) has {} children",
                    node.kind,
                    node.children.len()
                )));
            }
            if let Some(&c) = node.children.iter().find(|&&c| c >= id) {
                return Err(TapeError::Malformed(format!("node {id} refers to later node {c}")));
            }
            if let NodeKind::Input(j) = node.kind {
                if j >= num_inputs {
                    return Err(TapeError::Malformed(format!("node {id} reads input {j}")));
                }
                if std::mem::replace(&mut seen[j], true) {
                    return Err(TapeError::Malformed(format!("input {j} appears twice")));
                }
            }
        }
        if let Some(&o) = outputs.iter().find(|&&o| o >= nodes.len()) {
            return Err(TapeError::Malformed(format!("output refers to missing node {o}")));
        }
        Ok(Tape { nodes, num_inputs, outputs })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of arithmetic operation nodes.
    pub fn operation_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind.is_operation()).count()
    }

    /// Same program with a different output list.
    pub fn with_outputs(&self, outputs: Vec<NodeId>) -> Result<Tape, TapeError> {
        Tape::new(self.nodes.clone(), self.num_inputs, outputs)
    }

    /// Input index -> node id, for inputs actually read by the program.
    pub fn input_nodes(&self) -> Vec<Option<NodeId>> {
        let mut map = vec![None; self.num_inputs];
        for (id, n) in self.nodes.iter().enumerate() {
            if let NodeKind::Input(j) = n.kind {
                map[j] = Some(id);
            }
        }
        map
    }

    /// Whether output `k` structurally depends on input `j`.
    pub fn depends_on(&self, output: usize, input: usize) -> bool {
        let Some(&root) = self.outputs.get(output) else {
            return false;
        };
        let mut live = vec![false; root + 1];
        live[root] = true;
        for id in (0..=root).rev() {
            if !live[id] {
                continue;
            }
            if self.nodes[id].kind == NodeKind::Input(input) {
                return true;
            }
            for &c in &self.nodes[id].children {
                live[c] = true;
            }
        }
        false
    }

    /// One line per node: `id kind children`, then an `outputs` line.
    pub fn dump(&self) -> String {
        let mut s = format!("inputs {}\n", self.num_inputs);
        for (id, n) in self.nodes.iter().enumerate() {
            s.push_str(&format!("{id} {}", n.kind));
            for c in &n.children {
                s.push_str(&format!(" {c}"));
            }
            s.push('\n');
        }
        s.push_str("outputs");
        for o in &self.outputs {
            s.push_str(&format!(" {o}"));
        }
        s.push('\n');
        s
    }

    fn check_inputs(&self, got: usize) -> Result<(), TapeError> {
        if got != self.num_inputs {
            Err(TapeError::InputLength { expected: self.num_inputs, got })
        } else {
            Ok(())
        }
    }

    /// Evaluate every node. Failed nodes carry the id of the node where the
    /// failure originated; consumers of a failed node fail too, except a
    /// branch whose failed child is the arm that is not taken.
    pub(crate) fn sweep<S: Scalar>(&self, inputs: &[S], proto: &S) -> Vec<Slot<S>> {
        let mut vals: Vec<Slot<S>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let c = &node.children;
            let v: Slot<S> = match node.kind {
                NodeKind::Input(j) => Ok(inputs[j].clone()),
                NodeKind::Const(x) => Ok(proto.constant_like(x)),
                NodeKind::Branch { cmp, threshold } => match &vals[c[0]] {
                    Err(e) => Err(e.clone()),
                    Ok(cond) => {
                        let arm = if cmp.test(cond.value(), threshold) { c[1] } else { c[2] };
                        vals[arm].clone()
                    }
                },
                kind => {
                    let a = match &vals[c[0]] {
                        Ok(a) => a,
                        Err(e) => {
                            vals.push(Err(e.clone()));
                            continue;
                        }
                    };
                    let r = match kind {
                        NodeKind::Apply(f) => a.apply(f),
                        _ => match &vals[c[1]] {
                            Err(e) => {
                                vals.push(Err(e.clone()));
                                continue;
                            }
                            Ok(b) => match kind {
                                NodeKind::Add => a.add(b),
                                NodeKind::Sub => a.sub(b),
                                NodeKind::Mul => a.mul(b),
                                NodeKind::Div => a.div(b),
                                _ => unreachable!(),
                            },
                        },
                    };
                    r.map_err(|e| (id, e))
                }
            };
            vals.push(v);
        }
        vals
    }

    /// Evaluate the outputs with any scalar type.
    pub fn eval_generic<S: Scalar>(&self, inputs: &[S], proto: &S) -> Result<Vec<S>, TapeError> {
        self.check_inputs(inputs.len())?;
        let vals = self.sweep(inputs, proto);
        self.outputs
            .iter()
            .map(|&o| vals[o].clone().map_err(|(node, e)| S::tape_error(node, e)))
            .collect()
    }

    /// Plain evaluation.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, TapeError> {
        self.eval_generic(x, &0.0)
    }
}

impl fmt::Display for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// F(x, y) = y * ((x + y) * x + 2)
    pub(crate) fn sample_f() -> Tape {
        let mut b = TapeBuilder::new(2);
        let x = b.input(0);
        let y = b.input(1);
        let a = b.add(x, y);
        let m = b.mul(a, x);
        let two = b.constant(2.0);
        let c = b.add(m, two);
        let out = b.mul(y, c);
        b.finish(vec![out])
    }

    #[test]
    fn evaluates_sample() {
        assert_eq!(sample_f().eval(&[1.0, 2.0]).unwrap(), vec![10.0]);
    }

    #[test]
    fn identity() {
        let mut b = TapeBuilder::new(1);
        let x = b.input(0);
        assert_eq!(b.finish(vec![x]).eval(&[7.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn removable_singularity_branch() {
        let mut b = TapeBuilder::new(1);
        let x = b.input(0);
        let one = b.constant(1.0);
        let cx = b.apply(ElementaryFn::Cos, x);
        let num = b.sub(one, cx);
        let q = b.div(num, x);
        let zero = b.constant(0.0);
        let out = b.branch(x, Cmp::Ne, 0.0, q, zero);
        let t = b.finish(vec![out]);
        assert_eq!(t.eval(&[0.0]).unwrap(), vec![0.0]);
        let v = t.eval(&[0.5]).unwrap()[0];
        assert!((v - (1.0 - 0.5f64.cos()) / 0.5).abs() < 1e-15);
    }

    #[test]
    fn domain_error_names_node() {
        let mut b = TapeBuilder::new(1);
        let x = b.input(0);
        let l = b.apply(ElementaryFn::Log, x);
        let t = b.finish(vec![l]);
        assert_eq!(
            t.eval(&[-1.0]),
            Err(TapeError::EvalDomainError { node: 1, fault: Fault::Domain })
        );
        assert_eq!(t.eval(&[1.0, 2.0]), Err(TapeError::InputLength { expected: 1, got: 2 }));
    }

    #[test]
    fn rejects_forward_reference_and_duplicate_input() {
        let bad = vec![
            Node { kind: NodeKind::Add, children: vec![1, 1] },
            Node { kind: NodeKind::Input(0), children: vec![] },
        ];
        assert!(Tape::new(bad, 1, vec![0]).is_err());
        let dup = vec![
            Node { kind: NodeKind::Input(0), children: vec![] },
            Node { kind: NodeKind::Input(0), children: vec![] },
        ];
        assert!(Tape::new(dup, 1, vec![0]).is_err());
    }

    #[test]
    fn dump_format() {
        let d = sample_f().dump();
        let want = "inputs 2\n0 input(0)\n1 input(1)\n2 add 0 1\n3 mul 0 2\n4 const(2.0)\n5 add 3 4\n6 mul 1 5\noutputs 6\n";
        assert_eq!(d, want);
    }
}
