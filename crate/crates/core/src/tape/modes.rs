use super::{NodeId, NodeKind, Scalar, Slot, Tape, TapeError};
use crate::dual::{Dual, DualVec};
use crate::jet::{Jet, JetError};

/// Which accumulation an operation count refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpMode {
    Forward,
    Reverse,
}

pub fn tape_eval(t: &Tape, x: &[f64]) -> Result<Vec<f64>, TapeError> {
    t.eval(x)
}

/// Full Jacobian (outputs x inputs) by vector-tangent forward accumulation.
pub fn forward_gradient(t: &Tape, x: &[f64]) -> Result<Vec<Vec<f64>>, TapeError> {
    t.check_inputs(x.len())?;
    let n = x.len();
    let seeds: Vec<DualVec> = x.iter().enumerate().map(|(i, &v)| DualVec::var(v, i, n)).collect();
    let proto = DualVec::constant(0.0, n);
    Ok(t.eval_generic(&seeds, &proto)?.into_iter().map(|d| d.d).collect())
}

fn slot<S: Scalar>(vals: &[Slot<S>], id: NodeId) -> Result<&S, TapeError> {
    vals[id].as_ref().map_err(|(node, e)| S::tape_error(*node, e.clone()))
}

/// Adjoints of every node reachable from `root`, seeded with `seed`.
pub(crate) fn adjoint_sweep<S: Scalar>(
    t: &Tape,
    vals: &[Slot<S>],
    root: NodeId,
    seed: S,
) -> Result<Vec<Option<S>>, TapeError> {
    slot(vals, root)?;
    let mut adj: Vec<Option<S>> = vec![None; t.len()];
    adj[root] = Some(seed);
    let err = |id: NodeId| move |e: S::Error| S::tape_error(id, e);
    fn acc<S: Scalar>(adj: &mut [Option<S>], id: NodeId, v: S, node: NodeId) -> Result<(), TapeError> {
        adj[id] = Some(match adj[id].take() {
            Some(a) => a.add(&v).map_err(|e| S::tape_error(node, e))?,
            None => v,
        });
        Ok(())
    }
    for id in (0..=root).rev() {
        let Some(a) = adj[id].clone() else { continue };
        let node = &t.nodes()[id];
        let c = &node.children;
        match node.kind {
            NodeKind::Input(_) | NodeKind::Const(_) => {}
            NodeKind::Add => {
                acc(&mut adj, c[0], a.clone(), id)?;
                acc(&mut adj, c[1], a, id)?;
            }
            NodeKind::Sub => {
                let neg = a.mul(&a.constant_like(-1.0)).map_err(err(id))?;
                acc(&mut adj, c[0], a, id)?;
                acc(&mut adj, c[1], neg, id)?;
            }
            NodeKind::Mul => {
                let (x, y) = (slot(vals, c[0])?, slot(vals, c[1])?);
                let da = a.mul(y).map_err(err(id))?;
                let db = a.mul(x).map_err(err(id))?;
                acc(&mut adj, c[0], da, id)?;
                acc(&mut adj, c[1], db, id)?;
            }
            NodeKind::Div => {
                let (y, q) = (slot(vals, c[1])?, slot(vals, id)?);
                let w = a.div(y).map_err(err(id))?;
                let db = w.mul(q).and_then(|m| m.mul(&m.constant_like(-1.0))).map_err(err(id))?;
                acc(&mut adj, c[0], w, id)?;
                acc(&mut adj, c[1], db, id)?;
            }
            NodeKind::Apply(f) => {
                let (x, y) = (slot(vals, c[0])?, slot(vals, id)?);
                let d = S::local_derivative(f, x, y).map_err(err(id))?;
                let da = a.mul(&d).map_err(err(id))?;
                acc(&mut adj, c[0], da, id)?;
            }
            NodeKind::Branch { cmp, threshold } => {
                let cond = slot(vals, c[0])?.value();
                let arm = if cmp.test(cond, threshold) { c[1] } else { c[2] };
                acc(&mut adj, arm, a, id)?;
            }
        }
    }
    Ok(adj)
}

fn output_node(t: &Tape, out: usize) -> Result<NodeId, TapeError> {
    t.outputs().get(out).copied().ok_or(TapeError::UnknownOutput(out))
}

/// Gradient of output `out` by one forward value sweep and one adjoint sweep.
pub fn reverse_gradient(t: &Tape, x: &[f64], out: usize) -> Result<Vec<f64>, TapeError> {
    t.check_inputs(x.len())?;
    let root = output_node(t, out)?;
    let vals = t.sweep(x, &0.0);
    let adj = adjoint_sweep(t, &vals, root, 1.0)?;
    Ok(t.input_nodes().iter().map(|n| n.and_then(|id| adj[id]).unwrap_or(0.0)).collect())
}

/// Hessian of output `out`: dual numbers pushed through the adjoint sweep,
/// one input direction at a time, then symmetrized.
pub fn hessian(t: &Tape, x: &[f64], out: usize) -> Result<Vec<Vec<f64>>, TapeError> {
    t.check_inputs(x.len())?;
    let root = output_node(t, out)?;
    let n = x.len();
    let inputs = t.input_nodes();
    let mut h = vec![vec![0.0; n]; n];
    for j in 0..n {
        let seeds: Vec<Dual> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| Dual::new(v, if i == j { 1.0 } else { 0.0 }))
            .collect();
        let vals = t.sweep(&seeds, &Dual::constant(0.0));
        let adj = adjoint_sweep(t, &vals, root, Dual::constant(1.0))?;
        for (i, id) in inputs.iter().enumerate() {
            h[i][j] = id.and_then(|id| adj[id]).map_or(0.0, |d| d.d);
        }
    }
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (h[i][j] + h[j][i]);
            h[i][j] = s;
            h[j][i] = s;
        }
    }
    Ok(h)
}

/// Propagate jets through the tape. All input jets must share one order.
pub fn tape_jet_eval(t: &Tape, x: &[Jet]) -> Result<Vec<Jet>, TapeError> {
    t.check_inputs(x.len())?;
    let order = x.first().map_or(0, |j| j.order());
    if let Some((i, j)) = x.iter().enumerate().find(|(_, j)| j.order() != order) {
        let node = t.input_nodes()[i].unwrap_or(0);
        return Err(TapeError::Jet { node, source: JetError::OrderMismatch(order, j.order()) });
    }
    let proto = Jet::constant(0.0, order).map_err(|source| TapeError::Jet { node: 0, source })?;
    t.eval_generic(x, &proto)
}

/// Arithmetic operations performed by one directional derivative (forward)
/// or one adjoint sweep (reverse), by a fixed per-node cost table.
///
/// Forward: value plus tangent, `+ -` cost 2, `*` and `/` cost 4 (the
/// quotient tangent reuses the quotient), elementary functions 3.
/// Reverse: adjoint updates only, `+ -` cost 2, `*` 4, `/` 5, functions 3.
pub fn op_count(t: &Tape, mode: OpMode) -> usize {
    t.nodes()
        .iter()
        .map(|n| match (mode, n.kind) {
            (_, NodeKind::Input(_) | NodeKind::Const(_) | NodeKind::Branch { .. }) => 0,
            (_, NodeKind::Add | NodeKind::Sub) => 2,
            (_, NodeKind::Mul) => 4,
            (OpMode::Forward, NodeKind::Div) => 4,
            (OpMode::Reverse, NodeKind::Div) => 5,
            (_, NodeKind::Apply(_)) => 3,
        })
        .sum()
}
