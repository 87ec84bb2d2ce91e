use super::{Cmp, NodeId, NodeKind, Tape, TapeBuilder, TapeError};
use crate::dual::DualVec;
use crate::jet::Jet;

/// Half-width of the polynomial window used by [`taylor_patch`] by default.
pub const DEFAULT_PATCH_WINDOW: f64 = 0.1;

/// What [`boundary_audit`] found for one branch node.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFinding {
    pub node: NodeId,
    pub condition: f64,
    pub threshold: f64,
    /// Value and gradient of each arm at the audited point, `None` when the
    /// arm cannot be evaluated there.
    pub then_arm: Option<(f64, Vec<f64>)>,
    pub else_arm: Option<(f64, Vec<f64>)>,
    pub value_jump: Option<f64>,
    pub gradient_gap: Option<f64>,
}

impl BoundaryFinding {
    /// Both arms evaluate and agree in value and first derivative to `tol`.
    pub fn is_consistent(&self, tol: f64) -> bool {
        matches!((self.value_jump, self.gradient_gap), (Some(v), Some(g)) if v <= tol && g <= tol)
    }
}

/// Evaluate both arms of every branch at `x` and compare them.
///
/// Branches are differentiated arm by arm, which is only trustworthy where
/// the arms meet smoothly. Calling this at a threshold shows whether the
/// derivative there can be believed.
pub fn boundary_audit(t: &Tape, x: &[f64]) -> Result<Vec<BoundaryFinding>, TapeError> {
    t.check_inputs(x.len())?;
    let n = x.len();
    let seeds: Vec<DualVec> = x.iter().enumerate().map(|(i, &v)| DualVec::var(v, i, n)).collect();
    let vals = t.sweep(&seeds, &DualVec::constant(0.0, n));
    let mut out = Vec::new();
    for (id, node) in t.nodes().iter().enumerate() {
        let NodeKind::Branch { threshold, .. } = node.kind else { continue };
        let c = &node.children;
        let Ok(cond) = &vals[c[0]] else { continue };
        let arm = |k: NodeId| vals[k].as_ref().ok().map(|d| (d.v, d.d.clone()));
        let then_arm = arm(c[1]);
        let else_arm = arm(c[2]);
        let (value_jump, gradient_gap) = match (&then_arm, &else_arm) {
            (Some((a, ga)), Some((b, gb))) => {
                let gap = ga.iter().zip(gb).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                (Some((a - b).abs()), Some(gap))
            }
            _ => (None, None),
        };
        out.push(BoundaryFinding {
            node: id,
            condition: cond.v,
            threshold,
            then_arm,
            else_arm,
            value_jump,
            gradient_gap,
        });
    }
    Ok(out)
}

fn depends_only_on(t: &Tape, root: NodeId, input: usize) -> bool {
    let mut live = vec![false; root + 1];
    live[root] = true;
    for id in (0..=root).rev() {
        if !live[id] {
            continue;
        }
        if let NodeKind::Input(j) = t.nodes()[id].kind {
            if j != input {
                return false;
            }
        }
        for &c in &t.nodes()[id].children {
            live[c] = true;
        }
    }
    true
}

fn leading_zeros(c: &[f64]) -> usize {
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    c.iter().take_while(|v| v.abs() <= 1e-15 * scale).count()
}

/// Replace a branch guarding a removable singularity by a Taylor polynomial.
///
/// The branch condition must be an input `x`; the arm that cannot be
/// evaluated at the threshold `x0` must be a quotient of functions of `x`
/// alone. Its series at `x0` is obtained from the jets of numerator and
/// denominator after cancelling their common leading zeros. The rewritten
/// program uses the polynomial of degree `order` for `|x - x0| <= window`
/// and the original quotient outside.
pub fn taylor_patch(t: &Tape, branch: NodeId, order: usize, window: f64) -> Result<Tape, TapeError> {
    let unsupported = |m: &str| TapeError::PatchUnsupported(m.to_string());
    let node = t.nodes().get(branch).ok_or_else(|| unsupported("no such node"))?;
    let NodeKind::Branch { threshold: x0, .. } = node.kind else {
        return Err(unsupported("node is not a branch"));
    };
    let (cond, then_id, else_id) = (node.children[0], node.children[1], node.children[2]);
    let NodeKind::Input(var) = t.nodes()[cond].kind else {
        return Err(unsupported("branch condition is not an input"));
    };
    if !(window > 0.0) {
        return Err(unsupported("window must be positive"));
    }

    let mut point = vec![0.0; t.num_inputs()];
    point[var] = x0;
    let vals = t.sweep(&point, &0.0);
    let singular = match (vals[then_id].is_err(), vals[else_id].is_err()) {
        (true, false) => then_id,
        (false, true) => else_id,
        _ => return Err(unsupported("exactly one arm must fail at the threshold")),
    };
    if t.nodes()[singular].kind != NodeKind::Div {
        return Err(unsupported("singular arm is not a quotient"));
    }
    if !depends_only_on(t, singular, var) {
        return Err(unsupported("singular arm depends on other inputs"));
    }

    // Jets of numerator and denominator, with headroom for the cancellation.
    let (num_id, den_id) = (t.nodes()[singular].children[0], t.nodes()[singular].children[1]);
    let high = (order + 8).min(crate::jet::MAX_ORDER);
    let jet_err = |source| TapeError::Jet { node: singular, source };
    let xj = Jet::var(x0, high).map_err(jet_err)?;
    let seeds: Vec<Jet> = (0..t.num_inputs())
        .map(|j| if j == var { xj.clone() } else { Jet::constant(0.0, high).expect("bounded order") })
        .collect();
    let jv = t.sweep(&seeds, &xj);
    let num = jv[num_id].clone().map_err(|(n, e)| TapeError::Jet { node: n, source: e })?;
    let den = jv[den_id].clone().map_err(|(n, e)| TapeError::Jet { node: n, source: e })?;
    let m = leading_zeros(den.coeffs());
    if m > high - order {
        return Err(unsupported("denominator vanishes to too high an order"));
    }
    if leading_zeros(num.coeffs()) < m {
        return Err(unsupported("pole at the threshold is not removable"));
    }
    let shifted = |j: &Jet| Jet::from_coeffs(j.coeffs()[m..m + order + 1].to_vec()).map_err(jet_err);
    let q = shifted(&num)?.div(&shifted(&den)?).map_err(jet_err)?;

    let mut b = TapeBuilder::new(t.num_inputs());
    let mut map: Vec<NodeId> = Vec::with_capacity(t.len());
    for (id, node) in t.nodes().iter().enumerate() {
        let c: Vec<NodeId> = node.children.iter().map(|&k| map[k]).collect();
        let v = match node.kind {
            NodeKind::Input(j) => b.input(j),
            NodeKind::Const(x) => b.constant(x),
            NodeKind::Add => b.add(c[0], c[1]),
            NodeKind::Sub => b.sub(c[0], c[1]),
            NodeKind::Mul => b.mul(c[0], c[1]),
            NodeKind::Div => b.div(c[0], c[1]),
            NodeKind::Apply(f) => b.apply(f, c[0]),
            NodeKind::Branch { cmp, threshold } if id != branch => b.branch(c[0], cmp, threshold, c[1], c[2]),
            NodeKind::Branch { .. } => {
                let x = c[0];
                let x0n = b.constant(x0);
                let d = b.sub(x, x0n);
                let mut poly = b.constant(q.coeffs()[order]);
                for k in (0..order).rev() {
                    let ck = b.constant(q.coeffs()[k]);
                    let pm = b.mul(poly, d);
                    poly = b.add(pm, ck);
                }
                let outer = map[singular];
                let inner = b.branch(d, Cmp::Lt, -window, outer, poly);
                b.branch(d, Cmp::Gt, window, outer, inner)
            }
        };
        map.push(v);
    }
    Ok(b.finish(t.outputs().iter().map(|&o| map[o]).collect()))
}
