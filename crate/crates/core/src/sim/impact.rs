//! Energy-based velocity jumps across a switching surface.
//!
//! Kinetic energy is `vᵀ A v`. Writing `v = w + α n` with `n = A⁻¹∇f` splits
//! the velocity into a part tangent to the surface and an A-orthogonal normal
//! part of energy `a_nn α²`, `a_nn = ∇fᵀ A⁻¹ ∇f`. The surface itself moves
//! with normal coordinate `α_w = -f_t / a_nn`. Only `α` changes at impact.

use crate::dual::DualVec;
use crate::elementary::{ElementaryFn, Fault};
use crate::tape::{Scalar, Tape, TapeBuilder};

use super::SimError;

/// Switching surface `f(q, t) = 0` with a metric and one potential per side.
/// All tapes read `[q, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactSurface {
    dim: usize,
    metric: Tape,
    potential_pos: Tape,
    potential_neg: Tape,
    switching: Tape,
    grad: Tape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImpactBranch {
    Crossing,
    Rebound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpactOutcome {
    pub velocity: Vec<f64>,
    pub branch: ImpactBranch,
}

/// Local quantities of the surface at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceFrame {
    pub metric: Vec<Vec<f64>>,
    pub grad: Vec<f64>,
    pub f_t: f64,
    /// `A⁻¹∇f`
    pub normal: Vec<f64>,
    pub a_nn: f64,
    /// Normal coordinate of the surface velocity.
    pub wall: f64,
    /// Potential where `f >= 0`.
    pub e_pos: f64,
    /// Potential where `f < 0`.
    pub e_neg: f64,
}

impl SurfaceFrame {
    /// Normal coordinate `α` of `v`.
    pub fn alpha(&self, v: &[f64]) -> f64 {
        dot(&self.grad, v) / self.a_nn
    }

    /// `v - α n`
    pub fn tangential(&self, v: &[f64]) -> Vec<f64> {
        let a = self.alpha(v);
        v.iter().zip(&self.normal).map(|(vi, ni)| vi - a * ni).collect()
    }

    /// Kinetic energy measured in the frame moving with the surface.
    pub fn relative_energy(&self, v: &[f64]) -> f64 {
        let w: Vec<f64> = v.iter().zip(&self.normal).map(|(vi, ni)| vi - self.wall * ni).collect();
        quad(&self.metric, &w)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad(a: &[Vec<f64>], v: &[f64]) -> f64 {
    a.iter().zip(v).map(|(row, vi)| vi * dot(row, v)).sum()
}

fn singular(_: Fault) -> SimError {
    SimError::SingularMetric
}

/// Gaussian elimination with partial pivoting on the values.
fn solve<S: Scalar<Error = Fault>>(a: &[Vec<S>], rhs: &[S]) -> Result<Vec<S>, SimError> {
    let n = rhs.len();
    let scale = a.iter().flatten().map(|e| e.value().abs()).fold(0.0, f64::max);
    let mut m: Vec<Vec<S>> = a.iter().zip(rhs).map(|(r, b)| {
        let mut r = r.clone();
        r.push(b.clone());
        r
    }).collect();
    for col in 0..n {
        let p = (col..n)
            .max_by(|&i, &j| m[i][col].value().abs().total_cmp(&m[j][col].value().abs()))
            .unwrap_or(col);
        if !(m[p][col].value().abs() > 1e-13 * scale) {
            return Err(SimError::SingularMetric);
        }
        m.swap(col, p);
        for r in col + 1..n {
            let f = m[r][col].div(&m[col][col]).map_err(singular)?;
            for k in col..=n {
                let t = f.mul(&m[col][k]).map_err(singular)?;
                m[r][k] = m[r][k].sub(&t).map_err(singular)?;
            }
        }
    }
    let mut x: Vec<S> = vec![rhs[0].constant_like(0.0); n];
    for r in (0..n).rev() {
        let mut acc = m[r][n].clone();
        for k in r + 1..n {
            acc = acc.sub(&m[r][k].mul(&x[k]).map_err(singular)?).map_err(singular)?;
        }
        x[r] = acc.div(&m[r][r]).map_err(singular)?;
    }
    Ok(x)
}

fn sdot<S: Scalar<Error = Fault>>(a: &[S], b: &[S]) -> Result<S, SimError> {
    let mut acc = a[0].constant_like(0.0);
    for (x, y) in a.iter().zip(b) {
        acc = acc.add(&x.mul(y).map_err(singular)?).map_err(singular)?;
    }
    Ok(acc)
}

/// The jump itself, generic so that it can be differentiated.
fn jump<S: Scalar<Error = Fault>>(
    a: &[Vec<S>],
    grad: &[S],
    f_t: &S,
    e_pos: &S,
    e_neg: &S,
    v: &[S],
) -> Result<(Vec<S>, ImpactBranch), SimError> {
    let err = singular;
    let n = solve(a, grad)?;
    let ann = sdot(grad, &n)?;
    if !(ann.value() > 0.0) {
        return Err(SimError::SingularMetric);
    }
    let gv = sdot(grad, v)?;
    let rate = gv.add(f_t).map_err(err)?;
    let size = grad.iter().zip(v).map(|(g, x)| (g.value() * x.value()).abs()).sum::<f64>() + f_t.value().abs();
    if rate.value().abs() <= 1e-12 * size || rate.value() == 0.0 {
        return Err(SimError::NonTransversal { rate: rate.value() });
    }
    // relative normal coordinate; its sign tells the side we come from
    let rel = rate.div(&ann).map_err(err)?;
    let (before, after) = if rel.value() > 0.0 { (e_neg, e_pos) } else { (e_pos, e_neg) };
    let drop = before.sub(after).map_err(err)?;
    let disc = rel.mul(&rel).map_err(err)?.add(&drop.div(&ann).map_err(err)?).map_err(err)?;
    let (rel_new, branch) = if disc.value() >= 0.0 {
        let r = disc.apply(ElementaryFn::Sqrt).map_err(err)?;
        let r = if rel.value() > 0.0 { r } else { r.mul(&r.constant_like(-1.0)).map_err(err)? };
        (r, ImpactBranch::Crossing)
    } else {
        (rel.mul(&rel.constant_like(-1.0)).map_err(err)?, ImpactBranch::Rebound)
    };
    let da = rel_new.sub(&rel).map_err(err)?;
    let out = v
        .iter()
        .zip(&n)
        .map(|(vi, ni)| vi.add(&da.mul(ni).map_err(err)?).map_err(err))
        .collect::<Result<Vec<S>, SimError>>()?;
    Ok((out, branch))
}

impl ImpactSurface {
    /// `metric` yields the `dim x dim` matrix row by row.
    pub fn new(
        dim: usize,
        metric: Tape,
        potential_pos: Tape,
        potential_neg: Tape,
        switching: Tape,
    ) -> Result<ImpactSurface, SimError> {
        let w = dim + 1;
        let shape = |t: &Tape, outs: usize, what: &str| {
            if t.num_inputs() != w || t.outputs().len() != outs {
                Err(SimError::InvalidModel(format!("{what} must map {w} inputs to {outs} values")))
            } else {
                Ok(())
            }
        };
        if dim == 0 {
            return Err(SimError::InvalidModel("impact surface needs at least one coordinate".into()));
        }
        shape(&metric, dim * dim, "metric")?;
        shape(&potential_pos, 1, "potential")?;
        shape(&potential_neg, 1, "potential")?;
        shape(&switching, 1, "switching function")?;
        let mut b = TapeBuilder::new(w);
        let ins: Vec<_> = (0..w).map(|j| b.input(j)).collect();
        let mut grad = Vec::with_capacity(w);
        for j in 0..w {
            let mut seed = vec![None; w];
            seed[j] = Some(b.constant(1.0));
            let (_, tan) = b.push_forward(&switching, &ins, &seed);
            grad.push(tan[0].unwrap_or_else(|| b.constant(0.0)));
        }
        let grad = b.finish(grad);
        Ok(ImpactSurface { dim, metric, potential_pos, potential_neg, switching, grad })
    }

    /// Plane `normal·q - offset - speed·t = 0` with constant metric and potentials.
    pub fn plane(
        metric: &[Vec<f64>],
        e_pos: f64,
        e_neg: f64,
        normal: &[f64],
        offset: f64,
        speed: f64,
    ) -> Result<ImpactSurface, SimError> {
        let dim = normal.len();
        if metric.len() != dim || metric.iter().any(|r| r.len() != dim) {
            return Err(SimError::InvalidModel(format!("metric must be {dim}x{dim}")));
        }
        let mut b = TapeBuilder::new(dim + 1);
        let a: Vec<_> = metric.iter().flatten().map(|&v| b.constant(v)).collect();
        let metric = b.finish(a);
        let ep = b.constant(e_pos);
        let pos = b.finish(vec![ep]);
        let en = b.constant(e_neg);
        let neg = b.finish(vec![en]);
        let mut terms = Vec::new();
        for (i, &c) in normal.iter().enumerate() {
            let q = b.input(i);
            terms.push(b.scale(c, q));
        }
        let t = b.input(dim);
        let moving = b.scale(-speed, t);
        terms.push(moving);
        terms.push(b.constant(-offset));
        let f = b.sum(&terms);
        ImpactSurface::new(dim, metric, pos, neg, b.finish(vec![f]))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn switching(&self) -> &Tape {
        &self.switching
    }

    fn point(&self, q: &[f64], t: f64) -> Result<Vec<f64>, SimError> {
        if q.len() != self.dim {
            return Err(SimError::InvalidModel(format!("expected {} coordinates", self.dim)));
        }
        let mut p = q.to_vec();
        p.push(t);
        Ok(p)
    }

    pub fn frame(&self, q: &[f64], t: f64) -> Result<SurfaceFrame, SimError> {
        let p = self.point(q, t)?;
        let flat = self.metric.eval(&p)?;
        let metric: Vec<Vec<f64>> = flat.chunks(self.dim).map(|r| r.to_vec()).collect();
        let g = self.grad.eval(&p)?;
        let (grad, f_t) = (g[..self.dim].to_vec(), g[self.dim]);
        let normal = solve(&metric, &grad)?;
        let a_nn = dot(&grad, &normal);
        if !(a_nn > 0.0) {
            return Err(SimError::SingularMetric);
        }
        Ok(SurfaceFrame {
            metric,
            grad,
            f_t,
            normal,
            a_nn,
            wall: -f_t / a_nn,
            e_pos: self.potential_pos.eval(&p)?[0],
            e_neg: self.potential_neg.eval(&p)?[0],
        })
    }

    /// Post-impact velocity and the Jacobian of it with respect to
    /// `(q, v, t)`, one row per velocity component.
    pub(crate) fn jacobian(
        &self,
        q: &[f64],
        v: &[f64],
        t: f64,
    ) -> Result<(ImpactOutcome, Vec<Vec<f64>>), SimError> {
        let nq = self.dim;
        let width = 2 * nq + 1;
        let mut p: Vec<DualVec> = q.iter().enumerate().map(|(i, &x)| DualVec::var(x, i, width)).collect();
        p.push(DualVec::var(t, 2 * nq, width));
        let vd: Vec<DualVec> = v.iter().enumerate().map(|(i, &x)| DualVec::var(x, nq + i, width)).collect();
        let proto = DualVec::constant(0.0, width);
        let flat = self.metric.eval_generic(&p, &proto)?;
        let a: Vec<Vec<DualVec>> = flat.chunks(nq).map(|r| r.to_vec()).collect();
        let g = self.grad.eval_generic(&p, &proto)?;
        let ep = self.potential_pos.eval_generic(&p, &proto)?;
        let en = self.potential_neg.eval_generic(&p, &proto)?;
        let (out, branch) = jump(&a, &g[..nq], &g[nq], &ep[0], &en[0], &vd)?;
        let velocity = out.iter().map(|d| d.v).collect();
        Ok((ImpactOutcome { velocity, branch }, out.into_iter().map(|d| d.d).collect()))
    }
}

/// Velocity right after crossing or bouncing off `s` at `(q, t)`.
pub fn impact_update(s: &ImpactSurface, q: &[f64], v_pre: &[f64], t: f64) -> Result<Vec<f64>, SimError> {
    Ok(impact_update_detailed(s, q, v_pre, t)?.velocity)
}

pub fn impact_update_detailed(
    s: &ImpactSurface,
    q: &[f64],
    v_pre: &[f64],
    t: f64,
) -> Result<ImpactOutcome, SimError> {
    if v_pre.len() != s.dim {
        return Err(SimError::InvalidModel(format!("expected {} velocities", s.dim)));
    }
    let fr = s.frame(q, t)?;
    let (velocity, branch) = jump(&fr.metric, &fr.grad, &fr.f_t, &fr.e_pos, &fr.e_neg, v_pre)?;
    Ok(ImpactOutcome { velocity, branch })
}
