//! Newton iteration on tape-backed algebraic systems, implicit
//! differentiation of their roots, and Newton on truncated series.

use nalgebra::DMatrix;

use crate::jet::{Jet, JetError};
use crate::tape::{reverse_gradient, tape_jet_eval, NodeId, Tape, TapeBuilder, TapeError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("singular Jacobian at x = {x:?}")]
    SingularJacobian { x: Vec<f64> },
    #[error("no convergence after {iterations} iterations (last relative step {step:e}, best iterate {best:?})")]
    MaxIterExceeded { iterations: usize, best: Vec<f64>, step: f64 },
    #[error("residual tape has {inputs} inputs and {outputs} outputs, expected {nx} + {ntheta} inputs and {nx} outputs")]
    Shape { inputs: usize, outputs: usize, nx: usize, ntheta: usize },
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("non-finite iterate {0:?}")]
    NonFinite(Vec<f64>),
    #[error("{0} needs a scalar system")]
    NotScalar(&'static str),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Jet(#[from] JetError),
}

/// `P(x, θ) = 0` with `P` square in `x`. The residual tape reads `[x, θ]`.
#[derive(Debug, Clone)]
pub struct ImplicitSystem {
    residual: Tape,
    nx: usize,
    ntheta: usize,
}

impl ImplicitSystem {
    pub fn new(residual: Tape, nx: usize) -> Result<ImplicitSystem, SolverError> {
        let (inputs, outputs) = (residual.num_inputs(), residual.outputs().len());
        if inputs < nx || outputs != nx || nx == 0 {
            return Err(SolverError::Shape { inputs, outputs, nx, ntheta: inputs.saturating_sub(nx) });
        }
        Ok(ImplicitSystem { residual, nx, ntheta: inputs - nx })
    }

    /// Record the residual with `f(builder, x, θ)`.
    pub fn build(
        nx: usize,
        ntheta: usize,
        f: impl FnOnce(&mut TapeBuilder, &[NodeId], &[NodeId]) -> Vec<NodeId>,
    ) -> Result<ImplicitSystem, SolverError> {
        let mut b = TapeBuilder::new(nx + ntheta);
        let x: Vec<NodeId> = (0..nx).map(|i| b.input(i)).collect();
        let th: Vec<NodeId> = (nx..nx + ntheta).map(|i| b.input(i)).collect();
        let out = f(&mut b, &x, &th);
        ImplicitSystem::new(b.finish(out), nx)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ntheta(&self) -> usize {
        self.ntheta
    }

    pub fn residual(&self) -> &Tape {
        &self.residual
    }

    fn point(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>, SolverError> {
        if x.len() != self.nx {
            return Err(SolverError::Length { expected: self.nx, got: x.len() });
        }
        if theta.len() != self.ntheta {
            return Err(SolverError::Length { expected: self.ntheta, got: theta.len() });
        }
        Ok([x, theta].concat())
    }

    pub fn eval(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>, SolverError> {
        Ok(self.residual.eval(&self.point(x, theta)?)?)
    }

    /// `(∂P/∂x, ∂P/∂θ)`, one adjoint sweep per residual.
    pub fn jacobians(&self, x: &[f64], theta: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>), SolverError> {
        let p = self.point(x, theta)?;
        let mut jx = DMatrix::zeros(self.nx, self.nx);
        let mut jt = DMatrix::zeros(self.nx, self.ntheta);
        for i in 0..self.nx {
            let g = reverse_gradient(&self.residual, &p, i)?;
            for j in 0..self.nx {
                jx[(i, j)] = g[j];
            }
            for j in 0..self.ntheta {
                jt[(i, j)] = g[self.nx + j];
            }
        }
        Ok((jx, jt))
    }
}

/// Root of a Newton solve.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonRoot {
    pub x: Vec<f64>,
    /// Steps actually applied.
    pub iterations: usize,
}

fn rel_step(dx: &[f64], x: &[f64]) -> f64 {
    dx.iter().zip(x).map(|(d, v)| d.abs() / v.abs().max(1e-300)).fold(0.0, f64::max)
}

/// Solve `J y = r`, refusing numerically singular `J`.
fn solve(j: &DMatrix<f64>, r: &DMatrix<f64>, x: &[f64]) -> Result<DMatrix<f64>, SolverError> {
    let lu = j.clone().lu();
    let u = lu.u();
    let scale = u.diagonal().iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let tiny = u.diagonal().iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
    if !(scale > 0.0) || tiny <= 1e-14 * scale {
        return Err(SolverError::SingularJacobian { x: x.to_vec() });
    }
    lu.solve(r).ok_or_else(|| SolverError::SingularJacobian { x: x.to_vec() })
}

/// Newton's method. Each candidate step is tested before it is taken: once
/// its relative size drops to `tol` the current iterate is returned.
pub fn newton(
    s: &ImplicitSystem,
    x0: &[f64],
    theta: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<NewtonRoot, SolverError> {
    if !(tol > 0.0) {
        return Err(SolverError::BadTolerance(tol));
    }
    let mut x = x0.to_vec();
    let mut last = f64::INFINITY;
    for k in 0..=max_iter {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite(x));
        }
        let r = s.eval(&x, theta)?;
        let (jx, _) = s.jacobians(&x, theta)?;
        let dx = solve(&jx, &DMatrix::from_column_slice(s.nx, 1, &r), &x)?;
        let dx: Vec<f64> = dx.iter().map(|v| -v).collect();
        last = rel_step(&dx, &x);
        if last <= tol {
            return Ok(NewtonRoot { x, iterations: k });
        }
        if k == max_iter {
            break;
        }
        for (v, d) in x.iter_mut().zip(&dx) {
            *v += d;
        }
    }
    Err(SolverError::MaxIterExceeded { iterations: max_iter, best: x, step: last })
}

/// `∂x/∂θ = -J_x⁻¹ ∂P/∂θ` at a root, as an `nx × nθ` matrix.
pub fn implicit_sensitivity(s: &ImplicitSystem, root: &[f64], theta: &[f64]) -> Result<DMatrix<f64>, SolverError> {
    let (jx, jt) = s.jacobians(root, theta)?;
    Ok(-solve(&jx, &jt, root)?)
}

/// Taylor coefficients of `x(θ + ε dir)` up to `order`, by repeated implicit
/// differentiation at `root`: coefficient `k` solves `J_x c_k = -[P]_k` where
/// `[P]_k` is the order-`k` residual coefficient with `c_k` still zero.
pub fn implicit_jet(
    s: &ImplicitSystem,
    root: &[f64],
    theta: &[f64],
    dir: &[f64],
    order: usize,
) -> Result<Vec<Jet>, SolverError> {
    if dir.len() != s.ntheta {
        return Err(SolverError::Length { expected: s.ntheta, got: dir.len() });
    }
    let (jx, _) = s.jacobians(root, theta)?;
    let mut coeffs: Vec<Vec<f64>> = root.iter().map(|&v| vec![v]).collect();
    let th: Vec<Jet> = theta
        .iter()
        .zip(dir)
        .map(|(&t, &d)| {
            let mut c = vec![0.0; order + 1];
            c[0] = t;
            if order > 0 {
                c[1] = d;
            }
            Jet::from_coeffs(c)
        })
        .collect::<Result<_, _>>()?;
    for k in 1..=order {
        let mut inputs: Vec<Jet> = coeffs
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.resize(order + 1, 0.0);
                Jet::from_coeffs(c)
            })
            .collect::<Result<_, _>>()?;
        inputs.extend(th.iter().cloned());
        let p = tape_jet_eval(&s.residual, &inputs)?;
        let r = DMatrix::from_iterator(s.nx, 1, p.iter().map(|j| j.coeffs()[k]));
        let ck = solve(&jx, &r, root)?;
        for (c, v) in coeffs.iter_mut().zip(ck.iter()) {
            c.push(-v);
        }
    }
    coeffs.into_iter().map(|c| Ok(Jet::from_coeffs(c)?)).collect()
}

/// `[P, ∂P/∂x]` for a scalar system, as one tape over `[x, θ]`.
fn newton_tape(s: &ImplicitSystem) -> Tape {
    let n = s.residual.num_inputs();
    let mut b = TapeBuilder::new(n);
    let ins: Vec<NodeId> = (0..n).map(|i| b.input(i)).collect();
    let mut tan = vec![None; n];
    tan[0] = Some(b.constant(1.0));
    let (outs, dt) = b.push_forward(&s.residual, &ins, &tan);
    let d = dt[0].unwrap_or_else(|| b.constant(0.0));
    b.finish(vec![outs[0], d])
}

/// Outcome of [`newton_jet`].
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonJet {
    pub root: Jet,
    /// Iterations until the constant term converged.
    pub converged_after: usize,
    /// Total iterations including the extra margin.
    pub iterations: usize,
}

fn jet_step(t: &Tape, x: &Jet, theta: &[Jet]) -> Result<(Jet, f64), SolverError> {
    let mut inputs = vec![x.clone()];
    inputs.extend(theta.iter().cloned());
    let pd = tape_jet_eval(t, &inputs)?;
    let step = pd[0].div(&pd[1])?.neg();
    let rel = step.value().abs() / x.value().abs().max(1e-300);
    Ok((step, rel))
}

fn check_scalar(s: &ImplicitSystem, theta: &[Jet]) -> Result<usize, SolverError> {
    if s.nx != 1 {
        return Err(SolverError::NotScalar("newton_jet"));
    }
    if theta.len() != s.ntheta {
        return Err(SolverError::Length { expected: s.ntheta, got: theta.len() });
    }
    Ok(theta.first().map_or(1, |j| j.order()))
}

/// Exactly `iterations` Newton steps in jet arithmetic from the constant `x0`.
pub fn newton_jet_fixed(s: &ImplicitSystem, theta: &[Jet], x0: f64, iterations: usize) -> Result<Jet, SolverError> {
    let order = check_scalar(s, theta)?;
    let t = newton_tape(s);
    let mut x = Jet::constant(x0, order)?;
    for _ in 0..iterations {
        let (step, _) = jet_step(&t, &x, theta)?;
        x = x.add(&step)?;
    }
    Ok(x)
}

/// Newton on series in `θ`: iterate until the constant term's relative
/// step is within `tol`, then `ceil(log2(order + 1))` more iterations.
pub fn newton_jet(
    s: &ImplicitSystem,
    theta: &[Jet],
    x0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<NewtonJet, SolverError> {
    if !(tol > 0.0) {
        return Err(SolverError::BadTolerance(tol));
    }
    let order = check_scalar(s, theta)?;
    let t = newton_tape(s);
    let mut x = Jet::constant(x0, order)?;
    let mut k = 0;
    loop {
        let (step, rel) = jet_step(&t, &x, theta)?;
        if rel <= tol {
            break;
        }
        if k == max_iter {
            return Err(SolverError::MaxIterExceeded { iterations: k, best: vec![x.value()], step: rel });
        }
        x = x.add(&step)?;
        k += 1;
    }
    let extra = extra_iterations(order);
    for _ in 0..extra {
        let (step, _) = jet_step(&t, &x, theta)?;
        x = x.add(&step)?;
    }
    Ok(NewtonJet { root: x, converged_after: k, iterations: k + extra })
}

/// `ceil(log2(order + 1))`.
pub fn extra_iterations(order: usize) -> usize {
    (usize::BITS - order.leading_zeros()) as usize
}

/// Warm-started solves across a parameter grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStartReport {
    pub grid: Vec<f64>,
    pub roots: Vec<f64>,
    /// Grid points whose root equals the previous one bit for bit.
    pub constant_points: usize,
    pub fraction_constant: f64,
}

/// Solve along `grid` for the scalar parameter, starting each solve from
/// the previous root, and count where the output does not move at all.
pub fn warm_start_probe(s: &ImplicitSystem, x0: f64, grid: &[f64], tol: f64) -> Result<WarmStartReport, SolverError> {
    if s.nx != 1 || s.ntheta != 1 {
        return Err(SolverError::NotScalar("warm_start_probe"));
    }
    let mut x = x0;
    let mut roots = Vec::with_capacity(grid.len());
    for &a in grid {
        x = newton(s, &[x], &[a], tol, 200)?.x[0];
        roots.push(x);
    }
    let constant_points = roots.windows(2).filter(|w| w[0] == w[1]).count();
    let fraction_constant = if roots.len() > 1 { constant_points as f64 / (roots.len() - 1) as f64 } else { 0.0 };
    Ok(WarmStartReport { grid: grid.to_vec(), roots, constant_points, fraction_constant })
}

/// `x^2 - a` over `[x, a]`.
pub fn sqrt_system() -> ImplicitSystem {
    ImplicitSystem::build(1, 1, |b, x, th| {
        let sq = b.mul(x[0], x[0]);
        vec![b.sub(sq, th[0])]
    })
    .expect("square system")
}
