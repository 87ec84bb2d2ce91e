//! Shared helpers: random tapes and an operation-counting scalar.
#![allow(dead_code)]

use std::cell::Cell;

use hybrid_ad::elementary::Fault;
use hybrid_ad::tape::{NodeId, Scalar};
use hybrid_ad::{ElementaryFn, Tape, TapeBuilder, TapeError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpSet {
    /// `+ - *`
    Ring,
    /// `+ - * /`
    Field,
    /// field operations plus smooth elementary functions
    Smooth,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random tape with `n` inputs and at most `max_nodes` nodes. Divisions
/// are by `1 + b^2` so every point is in the domain. Values are kept
/// moderate: tapes whose value leaves `[-bound, bound]` at `x` are redrawn.
pub fn random_tape(r: &mut ChaCha8Rng, n: usize, max_nodes: usize, ops: OpSet, x: &[f64], bound: f64) -> Tape {
    loop {
        let t = draw(r, n, max_nodes, ops);
        if let Ok(v) = t.eval(x) {
            if v.iter().all(|y| y.is_finite() && y.abs() <= bound) {
                return t;
            }
        }
    }
}

fn draw(r: &mut ChaCha8Rng, n: usize, max_nodes: usize, ops: OpSet) -> Tape {
    let mut b = TapeBuilder::new(n);
    let mut nodes: Vec<NodeId> = (0..n).map(|i| b.input(i)).collect();
    let target = r.gen_range(n + 1..=max_nodes.max(n + 1));
    let pick = |r: &mut ChaCha8Rng, nodes: &[NodeId]| {
        // favour recent nodes so tapes are deep
        let k = nodes.len();
        let lo = k.saturating_sub(12);
        if r.gen_bool(0.7) {
            nodes[r.gen_range(lo..k)]
        } else {
            nodes[r.gen_range(0..k)]
        }
    };
    while b.len() < target {
        let a = pick(r, &nodes);
        let c = pick(r, &nodes);
        let kinds = match ops {
            OpSet::Ring => 3,
            OpSet::Field => 4,
            OpSet::Smooth => 7,
        };
        let id = match r.gen_range(0..kinds) {
            0 => b.add(a, c),
            1 => b.sub(a, c),
            2 => b.mul(a, c),
            3 => {
                let cc = b.mul(c, c);
                let one = b.constant(1.0);
                let d = b.add(one, cc);
                b.div(a, d)
            }
            4 => b.apply(ElementaryFn::Sin, a),
            5 => b.apply(ElementaryFn::Atan, a),
            _ => b.apply(ElementaryFn::Cos, a),
        };
        nodes.push(id);
    }
    let out = *nodes.last().unwrap();
    b.finish(vec![out])
}

pub fn random_point(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

thread_local! {
    static FLOPS: Cell<usize> = const { Cell::new(0) };
}

fn flops(k: usize) {
    FLOPS.with(|c| c.set(c.get() + k));
}

/// Run `f` and return the floating-point operations counted meanwhile.
pub fn count<T>(f: impl FnOnce() -> T) -> (T, usize) {
    FLOPS.with(|c| c.set(0));
    let v = f();
    (v, FLOPS.with(|c| c.get()))
}

/// Plain value counting one flop per arithmetic operation.
#[derive(Debug, Clone, Copy)]
pub struct CountF(pub f64);

/// Value-tangent pair counting every flop of the forward recurrence.
#[derive(Debug, Clone, Copy)]
pub struct CountDual(pub f64, pub f64);

fn err(node: NodeId, fault: Fault) -> TapeError {
    TapeError::EvalDomainError { node, fault }
}

impl Scalar for CountF {
    type Error = Fault;
    fn constant_like(&self, c: f64) -> Self {
        CountF(c)
    }
    fn value(&self) -> f64 {
        self.0
    }
    fn add(&self, o: &Self) -> Result<Self, Fault> {
        flops(1);
        Ok(CountF(self.0 + o.0))
    }
    fn sub(&self, o: &Self) -> Result<Self, Fault> {
        flops(1);
        Ok(CountF(self.0 - o.0))
    }
    fn mul(&self, o: &Self) -> Result<Self, Fault> {
        flops(1);
        Ok(CountF(self.0 * o.0))
    }
    fn div(&self, o: &Self) -> Result<Self, Fault> {
        flops(1);
        Ok(CountF(self.0 / o.0))
    }
    fn apply(&self, f: ElementaryFn) -> Result<Self, Fault> {
        flops(1);
        Ok(CountF(f.eval(self.0)?))
    }
    fn fault(f: Fault) -> Fault {
        f
    }
    fn tape_error(node: NodeId, e: Fault) -> TapeError {
        err(node, e)
    }
}

impl Scalar for CountDual {
    type Error = Fault;
    fn constant_like(&self, c: f64) -> Self {
        CountDual(c, 0.0)
    }
    fn value(&self) -> f64 {
        self.0
    }
    fn add(&self, o: &Self) -> Result<Self, Fault> {
        flops(2);
        Ok(CountDual(self.0 + o.0, self.1 + o.1))
    }
    fn sub(&self, o: &Self) -> Result<Self, Fault> {
        flops(2);
        Ok(CountDual(self.0 - o.0, self.1 - o.1))
    }
    fn mul(&self, o: &Self) -> Result<Self, Fault> {
        flops(4);
        Ok(CountDual(self.0 * o.0, self.1 * o.0 + self.0 * o.1))
    }
    fn div(&self, o: &Self) -> Result<Self, Fault> {
        flops(4);
        let q = self.0 / o.0;
        Ok(CountDual(q, (self.1 - q * o.1) / o.0))
    }
    fn apply(&self, f: ElementaryFn) -> Result<Self, Fault> {
        flops(3);
        Ok(CountDual(f.eval(self.0)?, f.derivative(self.0)? * self.1))
    }
    fn fault(f: Fault) -> Fault {
        f
    }
    fn tape_error(node: NodeId, e: Fault) -> TapeError {
        err(node, e)
    }
}

/// Forward tangent of output 0 along input `i`, with its flop count.
pub fn counted_tangent(t: &Tape, x: &[f64], i: usize) -> (f64, usize) {
    let seeds: Vec<CountDual> = x.iter().enumerate().map(|(j, &v)| CountDual(v, if j == i { 1.0 } else { 0.0 })).collect();
    let (y, c) = count(|| t.eval_generic(&seeds, &CountDual(0.0, 0.0)).unwrap());
    (y[0].1, c)
}

/// Flops of a plain evaluation.
pub fn counted_value(t: &Tape, x: &[f64]) -> usize {
    let seeds: Vec<CountF> = x.iter().map(|&v| CountF(v)).collect();
    count(|| t.eval_generic(&seeds, &CountF(0.0)).unwrap()).1
}

/// Central difference of output 0 along input `i`.
pub fn central(t: &Tape, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + eps;
    let hi = t.eval(&p).unwrap()[0];
    p[i] = x[i] - eps;
    let lo = t.eval(&p).unwrap()[0];
    (hi - lo) / (2.0 * eps)
}

/// `|a - b| / max(|a|, |b|, 1)`
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}
