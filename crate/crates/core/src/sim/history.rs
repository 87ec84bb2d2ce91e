//! Past states for delayed reads, interpolated with cubic Hermite splines.

use super::DelayKind;

#[derive(Debug, Clone, Default)]
pub(crate) struct History {
    times: Vec<f64>,
    xs: Vec<Vec<f64>>,
    fs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Lookup {
    Before,
    After,
    Value(f64),
}

impl History {
    pub fn push(&mut self, t: f64, x: &[f64], f: &[f64]) {
        self.times.push(t);
        self.xs.push(x.to_vec());
        self.fs.push(f.to_vec());
    }

    /// Value or rate of state `j` at `s`. A stored jump (two nodes at the
    /// same time) is read from its right side.
    pub fn get(&self, j: usize, s: f64, kind: DelayKind) -> Lookup {
        let (Some(&first), Some(&last)) = (self.times.first(), self.times.last()) else {
            return Lookup::Before;
        };
        if s < first {
            return Lookup::Before;
        }
        let slack = 1e-9 * last.abs().max(1.0);
        if s > last + slack {
            return Lookup::After;
        }
        let i = self.times.partition_point(|&t| t <= s).max(1) - 1;
        if i + 1 >= self.times.len() {
            return Lookup::Value(match kind {
                DelayKind::Value => self.xs[i][j],
                DelayKind::Rate => self.fs[i][j],
            });
        }
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let u = (s - t0) / h;
        let (x0, x1) = (self.xs[i][j], self.xs[i + 1][j]);
        let (f0, f1) = (self.fs[i][j], self.fs[i + 1][j]);
        let (u2, u3) = (u * u, u * u * u);
        Lookup::Value(match kind {
            DelayKind::Value => {
                (2.0 * u3 - 3.0 * u2 + 1.0) * x0
                    + (u3 - 2.0 * u2 + u) * h * f0
                    + (-2.0 * u3 + 3.0 * u2) * x1
                    + (u3 - u2) * h * f1
            }
            DelayKind::Rate => {
                (6.0 * u2 - 6.0 * u) * (x0 - x1) / h
                    + (3.0 * u2 - 4.0 * u + 1.0) * f0
                    + (3.0 * u2 - 2.0 * u) * f1
            }
        })
    }
}
