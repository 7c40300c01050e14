use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;

/// Reverse-mode recording.
///
/// Each node stores its local partial derivatives with respect to its parents,
/// so the backward sweep is a single pass of multiply-adds over the edge list.
/// Values live in the [`Var`] handles, not on the tape.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

#[derive(Default)]
struct Inner {
    // offsets[i]..offsets[i + 1] are the edges of node i
    offsets: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    failure: Option<&'static str>,
}

impl Inner {
    #[inline]
    fn begin(&mut self) -> u32 {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        (self.offsets.len() - 1) as u32
    }

    #[inline]
    fn finish(&mut self, value: f64, op: &'static str) {
        self.offsets.push(self.parents.len() as u32);
        if !value.is_finite() && self.failure.is_none() {
            self.failure = Some(op);
        }
    }

    #[inline]
    fn edge(&mut self, parent: u32, partial: f64) {
        self.parents.push(parent);
        self.partials.push(partial);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(edges: usize) -> Self {
        let inner = Inner {
            offsets: Vec::with_capacity(edges / 2 + 1),
            parents: Vec::with_capacity(edges),
            partials: Vec::with_capacity(edges),
            failure: None,
        };
        Tape {
            inner: RefCell::new(inner),
        }
    }

    /// Registers an independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let index = inner.begin();
        inner.finish(value, "input");
        Var {
            tape: Some(self),
            index,
            value,
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First operation that produced a non-finite value, if any.
    pub fn failure(&self) -> Option<&'static str> {
        self.inner.borrow().failure
    }

    pub fn clear(&mut self) {
        let inner = self.inner.get_mut();
        inner.offsets.clear();
        inner.parents.clear();
        inner.partials.clear();
        inner.failure = None;
    }

    /// Adjoints of every node with respect to `output`.
    pub fn adjoints(&self, output: Var<'_>) -> Vec<f64> {
        let inner = self.inner.borrow();
        let n = inner.offsets.len().saturating_sub(1);
        let mut adj = vec![0.0; n];
        let Some(tape) = output.tape else {
            return adj;
        };
        debug_assert!(std::ptr::eq(tape, self), "output recorded on another tape");
        adj[output.index as usize] = 1.0;
        for i in (0..=output.index as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (lo, hi) = (inner.offsets[i] as usize, inner.offsets[i + 1] as usize);
            for e in lo..hi {
                adj[inner.parents[e] as usize] += a * inner.partials[e];
            }
        }
        adj
    }

    /// Gradient of `output` with respect to `wrt` (constants get zero).
    pub fn gradient(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Vec<f64> {
        let adj = self.adjoints(output);
        wrt.iter()
            .map(|v| match v.tape {
                Some(_) => adj[v.index as usize],
                None => 0.0,
            })
            .collect()
    }
}

/// Scalar recorded on a [`Tape`]; constants carry no tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    index: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var#{}({})", self.index, self.value),
            None => write!(f, "Const({})", self.value),
        }
    }
}

impl<'t> Var<'t> {
    pub fn is_constant(&self) -> bool {
        self.tape.is_none()
    }

    #[inline]
    fn unary(self, value: f64, partial: f64, op: &'static str) -> Self {
        match self.tape {
            None => Var::constant(value),
            Some(tape) => {
                let mut inner = tape.inner.borrow_mut();
                let index = inner.begin();
                inner.edge(self.index, partial);
                inner.finish(value, op);
                Var {
                    tape: Some(tape),
                    index,
                    value,
                }
            }
        }
    }

    #[inline]
    fn binary(self, other: Self, value: f64, da: f64, db: f64, op: &'static str) -> Self {
        match (self.tape, other.tape) {
            (None, None) => Var::constant(value),
            (Some(_), None) => self.unary(value, da, op),
            (None, Some(_)) => other.unary(value, db, op),
            (Some(tape), Some(_)) => {
                let mut inner = tape.inner.borrow_mut();
                let index = inner.begin();
                inner.edge(self.index, da);
                inner.edge(other.index, db);
                inner.finish(value, op);
                Var {
                    tape: Some(tape),
                    index,
                    value,
                }
            }
        }
    }
}

impl Add for Var<'_> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        self.binary(o, self.value + o.value, 1.0, 1.0, "add")
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.value - o.value, 1.0, -1.0, "sub")
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.value * o.value, o.value, self.value, "mul")
    }
}

impl Div for Var<'_> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let q = self.value / o.value;
        self.binary(o, q, 1.0 / o.value, -q / o.value, "div")
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.unary(-self.value, -1.0, "neg")
    }
}

impl Add<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn add(self, c: f64) -> Self {
        self.unary(self.value + c, 1.0, "add")
    }
}

impl Sub<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn sub(self, c: f64) -> Self {
        self.unary(self.value - c, 1.0, "sub")
    }
}

impl Mul<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn mul(self, c: f64) -> Self {
        self.unary(self.value * c, c, "mul")
    }
}

impl Div<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn div(self, c: f64) -> Self {
        self.unary(self.value / c, 1.0 / c, "div")
    }
}

impl<'t> Scalar for Var<'t> {
    type Base = Var<'t>;

    #[inline]
    fn constant(c: f64) -> Self {
        Var {
            tape: None,
            index: u32::MAX,
            value: c,
        }
    }

    #[inline]
    fn from_base(b: Self) -> Self {
        b
    }

    #[inline]
    fn value(&self) -> f64 {
        self.value
    }

    #[inline]
    fn mul_base(self, b: Self) -> Self {
        self * b
    }

    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t, "tanh")
    }

    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        let d = if s > 0.0 { 0.5 / s } else { 0.0 };
        self.unary(s, d, "sqrt")
    }

    fn abs(self) -> Self {
        let d = if self.value > 0.0 {
            1.0
        } else if self.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(self.value.abs(), d, "abs")
    }

    fn linear(weights: &[Self], bias: Option<&[Self]>, inputs: &[Self], out_dim: usize, out: &mut Vec<Self>) {
        let n = inputs.len();
        let tape = weights
            .iter()
            .chain(inputs)
            .chain(bias.into_iter().flatten())
            .find_map(|v| v.tape);
        let Some(tape) = tape else {
            for j in 0..out_dim {
                let mut acc = bias.map_or(0.0, |b| b[j].value);
                for (w, x) in weights[j * n..(j + 1) * n].iter().zip(inputs) {
                    acc += w.value * x.value;
                }
                out.push(Var::constant(acc));
            }
            return;
        };
        let mut inner = tape.inner.borrow_mut();
        for j in 0..out_dim {
            let index = inner.begin();
            let mut acc = 0.0;
            if let Some(b) = bias {
                acc = b[j].value;
                if b[j].tape.is_some() {
                    inner.edge(b[j].index, 1.0);
                }
            }
            for (w, x) in weights[j * n..(j + 1) * n].iter().zip(inputs) {
                acc += w.value * x.value;
                if w.tape.is_some() && x.value != 0.0 {
                    inner.edge(w.index, x.value);
                }
                if x.tape.is_some() && w.value != 0.0 {
                    inner.edge(x.index, w.value);
                }
            }
            inner.finish(acc, "linear");
            out.push(Var {
                tape: Some(tape),
                index,
                value: acc,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FD_STEP: f64 = 1e-5;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn check_unary(op: impl Fn(Var<'_>) -> Var<'_>, reference: impl Fn(f64) -> f64, domain: impl Fn(f64) -> f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x = domain(rng.random_range(-2.0..2.0));
            let tape = Tape::new();
            let v = tape.var(x);
            let y = op(v);
            assert_eq!(y.value(), reference(x));
            let g = tape.gradient(y, &[v])[0];
            let fd = (reference(x + FD_STEP) - reference(x - FD_STEP)) / (2.0 * FD_STEP);
            assert!(rel_err(g, fd) < 1e-6, "x={x} g={g} fd={fd}");
        }
    }

    fn check_binary(op: impl for<'a> Fn(Var<'a>, Var<'a>) -> Var<'a>, reference: impl Fn(f64, f64) -> f64, domain_b: impl Fn(f64) -> f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let a = rng.random_range(-2.0..2.0);
            let b = domain_b(rng.random_range(-2.0..2.0));
            let tape = Tape::new();
            let (va, vb) = (tape.var(a), tape.var(b));
            let g = tape.gradient(op(va, vb), &[va, vb]);
            let fa = (reference(a + FD_STEP, b) - reference(a - FD_STEP, b)) / (2.0 * FD_STEP);
            let fb = (reference(a, b + FD_STEP) - reference(a, b - FD_STEP)) / (2.0 * FD_STEP);
            assert!(rel_err(g[0], fa) < 1e-6, "a={a} b={b}");
            assert!(rel_err(g[1], fb) < 1e-6, "a={a} b={b}");
        }
    }

    // keeps denominators and sqrt/abs arguments away from their kinks
    fn away_from_zero(x: f64) -> f64 {
        x.signum() * (x.abs() + 0.25)
    }

    #[test]
    fn primitives_match_finite_differences() {
        check_binary(|a, b| a + b, |a, b| a + b, |b| b);
        check_binary(|a, b| a - b, |a, b| a - b, |b| b);
        check_binary(|a, b| a * b, |a, b| a * b, |b| b);
        check_binary(|a, b| a / b, |a, b| a / b, away_from_zero);
        check_unary(|a| -a, |a| -a, |a| a);
        check_unary(|a| a.tanh(), f64::tanh, |a| a);
        check_unary(|a| a.sqrt(), f64::sqrt, |a| a.abs() + 0.25);
        check_unary(|a| a.abs(), f64::abs, away_from_zero);
        check_unary(|a| a * 1.7 + 0.3, |a| a * 1.7 + 0.3, |a| a);
        check_unary(|a| (a - 0.2) / 3.0, |a| (a - 0.2) / 3.0, |a| a);
    }

    #[test]
    fn linear_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let w: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let reference = |w: &[f64], b: &[f64], x: &[f64]| {
                let mut out = Vec::new();
                f64::linear(w, Some(b), x, 2, &mut out);
                out[0] * 0.7 - out[1]
            };
            let tape = Tape::new();
            let (vw, vb, vx) = (tape.vars(&w), tape.vars(&b), tape.vars(&x));
            let mut out = Vec::new();
            Var::linear(&vw, Some(&vb), &vx, 2, &mut out);
            let y = out[0] * 0.7 - out[1];
            let all: Vec<Var<'_>> = vw.iter().chain(&vb).chain(&vx).copied().collect();
            let g = tape.gradient(y, &all);
            let flat: Vec<f64> = w.iter().chain(&b).chain(&x).copied().collect();
            for (k, gk) in g.iter().enumerate() {
                let mut hi = flat.clone();
                let mut lo = flat.clone();
                hi[k] += FD_STEP;
                lo[k] -= FD_STEP;
                let f = |v: &[f64]| reference(&v[0..6], &v[6..8], &v[8..11]);
                let fd = (f(&hi) - f(&lo)) / (2.0 * FD_STEP);
                assert!(rel_err(*gk, fd) < 1e-6, "k={k}");
            }
        }
    }

    #[test]
    fn constants_do_not_touch_the_tape() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let before = tape.len();
        let c = Var::constant(3.0) * Var::constant(4.0);
        assert!(c.is_constant());
        assert_eq!(tape.len(), before);
        let y = x * c;
        assert_eq!(tape.gradient(y, &[x]), vec![12.0]);
    }

    #[test]
    fn clear_resets_recording() {
        let mut tape = Tape::new();
        {
            let x = tape.var(1.0);
            let _ = x / Var::constant(0.0);
        }
        assert_eq!(tape.failure(), Some("div"));
        tape.clear();
        assert!(tape.is_empty());
        assert_eq!(tape.failure(), None);
    }
}
