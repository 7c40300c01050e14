//! Differentiation engine.
//!
//! Model code is written once against the [`Scalar`] trait and evaluated with
//! whichever number type the caller needs:
//!
//! * `f64` for plain evaluation,
//! * [`Var`] to record a reverse-mode tape over the parameters,
//! * [`Dual<T>`] to carry a forward-mode tangent on top of any other scalar.
//!
//! Nesting composes: `Dual<Var>` gives state gradients that stay differentiable
//! in the parameters, and `Dual<Dual<Var>>` gives state Hessians (needed for the
//! Jacobian of a Hamiltonian vector field) with one reverse sweep on top.

mod adam;
mod dual;
mod params;
mod tape;

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub use adam::{adam_step, AdamState};
pub use dual::Dual;
pub use params::{ParamVector, Segment};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Number type the models are generic over.
///
/// `Base` is the innermost scalar (`f64` or [`Var`]); network weights are
/// stored as `Base` so that lifting a parameter into a dual number never
/// allocates tangent storage for it.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    type Base: Copy + Debug;

    fn constant(c: f64) -> Self;
    fn from_base(b: Self::Base) -> Self;
    /// Innermost primal value.
    fn value(&self) -> f64;
    fn mul_base(self, b: Self::Base) -> Self;
    fn tanh(self) -> Self;
    /// Square root whose derivative is taken as zero at exactly zero.
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;

    /// Dense affine layer `out[j] = bias[j] + sum_i weights[j * n + i] * inputs[i]`
    /// with row-major weights. Results are appended to `out`.
    fn linear(
        weights: &[Self::Base],
        bias: Option<&[Self::Base]>,
        inputs: &[Self],
        out_dim: usize,
        out: &mut Vec<Self>,
    );

    fn zero() -> Self {
        Self::constant(0.0)
    }

    fn square(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    type Base = f64;

    #[inline]
    fn constant(c: f64) -> Self {
        c
    }
    #[inline]
    fn from_base(b: f64) -> Self {
        b
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn mul_base(self, b: f64) -> Self {
        self * b
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }

    fn linear(weights: &[f64], bias: Option<&[f64]>, inputs: &[f64], out_dim: usize, out: &mut Vec<f64>) {
        let n = inputs.len();
        for j in 0..out_dim {
            let row = &weights[j * n..(j + 1) * n];
            let mut acc = bias.map_or(0.0, |b| b[j]);
            for (w, x) in row.iter().zip(inputs) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

/// Runs `f` on a fresh tape over the parameters and returns its value and
/// gradient.
pub fn value_and_grad<F>(f: F, p: &ParamVector) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::with_capacity(p.len() * 4);
    let vars = tape.vars(&p.values);
    let out = f(&vars);
    if let Some(op) = tape.failure() {
        return Err(Error::NumericFailure { op });
    }
    let grad = tape.gradient(out, &vars);
    Ok((out.value(), grad))
}

/// Derivative of `f` at `x` along `v`, i.e. `d/de f(x + e v)` at `e = 0`.
///
/// The result has the caller's scalar type, so when `T` is a [`Var`] the
/// directional derivative is itself differentiable in any tape variable
/// captured by `f`.
pub fn directional_derivative<T, F>(f: F, x: &[T], v: &[T]) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnOnce(&[Dual<T>]) -> Vec<Dual<T>>,
{
    if x.len() != v.len() {
        return Err(Error::ShapeMismatch {
            expected: x.len(),
            actual: v.len(),
        });
    }
    let seeded: Vec<Dual<T>> = x.iter().zip(v).map(|(&re, &eps)| Dual::new(re, eps)).collect();
    Ok(f(&seeded).into_iter().map(|d| d.eps).collect())
}

/// Gradient of a scalar function of a small state vector by one forward
/// pass per coordinate.
pub fn forward_gradient<T, F, const N: usize>(f: F, x: [T; N]) -> [T; N]
where
    T: Scalar,
    F: Fn([Dual<T>; N]) -> Dual<T>,
{
    std::array::from_fn(|j| {
        let seeded = std::array::from_fn(|i| Dual::new(x[i], T::constant(if i == j { 1.0 } else { 0.0 })));
        f(seeded).eps
    })
}
