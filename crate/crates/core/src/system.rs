//! Interfaces shared by the analytic oscillators and the learned models.
//!
//! All systems here have a two-dimensional state `x = (q, p)`, one
//! dissipative port and one scalar input.

use crate::autodiff::{forward_gradient, Scalar};

pub type State<T> = [T; 2];

/// Continuous-time evaluation `ẋ = f(x, u)` with optional port variables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Flow<T> {
    pub xdot: State<T>,
    pub w: Option<T>,
    pub y: Option<T>,
}

/// Anything with a vector field. `B` is the storage type of the system's
/// parameters (`f64` for values, a tape variable while training).
pub trait Dynamics<B> {
    fn flow<T: Scalar<Base = B>>(&self, x: State<T>, u: T) -> Flow<T>;
}

/// A stored-energy function.
pub trait Energy<B> {
    fn hamiltonian<T: Scalar<Base = B>>(&self, x: State<T>) -> T;

    fn grad_hamiltonian<T: Scalar<Base = B>>(&self, x: State<T>) -> State<T> {
        forward_gradient(|xd| self.hamiltonian(xd), x)
    }
}

/// Semi-explicit PH-DAE: `[ẋ; w; y] = S [∇H; z(w); u]` with `S_ww = 0`.
pub trait SForm<B>: Energy<B> {
    fn s_matrix(&self) -> [[f64; 4]; 4];
    fn dissipation<T: Scalar<Base = B>>(&self, w: T) -> T;
}

/// Input-state-output form with feedthrough: `[ẋ; y] = (J − R(x, u)) [∇H; u]`.
pub trait JrForm<B>: Energy<B> {
    fn j_matrix(&self) -> [[f64; 3]; 3];
    fn resistance<T: Scalar<Base = B>>(&self, x: State<T>, u: T) -> [[T; 3]; 3];
}

/// Port variables `(flows, w, y)` of an S-form system given the gradient
/// (or a discrete gradient) `g` in place of `∇H`.
pub fn s_form_ports<B, S, T>(sys: &S, g: State<T>, u: T) -> (State<T>, T, T)
where
    S: SForm<B> + ?Sized,
    T: Scalar<Base = B>,
{
    let s = sys.s_matrix();
    debug_assert_eq!(s[2][2], 0.0, "S_ww must vanish");
    let w = g[0] * s[2][0] + g[1] * s[2][1] + u * s[2][3];
    let z = sys.dissipation(w);
    let e = [g[0], g[1], z, u];
    let row = |i: usize| {
        let mut acc = T::zero();
        for (j, &ej) in e.iter().enumerate() {
            if s[i][j] != 0.0 {
                acc = acc + ej * s[i][j];
            }
        }
        acc
    };
    ([row(0), row(1)], w, row(3))
}

/// Port variables `(flows, y)` of a JR-form system with the resistive
/// matrix evaluated at `x_r`.
pub fn jr_form_ports<B, S, T>(sys: &S, g: State<T>, u: T, x_r: State<T>) -> (State<T>, T)
where
    S: JrForm<B> + ?Sized,
    T: Scalar<Base = B>,
{
    let j = sys.j_matrix();
    let r = sys.resistance(x_r, u);
    let e = [g[0], g[1], u];
    let row = |i: usize| {
        let mut acc = T::zero();
        for (k, &ek) in e.iter().enumerate() {
            acc = acc + ek * (r[i][k] * -1.0 + j[i][k]);
        }
        acc
    };
    ([row(0), row(1)], row(2))
}

pub fn s_form_flow<B, S, T>(sys: &S, x: State<T>, u: T) -> Flow<T>
where
    S: SForm<B> + ?Sized,
    T: Scalar<Base = B>,
{
    let g = sys.grad_hamiltonian(x);
    let (xdot, w, y) = s_form_ports(sys, g, u);
    Flow {
        xdot,
        w: Some(w),
        y: Some(y),
    }
}

pub fn jr_form_flow<B, S, T>(sys: &S, x: State<T>, u: T) -> Flow<T>
where
    S: JrForm<B> + ?Sized,
    T: Scalar<Base = B>,
{
    let g = sys.grad_hamiltonian(x);
    let (xdot, y) = jr_form_ports(sys, g, u, x);
    Flow { xdot, w: None, y: Some(y) }
}

/// Views a system through its S-form.
#[derive(Clone, Copy, Debug)]
pub struct AsS<'a, S: ?Sized>(pub &'a S);

/// Views a system through its JR-form.
#[derive(Clone, Copy, Debug)]
pub struct AsJr<'a, S: ?Sized>(pub &'a S);

impl<B, S: SForm<B> + ?Sized> Dynamics<B> for AsS<'_, S> {
    fn flow<T: Scalar<Base = B>>(&self, x: State<T>, u: T) -> Flow<T> {
        s_form_flow(self.0, x, u)
    }
}

impl<B, S: JrForm<B> + ?Sized> Dynamics<B> for AsJr<'_, S> {
    fn flow<T: Scalar<Base = B>>(&self, x: State<T>, u: T) -> Flow<T> {
        jr_form_flow(self.0, x, u)
    }
}

/// Checks `M + Mᵀ = 0` exactly.
pub fn is_skew<const N: usize>(m: &[[f64; N]; N]) -> bool {
    (0..N).all(|i| (0..N).all(|j| m[i][j] == -m[j][i]))
}
