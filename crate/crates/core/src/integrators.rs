//! Explicit midpoint (RK2) and Gonzalez discrete-gradient steppers.
//!
//! The DG step solves `δx = h · flows(∇̄H(x, δx), u)` for `δx` by Newton's
//! method in plain `f64`, with the Jacobian of the fixed-point map from one
//! forward-mode pass per state coordinate. When parameters live on a tape,
//! the converged step is re-expressed so that reverse mode sees the
//! implicit-function derivative ([`DgBackward::Implicit`]), or the solve is
//! replayed as a plain fixed-point iteration on the tape
//! ([`DgBackward::Unrolled`]).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Scalar, Var};
use crate::error::{Error, Result};
use crate::system::{jr_form_ports, s_form_ports, AsJr, AsS, Dynamics, Energy, Flow, JrForm, SForm, State};

/// Below this step norm the discrete gradient falls back to `∇H(x)`.
pub const DG_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "RK2")]
    Rk2,
    #[serde(rename = "DG")]
    Dg,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Rk2 => "RK2",
            Scheme::Dg => "DG",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DgBackward {
    #[default]
    Implicit,
    Unrolled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepperConfig {
    pub scheme: Scheme,
    pub h: f64,
    pub dg_tol: f64,
    pub dg_max_iters: usize,
    #[serde(default)]
    pub backward: DgBackward,
}

impl StepperConfig {
    pub fn new(scheme: Scheme, h: f64) -> Self {
        StepperConfig {
            scheme,
            h,
            dg_tol: 1e-12,
            dg_max_iters: 100,
            backward: DgBackward::Implicit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !(self.dg_tol > 0.0) || self.dg_max_iters == 0 {
            return Err(Error::Config(format!("invalid stepper config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub x_next: State<f64>,
    pub w: Option<f64>,
    pub y: Option<f64>,
    pub iters: usize,
    pub residual: f64,
}

/// `x + h f(x + (h/2) f(x, u), u)`.
pub fn rk2_step<B, D, T>(sys: &D, x: State<T>, u: T, h: f64) -> State<T>
where
    D: Dynamics<B> + ?Sized,
    T: Scalar<Base = B>,
{
    let k1 = sys.flow(x, u).xdot;
    let mid = [x[0] + k1[0] * (0.5 * h), x[1] + k1[1] * (0.5 * h)];
    let k2 = sys.flow(mid, u).xdot;
    [x[0] + k2[0] * h, x[1] + k2[1] * h]
}

/// [`rk2_step`] in `f64` with a finiteness check; ports are reported at `x`.
pub fn rk2_step_checked<D: Dynamics<f64> + ?Sized>(sys: &D, x: State<f64>, u: f64, h: f64) -> Result<StepResult> {
    let Flow { w, y, .. } = sys.flow(x, u);
    let x_next = rk2_step(sys, x, u, h);
    if !x_next.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericFailure { op: "rk2_step" });
    }
    Ok(StepResult {
        x_next,
        w,
        y,
        iters: 0,
        residual: 0.0,
    })
}

/// Gonzalez discrete gradient from `H(x)`, `H(x + δx)` and `∇H` at the midpoint.
///
/// A numerator at rounding level is dropped, and ramped back in linearly up
/// to twice that level. A hard cut-off makes the map jump by `~ε·H/‖δx‖`
/// near equilibria, which the implicit solve cannot converge across.
pub fn gonzalez_correction<T: Scalar, const N: usize>(h0: T, h1: T, grad_mid: [T; N], dx: [T; N]) -> [T; N] {
    let mut dot = T::zero();
    let mut norm2 = T::zero();
    for i in 0..N {
        dot = dot + grad_mid[i] * dx[i];
        norm2 = norm2 + dx[i] * dx[i];
    }
    let num = h1 - h0 - dot;
    let noise = 16.0 * f64::EPSILON * (h1.value().abs() + h0.value().abs() + dot.value().abs());
    if num.value().abs() <= noise {
        return grad_mid;
    }
    let num = if num.value().abs() < 2.0 * noise {
        num * ((num.abs() - noise) / noise)
    } else {
        num
    };
    let scale = num / norm2;
    std::array::from_fn(|i| grad_mid[i] + dx[i] * scale)
}

/// `∇̄H(x, δx)` for closures `h` and `grad`.
pub fn gonzalez_dg<const N: usize>(
    h: impl Fn([f64; N]) -> f64,
    grad: impl Fn([f64; N]) -> [f64; N],
    x: [f64; N],
    dx: [f64; N],
) -> [f64; N] {
    if dx.iter().map(|d| d * d).sum::<f64>().sqrt() < DG_GUARD {
        return grad(x);
    }
    let x1 = std::array::from_fn(|i| x[i] + dx[i]);
    let mid = std::array::from_fn(|i| x[i] + 0.5 * dx[i]);
    gonzalez_correction(h(x), h(x1), grad(mid), dx)
}

/// Discrete gradient of a system's Hamiltonian.
pub fn discrete_gradient<B, E, T>(sys: &E, x: State<T>, dx: State<T>) -> State<T>
where
    E: Energy<B> + ?Sized,
    T: Scalar<Base = B>,
{
    if (dx[0].value().powi(2) + dx[1].value().powi(2)).sqrt() < DG_GUARD {
        return sys.grad_hamiltonian(x);
    }
    let x1 = [x[0] + dx[0], x[1] + dx[1]];
    let mid = [x[0] + dx[0] * 0.5, x[1] + dx[1] * 0.5];
    gonzalez_correction(sys.hamiltonian(x), sys.hamiltonian(x1), sys.grad_hamiltonian(mid), dx)
}

/// A port-Hamiltonian system that can be stepped with a discrete gradient.
pub trait DgSystem<B>: Energy<B> + Dynamics<B> {
    /// `(flows, w, y)` for the effort `g` standing in for `∇H`, with any
    /// state-dependent structure evaluated for the step `x → x + δx`.
    fn dg_ports<T: Scalar<Base = B>>(&self, x: State<T>, dx: State<T>, u: T, g: State<T>) -> (State<T>, Option<T>, Option<T>);
}

impl<B, S: SForm<B> + ?Sized> Energy<B> for AsS<'_, S> {
    fn hamiltonian<T: Scalar<Base = B>>(&self, x: State<T>) -> T {
        self.0.hamiltonian(x)
    }
    fn grad_hamiltonian<T: Scalar<Base = B>>(&self, x: State<T>) -> State<T> {
        self.0.grad_hamiltonian(x)
    }
}

impl<B, S: JrForm<B> + ?Sized> Energy<B> for AsJr<'_, S> {
    fn hamiltonian<T: Scalar<Base = B>>(&self, x: State<T>) -> T {
        self.0.hamiltonian(x)
    }
    fn grad_hamiltonian<T: Scalar<Base = B>>(&self, x: State<T>) -> State<T> {
        self.0.grad_hamiltonian(x)
    }
}

impl<B, S: SForm<B> + ?Sized> DgSystem<B> for AsS<'_, S> {
    fn dg_ports<T: Scalar<Base = B>>(&self, _x: State<T>, _dx: State<T>, u: T, g: State<T>) -> (State<T>, Option<T>, Option<T>) {
        let (fl, w, y) = s_form_ports(self.0, g, u);
        (fl, Some(w), Some(y))
    }
}

impl<B, S: JrForm<B> + ?Sized> DgSystem<B> for AsJr<'_, S> {
    fn dg_ports<T: Scalar<Base = B>>(&self, x: State<T>, dx: State<T>, u: T, g: State<T>) -> (State<T>, Option<T>, Option<T>) {
        let mid = [x[0] + dx[0] * 0.5, x[1] + dx[1] * 0.5];
        let (fl, y) = jr_form_ports(self.0, g, u, mid);
        (fl, None, Some(y))
    }
}

/// The DG fixed-point map `Φ(δx) = h · flows(∇̄H(x, δx), u)` and its ports.
pub fn dg_map<B, S, T>(sys: &S, x: State<T>, u: T, dx: State<T>, h: f64) -> (State<T>, Option<T>, Option<T>)
where
    S: DgSystem<B> + ?Sized,
    T: Scalar<Base = B>,
{
    let g = discrete_gradient(sys, x, dx);
    let (fl, w, y) = sys.dg_ports(x, dx, u, g);
    ([fl[0] * h, fl[1] * h], w, y)
}

/// Converged DG step.
#[derive(Clone, Debug, PartialEq)]
pub struct DgSolution {
    pub dx: State<f64>,
    /// `∂Φ/∂δx` at the solution.
    pub jacobian: [[f64; 2]; 2],
    pub w: Option<f64>,
    pub y: Option<f64>,
    pub iters: usize,
    pub residual: f64,
}

fn map_with_jacobian<S: DgSystem<f64> + ?Sized>(
    sys: &S,
    x: State<f64>,
    u: f64,
    dx: State<f64>,
    h: f64,
) -> (State<f64>, [[f64; 2]; 2], Option<f64>, Option<f64>) {
    let xd = [Dual::constant(x[0]), Dual::constant(x[1])];
    let ud = Dual::constant(u);
    let mut jac = [[0.0; 2]; 2];
    let mut out = ([0.0; 2], None, None);
    for col in 0..2 {
        let dxd = [Dual::new(dx[0], if col == 0 { 1.0 } else { 0.0 }), Dual::new(dx[1], if col == 1 { 1.0 } else { 0.0 })];
        let (phi, w, y) = dg_map(sys, xd, ud, dxd, h);
        jac[0][col] = phi[0].eps;
        jac[1][col] = phi[1].eps;
        if col == 0 {
            out = ([phi[0].re, phi[1].re], w.map(|v| v.re), y.map(|v| v.re));
        }
    }
    (out.0, jac, out.1, out.2)
}

/// Inverse of `I − A`.
fn inv_i_minus(a: [[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let m = [[1.0 - a[0][0], -a[0][1]], [-a[1][0], 1.0 - a[1][1]]];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

/// Newton solve of `δx = Φ(δx)` seeded with an RK2 predictor.
pub fn dg_solve<S: DgSystem<f64> + ?Sized>(sys: &S, x: State<f64>, u: f64, cfg: &StepperConfig) -> Result<DgSolution> {
    let h = cfg.h;
    let pred = rk2_step(sys, x, u, h);
    let mut dx = [pred[0] - x[0], pred[1] - x[1]];
    let mut history = Vec::new();
    for iters in 0..=cfg.dg_max_iters {
        let (phi, jac, w, y) = map_with_jacobian(sys, x, u, dx, h);
        let r = [dx[0] - phi[0], dx[1] - phi[1]];
        let residual = r[0].abs().max(r[1].abs());
        if !residual.is_finite() {
            return Err(Error::NumericFailure { op: "dg_solve" });
        }
        history.push(residual);
        if residual <= cfg.dg_tol {
            return Ok(DgSolution {
                dx,
                jacobian: jac,
                w,
                y,
                iters,
                residual,
            });
        }
        if iters == cfg.dg_max_iters {
            break;
        }
        let m = inv_i_minus(jac).ok_or(Error::NumericFailure { op: "dg_newton" })?;
        dx[0] -= m[0][0] * r[0] + m[0][1] * r[1];
        dx[1] -= m[1][0] * r[0] + m[1][1] * r[1];
    }
    Err(Error::DgNotConverged {
        iters: cfg.dg_max_iters,
        history,
    })
}

/// One DG step of a value-level system.
pub fn dg_step<S: DgSystem<f64> + ?Sized>(sys: &S, x: State<f64>, u: f64, cfg: &StepperConfig) -> Result<StepResult> {
    let sol = dg_solve(sys, x, u, cfg)?;
    Ok(StepResult {
        x_next: [x[0] + sol.dx[0], x[1] + sol.dx[1]],
        w: sol.w,
        y: sol.y,
        iters: sol.iters,
        residual: sol.residual,
    })
}

pub fn dg_step_s_form<S: SForm<f64> + ?Sized>(sys: &S, x: State<f64>, u: f64, cfg: &StepperConfig) -> Result<StepResult> {
    dg_step(&AsS(sys), x, u, cfg)
}

pub fn dg_step_jr_form<S: JrForm<f64> + ?Sized>(sys: &S, x: State<f64>, u: f64, cfg: &StepperConfig) -> Result<StepResult> {
    dg_step(&AsJr(sys), x, u, cfg)
}

/// One step with either scheme.
pub fn step<S: DgSystem<f64> + ?Sized>(sys: &S, x: State<f64>, u: f64, cfg: &StepperConfig) -> Result<StepResult> {
    match cfg.scheme {
        Scheme::Rk2 => rk2_step_checked(sys, x, u, cfg.h),
        Scheme::Dg => dg_step(sys, x, u, cfg),
    }
}

/// DG step whose result is differentiable in everything `sys_tape` reads
/// from the tape. `sys_value` must be the same system at plain values.
pub fn dg_step_taped<'t, SV, ST>(
    sys_value: &SV,
    sys_tape: &ST,
    x: State<Var<'t>>,
    u: Var<'t>,
    cfg: &StepperConfig,
) -> Result<State<Var<'t>>>
where
    SV: DgSystem<f64> + ?Sized,
    ST: DgSystem<Var<'t>> + ?Sized,
{
    match cfg.backward {
        DgBackward::Implicit => {
            let sol = dg_solve(sys_value, [x[0].value(), x[1].value()], u.value(), cfg)?;
            let dxc = [Var::constant(sol.dx[0]), Var::constant(sol.dx[1])];
            let (phi, _, _) = dg_map(sys_tape, x, u, dxc, cfg.h);
            let m = inv_i_minus(sol.jacobian).ok_or(Error::NumericFailure { op: "dg_implicit" })?;
            // zero-valued perturbations carrying ∂Φ/∂θ
            let d = [phi[0] - phi[0].value(), phi[1] - phi[1].value()];
            Ok(std::array::from_fn(|i| x[i] + (d[0] * m[i][0] + d[1] * m[i][1]) + sol.dx[i]))
        }
        DgBackward::Unrolled => {
            let pred = rk2_step(sys_tape, x, u, cfg.h);
            let mut dx = [pred[0] - x[0], pred[1] - x[1]];
            let mut history = Vec::new();
            for _ in 0..cfg.dg_max_iters {
                let (phi, _, _) = dg_map(sys_tape, x, u, dx, cfg.h);
                let residual = (dx[0].value() - phi[0].value()).abs().max((dx[1].value() - phi[1].value()).abs());
                if !residual.is_finite() {
                    return Err(Error::NumericFailure { op: "dg_unrolled" });
                }
                history.push(residual);
                dx = phi;
                if residual <= cfg.dg_tol {
                    return Ok([x[0] + dx[0], x[1] + dx[1]]);
                }
            }
            Err(Error::DgNotConverged {
                iters: cfg.dg_max_iters,
                history,
            })
        }
    }
}

/// Autoregressive rollout of `n_steps` steps; the first entry is `x0`.
pub fn rollout<F>(mut step_fn: F, x0: State<f64>, n_steps: usize) -> Result<Vec<State<f64>>>
where
    F: FnMut(State<f64>) -> Result<StepResult>,
{
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(x0);
    let mut x = x0;
    for k in 0..n_steps {
        x = step_fn(x).map_err(|e| e.at_step(k))?.x_next;
        out.push(x);
    }
    Ok(out)
}

/// Rollout of a system with constant input.
pub fn rollout_system<S: DgSystem<f64> + ?Sized>(
    sys: &S,
    x0: State<f64>,
    u: f64,
    n_steps: usize,
    cfg: &StepperConfig,
) -> Result<Vec<State<f64>>> {
    rollout(|x| step(sys, x, u, cfg), x0, n_steps)
}
