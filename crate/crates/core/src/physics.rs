//! Ground-truth oscillators: energies, dissipation laws, structure matrices,
//! Jacobian diagnostics, initial-condition sampling and control design.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::system::{Energy, JrForm, SForm, State};

/// Rejection sampling gives up after this many draws.
pub const MAX_REJECTION_DRAWS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OscillatorKind {
    Harmonic,
    Duffing,
    SelfSustained,
}

impl OscillatorKind {
    pub fn name(self) -> &'static str {
        match self {
            OscillatorKind::Harmonic => "harmonic",
            OscillatorKind::Duffing => "duffing",
            OscillatorKind::SelfSustained => "selfsustained",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "harmonic" | "ho" => Ok(OscillatorKind::Harmonic),
            "duffing" | "do" => Ok(OscillatorKind::Duffing),
            "selfsustained" | "self-sustained" | "sso" => Ok(OscillatorKind::SelfSustained),
            other => Err(Error::Config(format!("unknown system '{other}'"))),
        }
    }
}

/// `z(w)`: linear `c w` or cubic `a w³ + b w² + c w`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum Dissipation {
    Linear { c: f64 },
    Cubic { a: f64, b: f64, c: f64 },
}

impl Dissipation {
    pub fn z<T: Scalar>(&self, w: T) -> T {
        match *self {
            Dissipation::Linear { c } => w * c,
            Dissipation::Cubic { a, b, c } => ((w * a + b) * w + c) * w,
        }
    }

    pub fn dz(&self, w: f64) -> f64 {
        match *self {
            Dissipation::Linear { c } => c,
            Dissipation::Cubic { a, b, c } => (3.0 * a * w + 2.0 * b) * w + c,
        }
    }

    /// `Γ(w)` with `z(w) = Γ(w) w`.
    pub fn gamma<T: Scalar>(&self, w: T) -> T {
        match *self {
            Dissipation::Linear { c } => T::constant(c),
            Dissipation::Cubic { a, b, c } => (w * a + b) * w + c,
        }
    }

    /// Open interval where `z' < 0`, if any.
    pub fn active_interval(&self) -> Option<(f64, f64)> {
        match *self {
            Dissipation::Linear { .. } => None,
            Dissipation::Cubic { a, b, c } => {
                // z'(w) = 3a w² + 2b w + c
                let (qa, qb, qc) = (3.0 * a, 2.0 * b, c);
                let disc = qb * qb - 4.0 * qa * qc;
                if qa == 0.0 || disc <= 0.0 {
                    return None;
                }
                let r = disc.sqrt();
                let (lo, hi) = ((-qb - r) / (2.0 * qa), (-qb + r) / (2.0 * qa));
                if qa > 0.0 {
                    Some((lo.min(hi), lo.max(hi)))
                } else {
                    // z' < 0 outside the roots: no bounded active interval
                    None
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OscillatorSpec {
    pub kind: OscillatorKind,
    pub m: f64,
    pub k: f64,
    /// Cubic stiffness; zero except for the Duffing oscillator.
    pub k3: f64,
    pub dissipation: Dissipation,
    pub s: [[f64; 4]; 4],
    pub j: [[f64; 3]; 3],
}

const S_MECHANICAL: [[f64; 4]; 4] = [
    [0.0, 1.0, 0.0, 0.0],
    [-1.0, 0.0, -1.0, -1.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
];
const J_MECHANICAL: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [-1.0, 0.0, -1.0], [0.0, 1.0, 0.0]];

const S_SELF_SUSTAINED: [[f64; 4]; 4] = [
    [0.0, -1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0, -1.0],
    [0.0, 0.0, 1.0, 0.0],
];
const J_SELF_SUSTAINED: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];

pub const MASS: f64 = 0.16;
pub const STIFFNESS: f64 = 1.0 / 0.16;
pub const DAMPING_C: f64 = 0.9;

impl OscillatorSpec {
    pub fn harmonic() -> Self {
        OscillatorSpec {
            kind: OscillatorKind::Harmonic,
            m: MASS,
            k: STIFFNESS,
            k3: 0.0,
            dissipation: Dissipation::Linear { c: DAMPING_C },
            s: S_MECHANICAL,
            j: J_MECHANICAL,
        }
    }

    pub fn duffing() -> Self {
        OscillatorSpec {
            kind: OscillatorKind::Duffing,
            k3: 100.0 * STIFFNESS,
            ..Self::harmonic()
        }
    }

    pub fn self_sustained() -> Self {
        OscillatorSpec {
            kind: OscillatorKind::SelfSustained,
            m: MASS,
            k: STIFFNESS,
            k3: 0.0,
            dissipation: Dissipation::Cubic { a: 1.3, b: -4.0, c: 3.0 },
            s: S_SELF_SUSTAINED,
            j: J_SELF_SUSTAINED,
        }
    }

    pub fn from_kind(kind: OscillatorKind) -> Self {
        match kind {
            OscillatorKind::Harmonic => Self::harmonic(),
            OscillatorKind::Duffing => Self::duffing(),
            OscillatorKind::SelfSustained => Self::self_sustained(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.k > 0.0) {
            return Err(Error::Config("m and k must be positive".into()));
        }
        if self.kind == OscillatorKind::Duffing && self.k3 <= 0.0 {
            return Err(Error::Config("Duffing needs k3 > 0".into()));
        }
        if !crate::system::is_skew(&self.s) || !crate::system::is_skew(&self.j) {
            return Err(Error::Config("interconnection matrices must be skew-symmetric".into()));
        }
        Ok(())
    }

    /// Undamped natural frequency `√(k/m) / 2π` in Hz.
    pub fn natural_frequency(&self) -> f64 {
        (self.k / self.m).sqrt() / std::f64::consts::TAU
    }

    pub fn true_hamiltonian(&self, x: State<f64>) -> f64 {
        Energy::<f64>::hamiltonian(self, x)
    }

    pub fn true_z(&self, w: f64) -> f64 {
        self.dissipation.z(w)
    }

    /// `(ẋ, w, y)` of the S-form.
    pub fn true_dynamics(&self, x: State<f64>, u: f64) -> (State<f64>, f64, f64) {
        let g = self.grad_hamiltonian(x);
        let (xdot, w, y) = crate::system::s_form_ports(self, g, u);
        (xdot, w, y)
    }

    /// Dissipation flow `w` as a function of state and input.
    pub fn flow_w(&self, x: State<f64>, u: f64) -> f64 {
        let g = self.grad_hamiltonian(x);
        g[0] * self.s[2][0] + g[1] * self.s[2][1] + u * self.s[2][3]
    }

    /// Analytic state Jacobian of `ẋ` with `u` fixed.
    pub fn jacobian(&self, x: State<f64>, u: f64) -> [[f64; 2]; 2] {
        match self.kind {
            OscillatorKind::Harmonic | OscillatorKind::Duffing => {
                let c = self.dissipation.dz(0.0);
                [[0.0, 1.0 / self.m], [-self.effective_stiffness(x[0]), -c / self.m]]
            }
            OscillatorKind::SelfSustained => {
                let w = self.flow_w(x, u);
                [[-self.k * self.dissipation.dz(w), -1.0 / self.m], [self.k, 0.0]]
            }
        }
    }

    /// `k1 + 3 k3 q²`.
    pub fn effective_stiffness(&self, q: f64) -> f64 {
        self.k + 3.0 * self.k3 * q * q
    }

    /// Spectral norm, condition number and stiffness ratio of the state
    /// Jacobian from the closed-form expressions for each oscillator.
    pub fn closed_form_diagnostics(&self, x: State<f64>, u: f64) -> JacobianDiagnostics {
        let m = self.m;
        // s = ‖J‖_F², det = k/m (or K/m); all three Jacobians share this shape.
        let (s, det, damped_sq, underdamped) = match self.kind {
            OscillatorKind::Harmonic | OscillatorKind::Duffing => {
                let kk = self.effective_stiffness(x[0]);
                let c = self.dissipation.dz(0.0);
                (kk * kk + (1.0 + c * c) / (m * m), kk / m, (c / m).powi(2), c * c < 4.0 * kk * m)
            }
            OscillatorKind::SelfSustained => {
                let a = self.k * self.dissipation.dz(self.flow_w(x, u));
                let k = self.k;
                (a * a + k * k + 1.0 / (m * m), k / m, a * a, a * a < 4.0 * k / m)
            }
        };
        let spectral_norm = (0.5 * (s + (s * s - 4.0 * det * det).max(0.0).sqrt())).sqrt();
        let condition_number = spectral_norm * spectral_norm / det.abs();
        let stiffness_ratio = if underdamped {
            Some(1.0)
        } else {
            // real eigenvalues of λ² − tr λ + det with tr² = damped_sq
            let tr_abs = damped_sq.sqrt();
            let big = 0.5 * (tr_abs + (damped_sq - 4.0 * det).max(0.0).sqrt());
            if det == 0.0 {
                None
            } else {
                Some(big * big / det.abs())
            }
        };
        JacobianDiagnostics {
            spectral_norm,
            condition_number,
            stiffness_ratio,
        }
    }

    /// Algorithm 1 (HO, SSO) or Algorithm 2 (DO).
    pub fn sample_initial_condition<R: Rng + ?Sized>(&self, rng: &mut R, e_min: f64, e_max: f64) -> Result<State<f64>> {
        if !(0.0 < e_min && e_min <= e_max) {
            return Err(Error::Config(format!("invalid energy band [{e_min}, {e_max}]")));
        }
        match self.kind {
            OscillatorKind::Harmonic | OscillatorKind::SelfSustained => {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let r = uniform(rng, e_min, e_max);
                let e0 = r.sqrt();
                Ok(self.ellipse_point(e0, theta))
            }
            OscillatorKind::Duffing => {
                let q_max = self.static_deflection(e_max);
                let p_max = (2.0 * self.m * e_max).sqrt();
                for _ in 0..MAX_REJECTION_DRAWS {
                    let x = [rng.random_range(-q_max..=q_max), rng.random_range(-p_max..=p_max)];
                    let h = self.true_hamiltonian(x);
                    if (e_min..=e_max).contains(&h) {
                        return Ok(x);
                    }
                }
                Err(Error::SamplingExhausted(MAX_REJECTION_DRAWS))
            }
        }
    }

    /// Point of the quadratic energy ellipse `p²/2m + kq²/2 = e` at angle `theta`.
    pub fn ellipse_point(&self, e: f64, theta: f64) -> State<f64> {
        [(2.0 * e / self.k).sqrt() * theta.sin(), (2.0 * self.m * e).sqrt() * theta.cos()]
    }

    /// Positive `q` with `H(q, 0) = e`.
    pub fn static_deflection(&self, e: f64) -> f64 {
        if self.k3 == 0.0 {
            (2.0 * e / self.k).sqrt()
        } else {
            // (k3/4) s² + (k1/2) s − e = 0 in s = q², rationalised root
            let half_k = 0.5 * self.k;
            let s = 2.0 * e / (half_k + (half_k * half_k + self.k3 * e).sqrt());
            s.sqrt()
        }
    }

    /// Constant input that places the equilibrium in the energy band (HO, DO)
    /// or inside the active region of `z` (SSO).
    pub fn design_control<R: Rng + ?Sized>(&self, rng: &mut R, e_min: f64, e_max: f64) -> Result<f64> {
        match self.kind {
            OscillatorKind::Harmonic | OscillatorKind::Duffing => {
                if !(0.0 < e_min && e_min <= e_max) {
                    return Err(Error::Config(format!("invalid energy band [{e_min}, {e_max}]")));
                }
                let e_eq = uniform(rng, e_min, e_max);
                Ok(self.control_for_energy(e_eq))
            }
            OscillatorKind::SelfSustained => {
                let (lo, hi) = self.dissipation.active_interval().ok_or(Error::EmptyActiveRegion)?;
                let w = rng.random_range(lo..hi);
                Ok(-w)
            }
        }
    }

    /// `u* = −k1 q* − k3 q*³` with `H(q*, 0) = e`.
    pub fn control_for_energy(&self, e: f64) -> f64 {
        let q = self.static_deflection(e);
        -self.k * q - self.k3 * q * q * q
    }

    /// Unique equilibrium under constant input `u`.
    pub fn equilibrium(&self, u: f64) -> State<f64> {
        match self.kind {
            OscillatorKind::Harmonic => [-u / self.k, 0.0],
            OscillatorKind::Duffing => {
                // k3 q³ + k1 q + u = 0, monotone: one real root (Cardano), then a Newton polish
                let (p, q) = (self.k / self.k3, u / self.k3);
                let r = (q * q / 4.0 + p * p * p / 27.0).sqrt();
                let mut root = (-q / 2.0 + r).cbrt() + (-q / 2.0 - r).cbrt();
                for _ in 0..2 {
                    let f = self.k3 * root.powi(3) + self.k * root + u;
                    root -= f / (3.0 * self.k3 * root * root + self.k);
                }
                [root, 0.0]
            }
            OscillatorKind::SelfSustained => [0.0, self.m * self.dissipation.z(-u)],
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

impl<B> Energy<B> for OscillatorSpec {
    fn hamiltonian<T: Scalar<Base = B>>(&self, x: State<T>) -> T {
        let [q, p] = x;
        let q2 = q * q;
        p * p / (2.0 * self.m) + q2 * (0.5 * self.k) + q2 * q2 * (0.25 * self.k3)
    }

    fn grad_hamiltonian<T: Scalar<Base = B>>(&self, x: State<T>) -> State<T> {
        let [q, p] = x;
        [q * self.k + q * q * q * self.k3, p / self.m]
    }
}

impl<B> SForm<B> for OscillatorSpec {
    fn s_matrix(&self) -> [[f64; 4]; 4] {
        self.s
    }

    fn dissipation<T: Scalar<Base = B>>(&self, w: T) -> T {
        self.dissipation.z(w)
    }
}

impl<B> JrForm<B> for OscillatorSpec {
    fn j_matrix(&self) -> [[f64; 3]; 3] {
        self.j
    }

    fn resistance<T: Scalar<Base = B>>(&self, x: State<T>, u: T) -> [[T; 3]; 3] {
        let z = T::zero();
        match self.kind {
            OscillatorKind::Harmonic | OscillatorKind::Duffing => {
                let c = T::constant(self.dissipation.dz(0.0));
                [[z, z, z], [z, c, z], [z, z, z]]
            }
            OscillatorKind::SelfSustained => {
                let w = -(x[0] * self.k) - u;
                let g = self.dissipation.gamma(w);
                [[g, z, g], [z, z, z], [g, z, g]]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianDiagnostics {
    pub spectral_norm: f64,
    pub condition_number: f64,
    /// `None` when the smallest eigenvalue real part is zero.
    pub stiffness_ratio: Option<f64>,
}
