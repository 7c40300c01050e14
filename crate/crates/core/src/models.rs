//! Learnable dynamics: the NODE baseline and the two port-Hamiltonian
//! networks, their discrete steps and their Jacobian penalties.

use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, ParamVector, Scalar, Var};
use crate::error::{Error, Result};
use crate::integrators::{dg_step, dg_step_taped, rk2_step, rk2_step_checked, DgSystem, Scheme, StepResult, StepperConfig};
use crate::nets::{hamiltonian_value, init_params, r_head, z_head_scalar, MlpSpec, Q_SHIFT};
use crate::physics::{OscillatorKind, OscillatorSpec};
use crate::rng::Purpose;
use crate::system::{jr_form_flow, s_form_flow, AsJr, AsS, Dynamics, Energy, Flow, JrForm, SForm, State};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "NODE")]
    Node,
    #[serde(rename = "PHNN-S")]
    PhnnS,
    #[serde(rename = "PHNN-JR")]
    PhnnJr,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Node => "NODE",
            ModelKind::PhnnS => "PHNN-S",
            ModelKind::PhnnJr => "PHNN-JR",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetSize {
    Small,
    Medium,
    Large,
}

impl NetSize {
    pub fn name(self) -> &'static str {
        match self {
            NetSize::Small => "small",
            NetSize::Medium => "medium",
            NetSize::Large => "large",
        }
    }

    /// `(L_H width, L_z width, L_R width, NODE width, NODE hidden layers)`.
    fn widths(self) -> (usize, usize, usize, usize, usize) {
        match self {
            NetSize::Small => (16, 20, 16, 24, 2),
            NetSize::Medium => (42, 42, 42, 60, 2),
            NetSize::Large => (100, 100, 100, 100, 3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedNet {
    pub name: String,
    pub spec: MlpSpec,
}

/// Layer specs of every head of a model, in parameter order.
pub fn net_specs(kind: ModelKind, size: NetSize) -> Vec<NamedNet> {
    let (wh, wz, wr, wn, ln) = size.widths();
    let named = |name: &str, spec| NamedNet {
        name: name.to_string(),
        spec,
    };
    match kind {
        ModelKind::Node => vec![named("node", MlpSpec::new(3, 2, wn, ln))],
        ModelKind::PhnnS => vec![
            named("L_H", MlpSpec::new(2, 3, wh, 2)),
            named("L_z", MlpSpec::new(1, 1, wz, 2)),
            named("K_z", MlpSpec::new(1, 0, wz, 2)),
        ],
        ModelKind::PhnnJr => vec![named("L_H", MlpSpec::new(2, 3, wh, 2)), named("L_R", MlpSpec::new(3, 6, wr, 2))],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    pub kind: ModelKind,
    pub size: NetSize,
    pub system: OscillatorKind,
    pub nets: Vec<NamedNet>,
    pub s: [[f64; 4]; 4],
    pub j: [[f64; 3]; 3],
    pub params: ParamVector,
}

impl DynamicsModel {
    /// Freshly initialised model whose fixed interconnection is taken from `system`.
    pub fn new(kind: ModelKind, size: NetSize, system: &OscillatorSpec, seed: u64) -> Self {
        Self::with_nets(kind, size, net_specs(kind, size), system, seed)
    }

    pub fn with_nets(kind: ModelKind, size: NetSize, nets: Vec<NamedNet>, system: &OscillatorSpec, seed: u64) -> Self {
        let mut params = ParamVector::default();
        for (i, net) in nets.iter().enumerate() {
            let sub: u64 = rand::Rng::random(&mut crate::rng::substream(seed, Purpose::Init, i as u64));
            params.push_segment(&net.name, &init_params(&net.spec, sub));
        }
        DynamicsModel {
            kind,
            size,
            system: system.kind,
            nets,
            s: system.s,
            j: system.j,
            params,
        }
    }

    /// Tiny model for derivative checks: every hidden layer has `width` units.
    pub fn tiny(kind: ModelKind, width: usize, system: &OscillatorSpec, seed: u64) -> Self {
        let nets = net_specs(kind, NetSize::Small)
            .into_iter()
            .map(|n| NamedNet {
                spec: MlpSpec::new(n.spec.input_dim, n.spec.output_dim, width, n.spec.hidden_layers),
                ..n
            })
            .collect();
        Self::with_nets(kind, NetSize::Small, nets, system, seed)
    }

    /// PHNN whose heads output constants reproducing a linear oscillator
    /// (harmonic spec). Only the last-layer biases are non-zero.
    pub fn hand_wired(kind: ModelKind, system: &OscillatorSpec) -> Result<Self> {
        if system.kind != OscillatorKind::Harmonic || kind == ModelKind::Node {
            return Err(Error::Config("hand wiring needs a PHNN and the harmonic system".into()));
        }
        let mut model = Self::new(kind, NetSize::Small, system, 0);
        model.params.values.iter_mut().for_each(|v| *v = 0.0);
        let c = system.dissipation.dz(0.0);
        model.set_output_bias("L_H", &[(system.k - Q_SHIFT).sqrt(), 0.0, (1.0 / system.m - Q_SHIFT).sqrt()])?;
        match kind {
            ModelKind::PhnnS => model.set_output_bias("L_z", &[c.sqrt()])?,
            ModelKind::PhnnJr => model.set_output_bias("L_R", &[0.0, 0.0, c.sqrt(), 0.0, 0.0, 0.0])?,
            ModelKind::Node => unreachable!(),
        }
        Ok(model)
    }

    /// Overwrites the last-layer bias of head `net`.
    pub fn set_output_bias(&mut self, net: &str, bias: &[f64]) -> Result<()> {
        let out = self.spec(net).output_dim;
        if bias.len() != out {
            return Err(Error::ShapeMismatch {
                expected: out,
                actual: bias.len(),
            });
        }
        let seg = self.range(net);
        self.params.values[seg.end - out..seg.end].copy_from_slice(bias);
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn spec(&self, name: &str) -> &MlpSpec {
        &self.nets.iter().find(|n| n.name == name).expect("unknown head").spec
    }

    fn range(&self, name: &str) -> Range<usize> {
        self.params.segment(name).map_or(0..0, |s| s.range())
    }

    /// The model evaluated with parameter storage `params` (same layout).
    pub fn bind<'a, B>(&'a self, params: &'a [B]) -> BoundModel<'a, B> {
        debug_assert_eq!(params.len(), self.params.len());
        let (h, z, r, node) = match self.kind {
            ModelKind::Node => (0..0, 0..0, 0..0, self.range("node")),
            ModelKind::PhnnS => (self.range("L_H"), self.range("L_z"), 0..0, 0..0),
            ModelKind::PhnnJr => (self.range("L_H"), 0..0, self.range("L_R"), 0..0),
        };
        let spec_or = |name: &str| self.nets.iter().find(|n| n.name == name).map(|n| &n.spec);
        BoundModel {
            model: self,
            params,
            h,
            z,
            r,
            node,
            spec_h: spec_or("L_H"),
            spec_z: spec_or("L_z"),
            spec_r: spec_or("L_R"),
            spec_node: spec_or("node"),
        }
    }

    pub fn values(&self) -> BoundModel<'_, f64> {
        self.bind(&self.params.values)
    }

    /// Validates the head layout against the fixed state/port dimensions.
    pub fn validate(&self) -> Result<()> {
        if !crate::system::is_skew(&self.s) || !crate::system::is_skew(&self.j) {
            return Err(Error::Config("interconnection must be skew-symmetric".into()));
        }
        let expect = |name: &str, i: usize, o: usize| -> Result<()> {
            let s = self.spec(name);
            if s.input_dim != i || s.output_dim != o {
                return Err(Error::Config(format!("head {name} must map {i} -> {o}")));
            }
            Ok(())
        };
        match self.kind {
            ModelKind::Node => expect("node", 3, 2)?,
            ModelKind::PhnnS => {
                expect("L_H", 2, 3)?;
                expect("L_z", 1, 1)?;
                expect("K_z", 1, 0)?;
            }
            ModelKind::PhnnJr => {
                expect("L_H", 2, 3)?;
                expect("L_R", 3, 6)?;
            }
        }
        let total: usize = self.nets.iter().map(|n| n.spec.n_params()).sum();
        if total != self.params.len() || !self.params.layout_is_consistent() {
            return Err(Error::ShapeMismatch {
                expected: total,
                actual: self.params.len(),
            });
        }
        Ok(())
    }
}

/// A model paired with parameter storage of type `B`.
#[derive(Clone, Debug)]
pub struct BoundModel<'a, B> {
    pub model: &'a DynamicsModel,
    pub params: &'a [B],
    h: Range<usize>,
    z: Range<usize>,
    r: Range<usize>,
    node: Range<usize>,
    spec_h: Option<&'a MlpSpec>,
    spec_z: Option<&'a MlpSpec>,
    spec_r: Option<&'a MlpSpec>,
    spec_node: Option<&'a MlpSpec>,
}

impl<B: Copy> Energy<B> for BoundModel<'_, B> {
    fn hamiltonian<T: Scalar<Base = B>>(&self, x: State<T>) -> T {
        match self.spec_h {
            Some(spec) => hamiltonian_value(spec, &self.params[self.h.clone()], x),
            None => T::zero(),
        }
    }
}

impl<B: Copy> SForm<B> for BoundModel<'_, B> {
    fn s_matrix(&self) -> [[f64; 4]; 4] {
        self.model.s
    }

    fn dissipation<T: Scalar<Base = B>>(&self, w: T) -> T {
        z_head_scalar(self.spec_z.expect("PHNN-S head"), &self.params[self.z.clone()], w)
    }
}

impl<B: Copy> JrForm<B> for BoundModel<'_, B> {
    fn j_matrix(&self) -> [[f64; 3]; 3] {
        self.model.j
    }

    fn resistance<T: Scalar<Base = B>>(&self, x: State<T>, u: T) -> [[T; 3]; 3] {
        r_head(self.spec_r.expect("PHNN-JR head"), &self.params[self.r.clone()], x, u)
    }
}

impl<B: Copy> Dynamics<B> for BoundModel<'_, B> {
    fn flow<T: Scalar<Base = B>>(&self, x: State<T>, u: T) -> Flow<T> {
        match self.model.kind {
            ModelKind::Node => {
                let out = self.spec_node.expect("NODE head").apply(&self.params[self.node.clone()], &[x[0], x[1], u]);
                Flow {
                    xdot: [out[0], out[1]],
                    w: None,
                    y: None,
                }
            }
            ModelKind::PhnnS => s_form_flow(self, x, u),
            ModelKind::PhnnJr => jr_form_flow(self, x, u),
        }
    }
}

impl<B: Copy> DgSystem<B> for BoundModel<'_, B> {
    fn dg_ports<T: Scalar<Base = B>>(&self, x: State<T>, dx: State<T>, u: T, g: State<T>) -> (State<T>, Option<T>, Option<T>) {
        match self.model.kind {
            ModelKind::PhnnS => AsS(self).dg_ports(x, dx, u, g),
            ModelKind::PhnnJr => AsJr(self).dg_ports(x, dx, u, g),
            ModelKind::Node => panic!("the NODE baseline has no discrete gradient"),
        }
    }
}

impl<'a, B: Copy> BoundModel<'a, B> {
    pub fn eval_f<T: Scalar<Base = B>>(&self, x: State<T>, u: T) -> Flow<T> {
        self.flow(x, u)
    }

    /// `J_f(x, u) = ∂ẋ/∂x`, one forward-mode pass per column.
    pub fn state_jacobian<T: Scalar<Base = B>>(&self, x: State<T>, u: T) -> [[T; 2]; 2] {
        let ud = Dual::new(u, T::zero());
        let mut jac = [[T::zero(); 2]; 2];
        for col in 0..2 {
            let xd = std::array::from_fn(|i| Dual::new(x[i], T::constant(if i == col { 1.0 } else { 0.0 })));
            let f = self.flow(xd, ud).xdot;
            jac[0][col] = f[0].eps;
            jac[1][col] = f[1].eps;
        }
        jac
    }
}

fn check_scheme(kind: ModelKind, cfg: &StepperConfig) -> Result<()> {
    if kind == ModelKind::Node && cfg.scheme == Scheme::Dg {
        return Err(Error::Config("the NODE baseline is only stepped with RK2".into()));
    }
    Ok(())
}

impl BoundModel<'_, f64> {
    /// Discrete step `g_{θ,h}(x, u)`.
    pub fn eval_g(&self, x: State<f64>, u: f64, cfg: &StepperConfig) -> Result<StepResult> {
        check_scheme(self.model.kind, cfg)?;
        match cfg.scheme {
            Scheme::Rk2 => rk2_step_checked(self, x, u, cfg.h),
            Scheme::Dg => dg_step(self, x, u, cfg),
        }
    }
}

/// Taped discrete step; `value` and `tape` must bind the same parameter values.
pub fn eval_g_taped<'t>(
    value: &BoundModel<'_, f64>,
    tape: &BoundModel<'_, Var<'t>>,
    x: State<Var<'t>>,
    u: Var<'t>,
    cfg: &StepperConfig,
) -> Result<State<Var<'t>>> {
    check_scheme(value.model.kind, cfg)?;
    match cfg.scheme {
        Scheme::Rk2 => Ok(rk2_step(tape, x, u, cfg.h)),
        Scheme::Dg => dg_step_taped(value, tape, x, u, cfg),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegularizerKind {
    #[serde(rename = "BL")]
    None,
    #[serde(rename = "SN")]
    SpectralNorm,
    #[serde(rename = "CN")]
    ConditionNumber,
    #[serde(rename = "SR")]
    StiffnessRatio,
}

impl RegularizerKind {
    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::None => "BL",
            RegularizerKind::SpectralNorm => "SN",
            RegularizerKind::ConditionNumber => "CN",
            RegularizerKind::StiffnessRatio => "SR",
        }
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            RegularizerKind::None => 0.0,
            RegularizerKind::SpectralNorm | RegularizerKind::ConditionNumber => 1e-6,
            RegularizerKind::StiffnessRatio => 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub kind: RegularizerKind,
    pub lambda: f64,
}

impl Regularizer {
    pub fn new(kind: RegularizerKind) -> Self {
        Regularizer {
            kind,
            lambda: kind.default_lambda(),
        }
    }

    pub fn is_active(&self) -> bool {
        self.kind != RegularizerKind::None && self.lambda != 0.0
    }
}

/// Denominator guard of the ratio penalties.
pub const PENALTY_EPS: f64 = 1e-6;

/// `(σ_max, σ_min)` of a 2×2 matrix.
pub fn singular_values<T: Scalar>(m: [[T; 2]; 2]) -> (T, T) {
    let [[a, b], [c, d]] = m;
    let s1 = ((a + d).square() + (c - b).square()).sqrt();
    let s2 = ((a - d).square() + (b + c).square()).sqrt();
    ((s1 + s2) * 0.5, (s1 - s2).abs() * 0.5)
}

/// `(max |Re λ|, min |Re λ|)` of a 2×2 matrix.
pub fn eigen_real_magnitudes<T: Scalar>(m: [[T; 2]; 2]) -> (T, T) {
    let [[a, b], [c, d]] = m;
    let tr = a + d;
    let det = a * d - b * c;
    let disc = tr * tr - det * 4.0;
    if disc.value() < 0.0 {
        let re = tr.abs() * 0.5;
        return (re, re);
    }
    let big = (tr.abs() + disc.sqrt()) * 0.5;
    if big.value() == 0.0 {
        return (big, big);
    }
    (big, det.abs() / big)
}

/// Regularisation term of one Jacobian.
pub fn jacobian_penalty<T: Scalar>(jac: [[T; 2]; 2], kind: RegularizerKind) -> T {
    match kind {
        RegularizerKind::None => T::zero(),
        RegularizerKind::SpectralNorm => singular_values(jac).0,
        RegularizerKind::ConditionNumber => {
            let (hi, lo) = singular_values(jac);
            (hi / (lo + PENALTY_EPS)).square()
        }
        RegularizerKind::StiffnessRatio => {
            let (hi, lo) = eigen_real_magnitudes(jac);
            (hi / (lo + PENALTY_EPS) - 1.0).square()
        }
    }
}

/// Unpenalised `(σ_max, κ, ρ)` of a Jacobian, for logging.
pub fn jacobian_metrics(jac: [[f64; 2]; 2]) -> (f64, f64, f64) {
    let (hi, lo) = singular_values(jac);
    let (ehi, elo) = eigen_real_magnitudes(jac);
    (hi, hi / lo, ehi / elo)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub size: NetSize,
    pub system: OscillatorKind,
    pub nets: Vec<NamedNet>,
    pub s: [[f64; 4]; 4],
    pub j: [[f64; 3]; 3],
    pub segments: Vec<crate::autodiff::Segment>,
    pub seed: u64,
    pub step: u64,
}

/// JSON header line followed by raw little-endian `f64` parameters.
pub fn save_checkpoint(path: &Path, model: &DynamicsModel, seed: u64, step: u64) -> Result<()> {
    let header = CheckpointHeader {
        kind: model.kind,
        size: model.size,
        system: model.system,
        nets: model.nets.clone(),
        s: model.s,
        j: model.j,
        segments: model.params.layout.clone(),
        seed,
        step,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for v in &model.params.values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DynamicsModel, CheckpointHeader)> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end()).map_err(|e| Error::parse(1, e.to_string()))?;
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let n: usize = header.segments.iter().map(|s| s.len).sum();
    if bytes.len() != 8 * n {
        return Err(Error::ShapeMismatch {
            expected: 8 * n,
            actual: bytes.len(),
        });
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let model = DynamicsModel {
        kind: header.kind,
        size: header.size,
        system: header.system,
        nets: header.nets.clone(),
        s: header.s,
        j: header.j,
        params: ParamVector {
            values,
            layout: header.segments.clone(),
        },
    };
    model.validate()?;
    Ok((model, header))
}
