//! Multilayer perceptrons and the structure-enforcing heads built on them.
//!
//! Every head is generic over [`Scalar`], so the same code evaluates plain
//! values, records a tape, or propagates state tangents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_gradient, Scalar};
use crate::error::{Error, Result};

/// Shift added to `LᵀL` in the Hamiltonian so that `Q` is positive definite.
pub const Q_SHIFT: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, output_dim: usize, hidden_units: usize, hidden_layers: usize) -> Self {
        MlpSpec {
            input_dim,
            output_dim,
            hidden_units,
            hidden_layers,
            activation: Activation::Tanh,
        }
    }

    /// `(fan_in, fan_out)` of each affine layer; empty when the output is empty.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        if self.output_dim == 0 {
            return Vec::new();
        }
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            shapes.push((fan_in, self.hidden_units));
            fan_in = self.hidden_units;
        }
        shapes.push((fan_in, self.output_dim));
        shapes
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 {
            return Err(Error::Config("an MLP needs at least one hidden layer".into()));
        }
        Ok(())
    }

    /// Forward pass without dimension checks.
    pub fn apply<T: Scalar>(&self, params: &[T::Base], x: &[T]) -> Vec<T> {
        let shapes = self.layer_shapes();
        let mut offset = 0;
        let mut act: Vec<T> = x.to_vec();
        let last = shapes.len().saturating_sub(1);
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &params[offset..offset + fan_in * fan_out];
            offset += fan_in * fan_out;
            let b = &params[offset..offset + fan_out];
            offset += fan_out;
            let mut next = Vec::with_capacity(fan_out);
            T::linear(w, Some(b), &act, fan_out, &mut next);
            if l != last {
                match self.activation {
                    Activation::Tanh => next.iter_mut().for_each(|v| *v = v.tanh()),
                }
            }
            act = next;
        }
        if shapes.is_empty() {
            act.clear();
        }
        act
    }
}

/// Checked forward pass.
pub fn mlp_forward<T: Scalar>(spec: &MlpSpec, params: &[T::Base], x: &[T]) -> Result<Vec<T>> {
    if x.len() != spec.input_dim {
        return Err(Error::ShapeMismatch {
            expected: spec.input_dim,
            actual: x.len(),
        });
    }
    if params.len() != spec.n_params() {
        return Err(Error::ShapeMismatch {
            expected: spec.n_params(),
            actual: params.len(),
        });
    }
    Ok(spec.apply(params, x))
}

/// Number of packed entries of an `n x n` (strictly) lower-triangular matrix.
pub fn packed_len(n: usize, strict: bool) -> usize {
    if strict {
        n * n.saturating_sub(1) / 2
    } else {
        n * (n + 1) / 2
    }
}

/// Row-major fill of the (strictly) lower triangle.
pub fn assemble_lower_triangular<T: Scalar>(v: &[T], n: usize, strict: bool) -> Result<Vec<Vec<T>>> {
    if v.len() != packed_len(n, strict) {
        return Err(Error::ShapeMismatch {
            expected: packed_len(n, strict),
            actual: v.len(),
        });
    }
    let mut m = vec![vec![T::zero(); n]; n];
    let mut k = 0;
    for (i, row) in m.iter_mut().enumerate() {
        let end = if strict { i } else { i + 1 };
        for entry in row.iter_mut().take(end) {
            *entry = v[k];
            k += 1;
        }
    }
    Ok(m)
}

/// `LᵀL` for a square matrix given by rows.
fn gram<T: Scalar>(l: &[Vec<T>]) -> Vec<Vec<T>> {
    let n = l.len();
    let mut g = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        for j in i..n {
            let mut acc = T::zero();
            for row in l {
                acc = acc + row[i] * row[j];
            }
            g[i][j] = acc;
            g[j][i] = acc;
        }
    }
    g
}

/// Learned Hamiltonian `½ xᵀ (L(x)ᵀL(x) + εI) x` for a 2-dimensional state.
pub fn hamiltonian_value<T: Scalar>(spec: &MlpSpec, p: &[T::Base], x: [T; 2]) -> T {
    let l = spec.apply(p, &x);
    // L x with L = [[l0, 0], [l1, l2]]
    let a = l[0] * x[0];
    let b = l[1] * x[0] + l[2] * x[1];
    (a * a + b * b + (x[0] * x[0] + x[1] * x[1]) * Q_SHIFT) * 0.5
}

/// `(H, ∇H)` with the gradient taken by forward-mode differentiation of
/// [`hamiltonian_value`], so it is exact for the implemented `H` and stays
/// differentiable in the parameters.
pub fn hamiltonian_head<T: Scalar>(spec: &MlpSpec, p: &[T::Base], x: [T; 2]) -> (T, [T; 2]) {
    let h = hamiltonian_value(spec, p, x);
    let g = forward_gradient(|xd| hamiltonian_value(spec, p, xd), x);
    (h, g)
}

/// Dissipation law `z(w) = (L(w)ᵀL(w) + K(w) − K(w)ᵀ) w`.
pub fn z_head<T: Scalar>(l_spec: &MlpSpec, k_spec: &MlpSpec, p_l: &[T::Base], p_k: &[T::Base], w: &[T]) -> Vec<T> {
    let n = w.len();
    let l = assemble_lower_triangular(&l_spec.apply(p_l, w), n, false).expect("L_z output width must be n(n+1)/2");
    let k_out = k_spec.apply(p_k, w);
    let k = if k_out.is_empty() {
        vec![vec![T::zero(); n]; n]
    } else {
        assemble_lower_triangular(&k_out, n, true).expect("K_z output width must be n(n-1)/2")
    };
    let g = gram(&l);
    (0..n)
        .map(|i| {
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + (g[i][j] + k[i][j] - k[j][i]) * w[j];
            }
            acc
        })
        .collect()
}

/// Scalar-flow specialisation of [`z_head`]: `z(w) = L(w)² w`.
pub fn z_head_scalar<T: Scalar>(l_spec: &MlpSpec, p_l: &[T::Base], w: T) -> T {
    let l = l_spec.apply(p_l, &[w])[0];
    l * l * w
}

/// Resistive matrix `R = L_R(x, u)ᵀ L_R(x, u)` of order `n_x + n_u = 3`.
pub fn r_head<T: Scalar>(spec: &MlpSpec, p: &[T::Base], x: [T; 2], u: T) -> [[T; 3]; 3] {
    let out = spec.apply(p, &[x[0], x[1], u]);
    let l = assemble_lower_triangular(&out, 3, false).expect("L_R output width must be 6");
    let g = gram(&l);
    std::array::from_fn(|i| std::array::from_fn(|j| g[i][j]))
}

/// Uniform(−1/√fan_in, 1/√fan_in) weights and zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.n_params());
    for (fan_in, fan_out) in spec.layer_shapes() {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        out.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
        out.extend(std::iter::repeat_n(0.0, fan_out));
    }
    out
}
