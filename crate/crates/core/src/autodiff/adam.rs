use serde::{Deserialize, Serialize};

use super::ParamVector;
use crate::error::{Error, Result};

/// Adam optimizer state with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            learning_rate,
        }
    }

    /// In-place update; parameters are left untouched on error.
    pub fn step(&mut self, params: &mut ParamVector, grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::ShapeMismatch {
                expected: params.len(),
                actual: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            let segment = params.segment_of(i).map_or_else(|| format!("#{i}"), |s| s.name.clone());
            return Err(Error::NonFiniteGradient { segment });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .values
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(p: &ParamVector, g: &[f64], s: &AdamState) -> Result<(ParamVector, AdamState)> {
    let mut p = p.clone();
    let mut s = s.clone();
    s.step(&mut p, g)?;
    Ok((p, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParamVector {
        let mut p = ParamVector::default();
        p.push_segment("w", &[v]);
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let p = scalar(0.5);
        let s = AdamState::new(1, 1e-3);
        let (p2, s2) = adam_step(&p, &[0.0], &s).unwrap();
        assert_eq!(p2.values, p.values);
        assert_eq!(s2.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 at t = 1, so the step is lr * g / (|g| + eps).
        let (p2, _) = adam_step(&scalar(0.0), &[1.0], &AdamState::new(1, 1e-3)).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p2.values[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let mut p = ParamVector::default();
        p.push_segment("a", &[0.3, 0.3]);
        let mut s = AdamState::new(2, 1e-2);
        for k in 0..5 {
            let g = [0.1 * k as f64 - 0.2; 2];
            s.step(&mut p, &g).unwrap();
            assert_eq!(p.values[0].to_bits(), p.values[1].to_bits());
        }
    }

    #[test]
    fn non_finite_gradient_names_segment() {
        let mut p = ParamVector::default();
        p.push_segment("head", &[1.0]);
        p.push_segment("tail", &[1.0, 2.0]);
        let s = AdamState::new(3, 1e-3);
        let err = adam_step(&p, &[0.0, f64::NAN, 0.0], &s).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref segment } if segment == "tail"));
    }
}
