use serde::{Deserialize, Serialize};

use super::DenseArray;
use crate::{Error, Result};

/// Bias-corrected Adam.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    first_moment: Vec<DenseArray>,
    second_moment: Vec<DenseArray>,
}

impl AdamState {
    /// Standard defaults (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`) for the given parameters.
    pub fn new(lr: f64, params: &[DenseArray]) -> Result<Self> {
        Self::with_hyper(lr, 0.9, 0.999, 1e-8, params)
    }

    pub fn with_hyper(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[DenseArray]) -> Result<Self> {
        if !(lr > 0.0 && eps > 0.0) || !(0.0 < beta1 && beta1 < 1.0) || !(0.0 < beta2 && beta2 < 1.0) {
            return Err(Error::InvalidInput(format!(
                "invalid Adam hyper-parameters lr={lr} beta1={beta1} beta2={beta2} eps={eps}"
            )));
        }
        let zeros: Vec<DenseArray> = params.iter().map(|p| DenseArray::zeros(p.shape())).collect();
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[DenseArray] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[DenseArray] {
        &self.second_moment
    }

    /// Applies one update in place. Shapes are validated before anything is touched.
    pub fn step(&mut self, params: &mut [DenseArray], grads: &[DenseArray]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::shape(
                format!("{} parameter arrays", self.first_moment.len()),
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            p.check_same_shape(m)?;
            g.check_same_shape(m)?;
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            let (p, g, m, v) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut params = vec![DenseArray::vector(vec![0.5])];
        let mut adam = AdamState::new(1e-3, &params).unwrap();
        adam.step(&mut params, &[DenseArray::vector(vec![1.0])]).unwrap();
        let expected = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((params[0][0] - expected).abs() < 1e-15);
        assert!((params[0][0] - 0.5 + 1e-3).abs() < 1e-9);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op_except_for_the_counter() {
        let mut params = vec![DenseArray::vector(vec![1.0, -2.0])];
        let mut adam = AdamState::new(1e-2, &params).unwrap();
        let before = params.clone();
        adam.step(&mut params, &[DenseArray::vector(vec![0.0, 0.0])]).unwrap();
        assert_eq!(params, before);
        assert!(adam.first_moment()[0].as_slice().iter().all(|&m| m == 0.0));
        assert!(adam.second_moment()[0].as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn opposite_gradients_give_opposite_steps() {
        let mut params = vec![DenseArray::vector(vec![0.0, 0.0])];
        let mut adam = AdamState::new(1e-3, &params).unwrap();
        let g = [DenseArray::vector(vec![1.0, -1.0])];
        for _ in 0..2 {
            let before = params[0].clone();
            adam.step(&mut params, &g).unwrap();
            let d0 = params[0][0] - before[0];
            let d1 = params[0][1] - before[1];
            assert!(d0 < 0.0 && d1 > 0.0);
            assert!((d0 + d1).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![DenseArray::vector(vec![0.0, 0.0])];
        let mut adam = AdamState::new(1e-3, &params).unwrap();
        assert!(adam.step(&mut params, &[DenseArray::vector(vec![1.0])]).is_err());
        assert_eq!(adam.step_count(), 0);
    }
}
