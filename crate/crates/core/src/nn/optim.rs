//! Bias-corrected Adam.

use super::matrix::Matrix;
use super::NnError;

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Result<Self, NnError> {
        Self::with_betas(lr, 0.9, 0.999, 1e-8, shapes)
    }

    pub fn with_betas(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        shapes: &[(usize, usize)],
    ) -> Result<Self, NnError> {
        if lr <= 0.0 {
            return Err(NnError::BadLearningRate(lr));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        })
    }

    /// One update over all parameter tensors. `grads[i]` may be `None` when a
    /// parameter did not participate in the loss; its moments still decay.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Option<Matrix>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count mismatch");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, param) in params.iter_mut().enumerate() {
            let zero;
            let grad = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = Matrix::zeros(param.rows(), param.cols());
                    &zero
                }
            };
            assert_eq!(grad.shape(), param.shape(), "gradient shape mismatch");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for idx in 0..param.data().len() {
                let g = grad.data()[idx];
                let m_new = self.beta1 * m.data()[idx] + (1.0 - self.beta1) * g;
                let v_new = self.beta2 * v.data()[idx] + (1.0 - self.beta2) * g * g;
                m.data_mut()[idx] = m_new;
                v.data_mut()[idx] = v_new;
                let m_hat = m_new / bc1;
                let v_hat = v_new / bc2;
                param.data_mut()[idx] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive_learning_rate() {
        assert!(matches!(
            Adam::new(0.0, &[(1, 1)]),
            Err(NnError::BadLearningRate(_))
        ));
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut adam = Adam::new(1e-3, &[(1, 1)]).unwrap();
        let mut p = Matrix::scalar(0.5);
        adam.step(&mut [&mut p], &[Some(Matrix::scalar(1.0))]);
        let delta = (0.5 - p.scalar_value()).abs();
        assert!((delta - 1e-3).abs() < 1e-6, "first-step size {delta}");
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = Adam::new(1e-2, &[(2, 2)]).unwrap();
        let mut p = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let before = p.clone();
        adam.step(&mut [&mut p], &[Some(Matrix::zeros(2, 2))]);
        assert_eq!(p, before);
        adam.step(&mut [&mut p], &[None]);
        assert_eq!(p, before);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut adam = Adam::new(1e-2, &[(1, 1)]).unwrap();
            let mut p = Matrix::scalar(1.0);
            for i in 0..10 {
                adam.step(&mut [&mut p], &[Some(Matrix::scalar((i as f64).sin()))]);
            }
            p.scalar_value()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
