//! Adam optimizer with bias correction, plus global-norm gradient clipping.

use super::{Scalar, Tensor, TensorError};

/// Per-parameter first/second moment buffers and the shared step counter.
pub struct AdamState<T> {
    params: Vec<Tensor<T>>,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
    step_count: u64,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: Vec<Tensor<T>>, learning_rate: T) -> Self {
        let first_moment = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        let second_moment = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        AdamState {
            params,
            first_moment,
            second_moment,
            step_count: 0,
            learning_rate,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    /// One Adam update over all managed parameters. Every parameter must
    /// hold a gradient from a preceding backward pass.
    pub fn step(&mut self) -> Result<(), TensorError> {
        for p in &self.params {
            if p.inner.borrow().grad.is_none() {
                return Err(TensorError::Contract(format!(
                    "adam step on parameter {:?} with no gradient",
                    p.shape()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = T::one() - self.beta1.powi(t);
        let bias2 = T::one() - self.beta2.powi(t);
        let one = T::one();

        for (idx, p) in self.params.iter().enumerate() {
            let mut d = p.inner.borrow_mut();
            let grad = d.grad.take().expect("checked above");
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (one - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (one - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                d.data[i] = d.data[i] - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            d.grad = Some(grad);
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the norm before clipping. Parameters without a gradient are
/// treated as zero-gradient and skipped.
pub fn clip_grad_norm<T: Scalar>(params: &[Tensor<T>], max_norm: T) -> T {
    let mut sq = T::zero();
    for p in params {
        if let Some(g) = p.inner.borrow().grad.as_ref() {
            for &v in g {
                sq = sq + v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > T::zero() {
        let scale = max_norm / norm;
        for p in params {
            if let Some(g) = p.inner.borrow_mut().grad.as_mut() {
                for v in g.iter_mut() {
                    *v = *v * scale;
                }
            }
        }
    }
    norm
}
