//! Adam optimizer with bias correction.

use crate::error::CoreError;
use crate::params::ParamStore;
use crate::scalar::{fl, Scalar};
use crate::tensor::Tensor;
use crate::Result;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Per-block first/second moment state plus the shared step counter.
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, learning_rate: f64) -> Self {
        Adam {
            lr: fl(learning_rate),
            beta1: fl(DEFAULT_BETA1),
            beta2: fl(DEFAULT_BETA2),
            eps: fl(DEFAULT_EPS),
            step: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }

    pub fn step_count(&self) -> i32 {
        self.step
    }

    /// One update over all blocks; `grads` must align with the store order.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(CoreError::shape(
                "adam_step",
                format!("{} gradient blocks for {} parameter blocks", grads.len(), self.m.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensor(i).shape() {
                return Err(CoreError::shape(
                    "adam_step",
                    format!(
                        "block {} ({}): gradient {:?} vs parameter {:?}",
                        i,
                        params.name(i),
                        g.shape(),
                        params.tensor(i).shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(i).data_mut();
            for e in 0..g.numel() {
                let grad = g.data()[e];
                m[e] = self.beta1 * m[e] + (T::one() - self.beta1) * grad;
                v[e] = self.beta2 * v[e] + (T::one() - self.beta2) * grad * grad;
                let m_hat = m[e] / bc1;
                let v_hat = v[e] / bc2;
                p[e] = p[e] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(x: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(x));
        store
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = single_param(0.7);
        let mut opt = Adam::new(&p, 0.1);
        opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.tensor(0).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_roughly_lr_times_sign() {
        // With bias correction, step 1 gives m_hat = g, v_hat = g^2, so the
        // update is lr * g / (|g| + eps) ~= lr * sign(g).
        let mut p = single_param(1.0);
        let mut opt = Adam::new(&p, 0.05);
        opt.step(&mut p, &[Tensor::scalar(3.0)]).unwrap();
        let moved = 1.0 - p.tensor(0).item();
        assert!((moved - 0.05).abs() < 1e-7, "moved {moved}");

        let mut p = single_param(1.0);
        let mut opt = Adam::new(&p, 0.05);
        opt.step(&mut p, &[Tensor::scalar(-0.25)]).unwrap();
        let moved = p.tensor(0).item() - 1.0;
        assert!((moved - 0.05).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn descends_quadratic_monotonically() {
        // f(x) = x^2 from x = 1 at lr 0.1: |x| must strictly decrease for 10
        // steps.
        let mut p = single_param(1.0);
        let mut opt = Adam::new(&p, 0.1);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let x = p.tensor(0).item();
            opt.step(&mut p, &[Tensor::scalar(2.0 * x)]).unwrap();
            let next = p.tensor(0).item().abs();
            assert!(next < prev, "|x| rose from {prev} to {next}");
            prev = next;
        }
    }

    #[test]
    fn rejects_mismatched_gradient_shape() {
        let mut p = single_param(1.0);
        let mut opt = Adam::new(&p, 0.1);
        let bad = Tensor::<f64>::zeros(&[2]);
        assert!(opt.step(&mut p, &[bad]).is_err());
    }
}
