//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

/// Storage type of a trainable tensor; moments and arithmetic are `f64`.
pub trait Param: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;
}

impl Param for f32 {
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

impl Param for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(x: f64) -> Self {
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update of `params`. The tensor's own step count (kept in
    /// `moments`) drives bias correction. Weight decay scales the parameter
    /// by `1 - lr * weight_decay` before the moment-based step.
    pub fn update<P: Param>(&self, params: &mut [P], grads: &[f64], moments: &mut Moments) {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter/gradient length mismatch"
        );
        assert_eq!(
            params.len(),
            moments.first.len(),
            "moment buffer length mismatch"
        );
        moments.steps += 1;
        let t = moments.steps;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(moments.first.iter_mut())
            .zip(moments.second.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            let x = p.to_f64() * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            *p = P::from_f64(x);
        }
    }
}

/// First and second moment buffers of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    /// Updates applied so far.
    pub steps: u64,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
        }
    }
}
