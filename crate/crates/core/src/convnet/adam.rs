use std::ops::Range;

use super::scalar::Scalar;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(param_count: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Update `params` in place. With `frozen` given, those index ranges keep
    /// their values and moments.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [T],
        grads: &[T],
        learning_rate: f64,
        frozen: &[Range<usize>],
    ) {
        assert_eq!(params.len(), self.m.len(), "optimizer state size mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient size mismatch");
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            if frozen.iter().any(|r| r.contains(&i)) {
                continue;
            }
            let g = grads[i].as_f64();
            let m = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let update = learning_rate * (m / c1) / ((v / c2).sqrt() + self.epsilon);
            params[i] = T::from_f64_lossy(params[i].as_f64() - update);
        }
    }
}
