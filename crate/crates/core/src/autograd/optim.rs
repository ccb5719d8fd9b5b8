use serde::{Deserialize, Serialize};

use super::{AutogradError, Param};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

/// Adam with bias correction over a fixed, ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Param]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held by `params`.
    /// Gradients are left in place.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<(), AutogradError> {
        if params.len() != self.m.len() {
            return Err(AutogradError::Shape {
                op: "adam",
                lhs: vec![self.m.len()],
                rhs: vec![params.len()],
            });
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.value.len() != m.len() {
                return Err(AutogradError::Shape {
                    op: "adam",
                    lhs: vec![m.len()],
                    rhs: p.value.shape().to_vec(),
                });
            }
            if p.grad().iter().any(|g| !g.is_finite()) {
                return Err(AutogradError::NonFinite { op: "adam" });
            }
        }
        let mut scale = 1.0;
        if let Some(max) = self.config.clip_norm {
            let norm = params
                .iter()
                .flat_map(|p| p.grad().iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                scale = max / norm;
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().to_vec();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let g = grad[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Param::new("w", Tensor::row(vec![1.0, -2.0]));
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Param::new("w", Tensor::row(vec![0.0, 0.0]));
        p.grad_mut().copy_from_slice(&[0.3, -5.0]);
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        opt.step(&mut [&mut p]).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε).
        for (w, g) in p.value.data().iter().zip([0.3f64, -5.0]) {
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        }
    }

    #[test]
    fn cloned_state_is_deterministic() {
        let mut a = Param::new("w", Tensor::row(vec![0.5]));
        a.grad_mut()[0] = 0.2;
        let mut b = a.clone();
        let mut opt = Adam::new(AdamConfig::default(), &[&a]);
        opt.step(&mut [&mut a]).unwrap();
        let mut opt2 = opt.clone();
        let mut opt1 = opt;
        opt1.step(&mut [&mut a]).unwrap();
        b.value = Tensor::row(vec![a.value.data()[0]]);
        let mut c = b.clone();
        let mut opt3 = opt2.clone();
        opt2.step(&mut [&mut b]).unwrap();
        opt3.step(&mut [&mut c]).unwrap();
        assert_eq!(b.value.data()[0].to_bits(), c.value.data()[0].to_bits());
    }

    #[test]
    fn rejects_mismatched_list() {
        let mut p = Param::new("w", Tensor::row(vec![0.5]));
        let q = Param::new("q", Tensor::row(vec![0.5, 1.0]));
        let mut opt = Adam::new(AdamConfig::default(), &[&q]);
        assert!(opt.step(&mut [&mut p]).is_err());
    }
}
