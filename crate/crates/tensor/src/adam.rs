use crate::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    t: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            t: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), TensorError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TensorError::Shape {
                op: "adam_step",
                lhs: vec![self.first.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let grads = vec![Tensor::vector(vec![0.3, -4.0, 0.0])];
        let mut opt = Adam::new(AdamConfig::default(), &params);
        opt.step(&mut params, &grads).unwrap();
        let p = params[0].data();
        // t = 1: mhat = g, vhat = g^2, so the step is lr * g / (|g| + eps)
        let expect = |x0: f64, g: f64| x0 - 1e-3 * g / (g.abs() + 1e-8);
        assert_eq!(p[0], expect(1.0, 0.3));
        assert_eq!(p[1], expect(-2.0, -4.0));
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((p[1] - (-2.0 + 1e-3)).abs() < 1e-10);
        assert_eq!(p[2], 0.5);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]])];
        let before = params.clone();
        let grads = vec![Tensor::zeros(&[2, 2])];
        let mut opt = Adam::new(AdamConfig::default(), &params);
        for _ in 0..3 {
            opt.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut params = vec![Tensor::vector(vec![0.1, 0.2, 0.3])];
            let mut opt = Adam::new(AdamConfig::default(), &params);
            for k in 0..10 {
                let g = Tensor::vector(vec![k as f64 * 0.1 - 0.3, 0.7, -0.01 * k as f64]);
                opt.step(&mut params, &[g]).unwrap();
            }
            (params, opt)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut opt = Adam::new(AdamConfig::default(), &params);
        let err = opt.step(&mut params, &[Tensor::zeros(&[3])]).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }));
    }
}
