use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.beta1, self.beta2, self.eps];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite())
            || self.beta1 >= 1.0
            || self.beta2 >= 1.0
            || !(self.weight_decay >= 0.0)
        {
            return Err(TensorError::Usage(format!("invalid AdamW hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` (always passed in the same order) and
    /// clears their gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(TensorError::Usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(TensorError::Usage(format!("parameter {i} has no gradient")));
            }
            if p.numel() != self.m[i].len() {
                return Err(TensorError::Shape { op: "adamw", lhs: p.shape().to_vec(), rhs: vec![self.m[i].len()] });
            }
        }
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().map(<[f32]>::to_vec).unwrap_or_default();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.ensure_finite("adamw")?;
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(data: Vec<f32>, grad: Vec<f32>) -> Tensor<f32> {
        let mut t = Tensor::new(vec![data.len()], data).unwrap();
        t.set_requires_grad(true);
        t.accumulate_grad(&grad).unwrap();
        t
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }).unwrap();
        let mut p = param(vec![0.5, -1.5], vec![0.0, 0.0]);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[0.5, -1.5]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 1e-2;
        let mut opt = AdamW::new(AdamWConfig { lr, weight_decay: 0.0, ..Default::default() }).unwrap();
        let mut p = param(vec![1.0, 1.0, 1.0], vec![0.3, -4.0, 1e-3]);
        opt.step(&mut [&mut p]).unwrap();
        for (w, s) in p.data().iter().zip([-1.0f32, 1.0, -1.0]) {
            assert!((w - (1.0 + lr * s)).abs() < 1e-5, "{w}");
        }
    }

    #[test]
    fn pure_decay_scales_parameters() {
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.01, ..Default::default() }).unwrap();
        let mut p = param(vec![2.0, -4.0], vec![0.0, 0.0]);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 2.0 * 0.999).abs() < 1e-7);
        assert!((p.data()[1] + 4.0 * 0.999).abs() < 1e-7);
    }

    #[test]
    fn missing_gradient_is_a_usage_error() {
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        let mut p = Tensor::<f32>::zeros(vec![2]);
        p.set_requires_grad(true);
        assert!(matches!(opt.step(&mut [&mut p]), Err(TensorError::Usage(_))));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() }).is_err());
        assert!(AdamW::new(AdamWConfig { weight_decay: -1.0, ..Default::default() }).is_err());
    }
}
