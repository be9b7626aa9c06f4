//! AdaMod optimizer: adaptive rates with a long-term memory that clips
//! each step's effective learning rate from above.

use crate::error::{Error, Result};
use crate::tensor::Tensor5;

#[derive(Debug, Clone, Copy)]
pub struct AdaModConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Long-term rate memory; 0 reduces min(eta, s) to the plain adaptive
    /// step.
    pub beta3: f64,
    pub eps: f64,
}

impl Default for AdaModConfig {
    fn default() -> Self {
        AdaModConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, beta3: 0.9999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdaMod {
    pub config: AdaModConfig,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
}

impl AdaMod {
    pub fn new(config: AdaModConfig, param_sizes: &[usize]) -> Self {
        AdaMod {
            config,
            step_count: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            s: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over all parameters. A non-finite gradient anywhere
    /// skips the whole step and returns `false`.
    pub fn step(&mut self, params: &mut [Tensor5], grads: &[Vec<f64>]) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::Shape("gradient/parameter size mismatch".into()));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (pi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v, s) = (&mut self.m[pi], &mut self.v[pi], &mut self.s[pi]);
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let eta = c.lr / (v_hat.sqrt() + c.eps);
                s[i] = c.beta3 * s[i] + (1.0 - c.beta3) * eta;
                p.data[i] -= eta.min(s[i]) * m_hat;
            }
        }
        Ok(true)
    }
}
