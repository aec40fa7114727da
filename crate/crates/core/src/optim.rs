//! Adam with global gradient-norm clipping.

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{contract, Result};
use crate::nn::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: 10.0,
        }
    }
}

/// Moment estimates keyed by parameter name, in [`ParamSet`] order.
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Result<Self> {
        let mut names = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, var) in params.iter() {
            names.push(name.clone());
            m.push(var.as_tensor().zeros_like()?);
            v.push(var.as_tensor().zeros_like()?);
        }
        Ok(Self { cfg, step: 0, names, m, v })
    }

    /// Apply one update; returns the gradient norm before clipping.
    /// Parameters without a gradient are treated as having gradient zero.
    pub fn apply(&mut self, params: &ParamSet, grads: &GradStore) -> Result<f64> {
        if params.len() != self.names.len() {
            return Err(contract("optimizer and parameter set disagree"));
        }
        let mut gs = Vec::with_capacity(self.names.len());
        let mut sq = 0.0;
        for (name, var) in params.iter() {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => var.as_tensor().zeros_like()?,
            };
            sq += g.sqr()?.sum_all()?.to_scalar::<f64>()?;
            gs.push((name, var, g));
        }
        let norm = sq.sqrt();
        let scale = if norm > self.cfg.max_grad_norm { self.cfg.max_grad_norm / norm } else { 1.0 };
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, (name, var, g)) in gs.into_iter().enumerate() {
            if *name != self.names[k] {
                return Err(contract(format!("optimizer slot {k} is {}, parameter is {name}", self.names[k])));
            }
            let g = (g * scale)?;
            self.m[k] = ((&self.m[k] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            self.v[k] = ((&self.v[k] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&self.m[k] / bc1)?;
            let v_hat = (&self.v[k] / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            var.set(&(var.as_tensor() - (update * c.lr)?)?)?;
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;
    use candle_core::Var;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut ps = ParamSet::new();
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &device()).unwrap()).unwrap();
        ps.insert("x".into(), x.clone()).unwrap();
        let mut opt = Adam::new(&ps, AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let norm = opt.apply(&ps, &grads).unwrap();
        assert!((norm - 20f64.sqrt()).abs() < 1e-12);
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut ps = ParamSet::new();
        let x = Var::from_tensor(&Tensor::new(&[100.0f64], &device()).unwrap()).unwrap();
        ps.insert("x".into(), x.clone()).unwrap();
        let mut opt = Adam::new(&ps, AdamConfig { max_grad_norm: 1.0, ..Default::default() }).unwrap();
        let grads = x.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let norm = opt.apply(&ps, &grads).unwrap();
        assert!((norm - 200.0).abs() < 1e-9);
        let m = opt.m[0].to_vec1::<f64>().unwrap()[0];
        assert!((m - 0.1).abs() < 1e-12, "clipped gradient 1.0 times (1 - beta1)");
    }
}
