use crate::error::{Error, Result};

use super::mlp::Mlp;

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
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one [`Mlp`].
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    first: Mlp,
    second: Mlp,
    step: u64,
}

impl AdamState {
    pub fn new(params: &Mlp, config: AdamConfig) -> Self {
        Self {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn first_moment(&self) -> &Mlp {
        &self.first
    }

    pub fn second_moment(&self) -> &Mlp {
        &self.second
    }

    /// Applies one update in place. Gradients are validated before anything
    /// is mutated, so a rejected step leaves both params and state untouched.
    pub fn step(&mut self, params: &mut Mlp, grads: &Mlp) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.first) {
            return Err(Error::Shape {
                context: "adam_step gradient layout".into(),
                expected: params.dims(),
                got: grads.dims(),
            });
        }
        for (k, layer) in grads.layers().iter().enumerate() {
            if layer.weight().iter().chain(layer.bias()).any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { layer: k });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut p = params.param_slices_mut();
        let mut m = self.first.param_slices_mut();
        let mut v = self.second.param_slices_mut();
        for (s, g) in grads.param_slices().into_iter().enumerate() {
            let (ps, ms, vs) = (&mut *p[s], &mut *m[s], &mut *v[s]);
            for j in 0..g.len() {
                ms[j] = beta1 * ms[j] + (1.0 - beta1) * g[j];
                vs[j] = beta2 * vs[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = ms[j] / c1;
                let v_hat = vs[j] / c2;
                ps[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
