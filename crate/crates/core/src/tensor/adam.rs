//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::{Grads, ParamSet, Real, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: one pair of moment buffers per parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = |_| Vec::new();
        Adam {
            config,
            step: 0,
            m: (0..params.len()).map(zeros).collect(),
            v: (0..params.len()).map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment buffers for parameter `i`, materialized as zeros if untouched.
    pub fn moments(&self, i: usize, numel: usize) -> (Vec<T>, Vec<T>) {
        let fill = |b: &Vec<T>| {
            if b.is_empty() {
                vec![T::zero(); numel]
            } else {
                b.clone()
            }
        };
        (fill(&self.m[i]), fill(&self.v[i]))
    }

    pub fn restore(config: AdamConfig, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Self {
        Adam { config, step, m, v }
    }

    /// One update. Parameters whose gradient is absent are left untouched.
    /// A non-finite gradient aborts the whole step before anything is written.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) -> Result<(), TensorError> {
        assert_eq!(grads.len(), params.len(), "gradient set does not match parameters");
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFiniteGrad {
                        name: params.name(id).to_string(),
                    });
                }
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);

        for id in params.ids() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = params.get_mut(id).data_mut();
            if self.m[i].is_empty() {
                self.m[i] = vec![T::zero(); p.len()];
                self.v[i] = vec![T::zero(); p.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
