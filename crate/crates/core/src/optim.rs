use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, ParamRole, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient of `ParamRole::Weight` tensors.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Adam with coupled weight decay. Moments are keyed by parameter name so
/// they can be saved and restored.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<(String, ArrayD<T>, ArrayD<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn update(&mut self, params: &mut [(String, &mut Param<T>)], lr: f64) -> Result<()> {
        let learned: Vec<&mut (String, &mut Param<T>)> =
            params.iter_mut().filter(|(_, p)| p.role != ParamRole::Buffer).collect();
        if self.moments.is_empty() {
            self.moments = learned
                .iter()
                .map(|(n, p)| (n.clone(), ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())))
                .collect();
        }
        if self.moments.len() != learned.len() {
            return Err(Error::State("optimizer state does not match the parameter list".into()));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(lr);
        let eps = T::lit(c.eps);
        for ((name, p), (mname, m, v)) in learned.into_iter().map(|e| (&e.0, &mut *e.1)).zip(self.moments.iter_mut()) {
            if name != mname {
                return Err(Error::State(format!("optimizer moment {mname} does not match parameter {name}")));
            }
            let wd = T::lit(if p.role == ParamRole::Weight { c.weight_decay } else { 0.0 });
            Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|x, &g, m, v| {
                let g = g + wd * *x;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
        Ok(())
    }
}
