//! Adam with default moment coefficients and a constant learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one module, laid out in traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<Param<T>>,
    pub v: Vec<Param<T>>,
}

impl<T: Scalar> Moments<T> {
    pub fn for_module<M: Module<T>>(module: &M) -> Self {
        let mut m = Vec::new();
        module.visit("", &mut |_, p| m.push(Param::zeros(p.shape.clone())));
        Moments { v: m.clone(), m }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Number of completed updates.
    pub t: u64,
    pub groups: Vec<Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0 && config.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} must be positive", config.lr)));
        }
        Ok(Adam {
            config,
            t: 0,
            groups: Vec::new(),
        })
    }

    /// Registers a module and returns its group index.
    pub fn add_group<M: Module<T>>(&mut self, module: &M) -> usize {
        self.groups.push(Moments::for_module(module));
        self.groups.len() - 1
    }

    /// Advances the step counter; call once per optimizer step before `apply`.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn apply<M: Module<T>>(&mut self, group: usize, params: &mut M, grads: &M) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.t.max(1) as i32;
        let (c1, c2) = (T::from_f64(1.0 - beta1.powi(t)), T::from_f64(1.0 - beta2.powi(t)));
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one, lr, eps) = (T::one(), T::from_f64(lr), T::from_f64(eps));
        let grads = grads.named_params();
        let moments = &mut self.groups[group];
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            let g = &grads[i].1.data;
            let (m, v) = (&mut moments.m[i].data, &mut moments.v[i].data);
            for j in 0..p.data.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                p.data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
            i += 1;
        });
    }
}
