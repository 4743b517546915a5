use indexmap::IndexMap;

use crate::error::{contract, Error, Result};
use crate::numerics::Matrix;

use super::{Grads, ParamStore};

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
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: IndexMap<String, Matrix>,
    second: IndexMap<String, Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = params.zeros_like();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam step. Parameters without a gradient entry are
/// treated as having zero gradient.
pub fn adam_step(params: &mut ParamStore, grads: &Grads, state: &mut AdamState) -> Result<()> {
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else {
            return contract(format!("gradient for unknown parameter {name:?}"));
        };
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let (Some(m), Some(v)) = (state.first.get_mut(name), state.second.get_mut(name)) else {
            return contract(format!("optimizer has no moments for parameter {name:?}"));
        };
        if m.shape() != p.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape(),
                rhs: m.shape(),
            });
        }
        let g = grads.get(name);
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.as_slice()[i]);
            let mi = beta1 * m.as_slice()[i] + (1.0 - beta1) * gi;
            let vi = beta2 * v.as_slice()[i] + (1.0 - beta2) * gi * gi;
            m.as_mut_slice()[i] = mi;
            v.as_mut_slice()[i] = vi;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            p.as_mut_slice()[i] -= update;
        }
    }
    Ok(())
}
