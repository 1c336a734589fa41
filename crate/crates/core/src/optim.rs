//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
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

/// First and second moment estimates, one tensor per parameter, plus the step
/// counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (name, t) in params.iter() {
            m.insert(name, Tensor::zeros(t.shape())?)?;
            v.insert(name, Tensor::zeros(t.shape())?)?;
        }
        Ok(Self { config, m, v, step: 0 })
    }

    /// Applies one update. `grads` are in parameter-name order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid(format!(
                "adam: {} gradients for {} parameters ({} moments)",
                grads.len(),
                params.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for (name, g) in names.iter().zip(grads) {
            let p = params.get(name)?;
            let (m, v) = (self.m.get(name)?, self.v.get(name)?);
            if p.numel() != g.len() || m.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            let (p, m, v) = adam_update(p.data(), m.data(), v.data(), g, self.step, &self.config);
            let shape = params.get(name)?.shape().to_vec();
            params.set(name, Tensor::new(shape.clone(), p)?)?;
            self.m.set(name, Tensor::new(shape.clone(), m)?)?;
            self.v.set(name, Tensor::new(shape, v)?)?;
        }
        Ok(())
    }
}

/// One Adam update of a flat parameter at step `t >= 1`. Returns the new
/// parameter and moment vectors.
pub fn adam_update(
    p: &[f64],
    m: &[f64],
    v: &[f64],
    g: &[f64],
    t: u64,
    c: &AdamConfig,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    let mut out = (Vec::with_capacity(p.len()), Vec::with_capacity(p.len()), Vec::with_capacity(p.len()));
    for i in 0..p.len() {
        let mi = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        let vi = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        let mhat = mi / bc1;
        let vhat = vi / bc2;
        out.0.push(p[i] - c.lr * mhat / (vhat.sqrt() + c.eps));
        out.1.push(mi);
        out.2.push(vi);
    }
    out
}
