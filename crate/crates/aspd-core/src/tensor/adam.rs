//! Adam optimizer over named parameter sets.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// First/second moment state plus hyperparameters. Moments are allocated
/// lazily per parameter name and must keep matching their parameter shape.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction, applied in place to `params`.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    let names: Vec<String> = params.names().cloned().collect();
    let mut updated = ParamSet::new();
    for name in names {
        let p = params.get(&name)?;
        let g = grads.get(&name)?;
        if g.shape() != p.shape() {
            return Err(Error::Dimension(format!(
                "adam: gradient shape {:?} vs parameter shape {:?} for '{name}'",
                g.shape(),
                p.shape()
            )));
        }
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        if m.len() != n || v.len() != n {
            return Err(Error::Dimension(format!(
                "adam: moment size {} vs parameter size {n} for '{name}'",
                m.len()
            )));
        }
        let mut data = p.data().to_vec();
        for i in 0..n {
            let gi = g.data()[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        updated.insert(name, Tensor::new(p.shape().to_vec(), data)?);
    }
    *params = updated;
    Ok(())
}
