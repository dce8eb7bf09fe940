use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every non-frozen parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, &[f64])]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for &(id, g) in grads {
            if store.get(id).frozen {
                continue;
            }
            let n = g.len();
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let p = store.value_mut(id).data_mut();
            for i in 0..n {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
    }

    /// Moments and step count as named tensors for checkpointing.
    pub fn state_records(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("adamw.step".to_string(), Tensor::scalar(self.step as f64))];
        for (id, p) in store.iter() {
            if let Some(Some((m, v))) = self.moments.get(id.index()) {
                let shape = p.value.shape();
                out.push((format!("adamw.m.{}", p.name), Tensor::new(shape, m.clone()).expect("moment shape")));
                out.push((format!("adamw.v.{}", p.name), Tensor::new(shape, v.clone()).expect("moment shape")));
            }
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, records: &[(String, Tensor)]) -> Result<()> {
        let lookup = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let step = lookup("adamw.step").ok_or_else(|| Error::Checkpoint("missing adamw.step".into()))?;
        self.step = step.item() as u64;
        self.moments = vec![None; store.len()];
        for (id, p) in store.iter() {
            let m = lookup(&format!("adamw.m.{}", p.name));
            let v = lookup(&format!("adamw.v.{}", p.name));
            if let (Some(m), Some(v)) = (m, v) {
                if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!("moment shape mismatch for {}", p.name)));
                }
                self.moments[id.index()] = Some((m.data().to_vec(), v.data().to_vec()));
            }
        }
        Ok(())
    }
}
