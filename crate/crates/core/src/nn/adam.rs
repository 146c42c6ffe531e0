use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub lr: f64,
    steps: u64,
    m: BTreeMap<String, ArrayD<T>>,
    v: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, config: AdamConfig) -> Self {
        Adam {
            config,
            lr,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, ArrayD<T>>) {
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let step_size = T::lit(self.lr / c1);
        let c2_sqrt = T::lit(c2.sqrt());
        let eps = T::lit(eps);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            Zip::from(&mut *p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *p -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
                });
        }
    }

    pub fn save_into(&self, prefix: &str, archive: &mut Archive) {
        for (k, m) in &self.m {
            archive.insert(format!("{prefix}m.{k}"), m);
        }
        for (k, v) in &self.v {
            archive.insert(format!("{prefix}v.{k}"), v);
        }
        let steps = ndarray::arr1(&[T::lit(self.steps as f64)]).into_dyn();
        archive.insert(format!("{prefix}steps"), &steps);
    }

    pub fn load_from(&mut self, prefix: &str, archive: &Archive, params: &ParamStore<T>) -> Result<()> {
        let steps: ArrayD<T> = archive.get(&format!("{prefix}steps"))?;
        self.steps = steps
            .iter()
            .next()
            .ok_or_else(|| Error::Checkpoint("empty optimizer step counter".into()))?
            .as_f64() as u64;
        self.m.clear();
        self.v.clear();
        for name in params.names() {
            let mk = format!("{prefix}m.{name}");
            if archive.contains(&mk) {
                self.m.insert(name.to_string(), archive.get(&mk)?);
                self.v.insert(name.to_string(), archive.get(&format!("{prefix}v.{name}"))?);
            }
        }
        Ok(())
    }
}
