//! Parameter storage, tape binding, seeded initialization and small layers.

mod adam;
mod layers;

pub use adam::{Adam, AdamConfig};
pub use layers::{Conv2d, Linear};

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::archive::Archive;
use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::Scalar;

/// Named parameter tensors, keyed by layer path (`nrm.enc0.weight`, ...).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        self.params.values_mut().for_each(|a| a.fill(T::zero()));
    }

    /// Places every parameter on `tape`, as a gradient-tracked leaf when
    /// `trainable`, otherwise as a constant.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.variable(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn save_into(&self, prefix: &str, archive: &mut Archive) {
        for (k, v) in &self.params {
            archive.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Loads every parameter already present in `self` (same names and shapes)
    /// from `archive`.
    pub fn load_from(&mut self, prefix: &str, archive: &Archive) -> Result<()> {
        for (k, v) in self.params.iter_mut() {
            let loaded: ArrayD<T> = archive.get(&format!("{prefix}{k}"))?;
            if loaded.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{k}` has shape {:?} in the archive, model expects {:?}",
                    loaded.shape(),
                    v.shape()
                )));
            }
            *v = loaded;
        }
        Ok(())
    }
}

/// Parameters placed on a tape.
pub struct Bound<'t, T: Scalar> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Binds explicit vars, e.g. the inputs of a gradient check.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var<'t, T>]) -> Self {
        Bound {
            vars: names.into_iter().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var<'t, T> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t, T>> {
        self.vars.get(name).copied()
    }

    /// Gradients of every bound parameter, zeros where the loss does not depend on it.
    pub fn gradients(&self, grads: &Grads<T>) -> BTreeMap<String, ArrayD<T>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

/// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn kaiming_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::lit(rng.random_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn bound_gradients_cover_unused_parameters() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", ArrayD::from_elem(IxDyn(&[2]), 3.0));
        store.insert("b", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let loss = p.get("a").square().sum();
        let g = p.gradients(&tape.backward(loss));
        assert_eq!(g["a"].as_slice().unwrap(), &[6.0, 6.0]);
        assert_eq!(g["b"].as_slice().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn archive_round_trip_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        store.insert("w", kaiming_uniform(&mut rng, &[3, 4], 4));
        let mut ar = Archive::new(serde_json::json!({})).unwrap();
        store.save_into("g.", &mut ar);
        let mut other = store.clone();
        other.zero_all();
        other.load_from("g.", &ar).unwrap();
        assert_eq!(other, store);

        let mut wrong = ParamStore::<f32>::new();
        wrong.insert("w", ArrayD::zeros(IxDyn(&[4, 3])));
        assert!(wrong.load_from("g.", &ar).is_err());
    }

    #[test]
    fn init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: ArrayD<f64> = kaiming_uniform(&mut rng, &[64, 25], 25);
        assert!(w.iter().all(|v| v.abs() <= 0.2));
        assert!(w.iter().any(|v| v.abs() > 0.15));
    }
}
