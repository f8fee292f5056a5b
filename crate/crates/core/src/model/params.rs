use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, tag};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Projection matrix, truncated-normal init.
    Weight,
    /// Additive term, zero init.
    Bias,
    /// Normalization gain, one init.
    Gain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named parameters in a fixed registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub(crate) fn register(&mut self, name: String, kind: ParamKind, shape: &[usize]) {
        assert!(!self.index.contains_key(&name), "parameter `{name}` registered twice");
        let value = match kind {
            ParamKind::Gain => Tensor::ones(shape),
            _ => Tensor::zeros(shape),
        };
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, kind, value });
    }

    /// Truncated normal (cut at two standard deviations) for weights.
    pub(crate) fn initialize(&mut self, seed: u64) {
        let mut rng = stream_rng(seed, &[tag::INIT]);
        for p in &mut self.entries {
            if p.kind == ParamKind::Weight {
                for v in p.value.data_mut() {
                    *v = T::lit(truncated_normal(&mut rng) * INIT_STD);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    /// Overwrites one parameter; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamStore<T>) -> T {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()).map(|(&x, &y)| (x - y).abs()))
            .fold(T::zero(), T::max)
    }

    /// Every parameter as a tape leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'_, 't, T> {
        let vars = self.entries.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
        Bound { store: self, vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Parameters of one store living on a tape.
pub struct Bound<'s, 't, T> {
    store: &'s ParamStore<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'_, 't, T> {
    pub fn get(&self, name: &str) -> Var<'t, T> {
        match self.store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("model has no parameter `{name}`"),
        }
    }

    /// Gradients in store order; parameters that did not influence the
    /// output get zeros.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(&self.store.entries)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_follows_kind() {
        let mut s = ParamStore::<f64>::default();
        s.register("w".into(), ParamKind::Weight, &[50, 40]);
        s.register("b".into(), ParamKind::Bias, &[40]);
        s.register("g".into(), ParamKind::Gain, &[40]);
        s.initialize(1);
        let w = s.get("w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        let mean = w.sum() / 2000.0;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2000.0;
        // variance of a standard normal truncated at 2 is about 0.774
        assert!((var.sqrt() - INIT_STD * 0.774f64.sqrt()).abs() < 0.002, "{}", var.sqrt());
        assert!(s.get("b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(s.get("g").unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(s.numel(), 2080);

        let mut again = s.clone();
        again.initialize(1);
        assert_eq!(again, s);
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::<f32>::default();
        s.register("w".into(), ParamKind::Weight, &[2, 2]);
        assert!(s.set("w", Tensor::zeros(&[4])).is_err());
        assert!(s.set("v", Tensor::zeros(&[2, 2])).is_err());
        assert!(s.set("w", Tensor::ones(&[2, 2])).is_ok());
    }
}
