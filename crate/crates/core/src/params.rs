use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Frozen parameters receive no gradient and are skipped by the optimizer.
    pub frozen: bool,
}

/// Named parameter registry, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            grad: Tensor::zeros(value.shape()),
            name,
            value,
            frozen: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Add `grad` into the accumulator of `id` (ignored when frozen).
    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Ok(());
        }
        if p.grad.shape() != grad.shape() {
            return Err(Error::shape(
                "accumulate",
                format!("{}: {:?} vs {:?}", p.name, p.grad.shape(), grad.shape()),
            ));
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    /// Freeze (or unfreeze) every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same names and values converted to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let id = out.add(p.name.clone(), p.value.cast());
            out.get_mut(id).frozen = p.frozen;
        }
        out
    }
}

/// Registers parameters under a dotted name prefix with deterministic initialization.
pub struct ParamBuilder<'s, T: Real, R: Rng> {
    pub store: &'s mut ParamStore<T>,
    pub rng: &'s mut R,
    prefix: String,
}

impl<'s, T: Real, R: Rng> ParamBuilder<'s, T, R> {
    pub fn new(store: &'s mut ParamStore<T>, rng: &'s mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Run `f` with `name` appended to the prefix.
    pub fn scope<O>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> O) -> O {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() {
            name.to_string()
        } else {
            format!("{saved}.{name}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn constant(&mut self, name: &str, shape: Shape, value: f64) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::full(shape, T::c(value)))
    }

    /// Uniform in `±1/sqrt(fan_in)`, the default for convolution weights and biases.
    pub fn fan_in_uniform(&mut self, name: &str, shape: Shape, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = self.full_name(name);
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        self.store.add(n, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_ignore_gradients() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("enc.w", Tensor::zeros([1, 1, 1, 2]));
        let b = s.add("dec.w", Tensor::zeros([1, 1, 1, 2]));
        assert_eq!(s.set_frozen_prefix("enc.", true), 1);
        let g = Tensor::full([1, 1, 1, 2], 1.0);
        s.accumulate(a, &g).unwrap();
        s.accumulate(b, &g).unwrap();
        assert_eq!(s.get(a).grad.sum(), 0.0);
        assert_eq!(s.get(b).grad.sum(), 2.0);
    }
}
