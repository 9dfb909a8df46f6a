//! Named parameter storage and binding onto tapes.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{Grads, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Ordered map of named parameter tensors. Iteration order is by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(name.into(), tensor.with_requires_grad(true));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| Error::config(name, "missing parameter"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries.get_mut(name).ok_or_else(|| Error::config(name, "missing parameter"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count, optionally restricted to names with `prefix`.
    pub fn num_scalars(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Registers every parameter as a gradient leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        let vars = self.entries.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect();
        BoundParams { vars }
    }

    /// Registers parameters as constants (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        let vars = self.entries.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect();
        BoundParams { vars }
    }

    /// Adds the leaf gradients from `grads` into each parameter's accumulator.
    pub fn accumulate(&mut self, bound: &BoundParams<'_, T>, grads: &Grads<T>) -> Result<()> {
        for (name, t) in self.entries.iter_mut() {
            if let Some(g) = bound.vars.get(name).and_then(|v| grads.get(*v)) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// All parameters concatenated in name order.
    pub fn flatten(&self) -> Vec<T> {
        self.entries.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Binds parameters as slices of one flat variable (gradient checks).
    pub fn bind_flat<'t>(&self, flat: Var<'t, T>) -> Result<BoundParams<'t, T>> {
        let total = flat.value().numel();
        let row = flat.reshape(vec![1, total])?;
        let mut vars = HashMap::new();
        let mut off = 0;
        for (name, t) in &self.entries {
            let v = row.slice_cols(off, t.numel())?.reshape(t.shape().to_vec())?;
            vars.insert(name.clone(), v);
            off += t.numel();
        }
        if off != total {
            return Err(Error::shape("bind_flat", format!("{total} scalars for {off} parameters")));
        }
        Ok(BoundParams { vars })
    }
}

/// Parameters registered on one tape.
pub struct BoundParams<'t, T> {
    vars: HashMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars.get(name).copied().ok_or_else(|| Error::config(name, "missing parameter"))
    }

    pub fn var_of(&self, name: &str) -> Option<Var<'t, T>> {
        self.vars.get(name).copied()
    }
}

/// Initializers used by the model builders.
pub struct Init<'a> {
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    pub fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor<f32> {
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| rng::normal(rng, std) as f32)
    }

    /// Weight `[fan_in, fan_out]` with std `1/sqrt(fan_in)` and a zero bias.
    pub fn linear(&mut self, store: &mut ParamStore<f32>, name: &str, fan_in: usize, fan_out: usize) {
        let w = self.normal(vec![fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
        store.insert(format!("{name}.w"), w);
        store.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
    }

    pub fn norm(&mut self, store: &mut ParamStore<f32>, name: &str, width: usize) {
        store.insert(format!("{name}.g"), Tensor::full(vec![width], 1.0));
        store.insert(format!("{name}.b"), Tensor::zeros(vec![width]));
    }
}

/// `x[.., Cin] -> x W + b` for a parameter pair `{name}.w`, `{name}.b`.
pub fn linear<'t, T: Scalar>(p: &BoundParams<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let shape = x.shape();
    let cin = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cin.max(1);
    let cout = w.shape()[1];
    let y = x.reshape(vec![rows, cin])?.matmul(w)?.add_bias(b)?;
    let mut out_shape = shape;
    if let Some(last) = out_shape.last_mut() {
        *last = cout;
    }
    y.reshape(out_shape)
}

pub fn layer_norm<'t, T: Scalar>(p: &BoundParams<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.layer_norm(p.get(&format!("{name}.g"))?, p.get(&format!("{name}.b"))?, 1e-5)
}
