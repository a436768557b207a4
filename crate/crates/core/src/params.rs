//! Named parameter collections and their binding onto a tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Real, Tape, Tensor, Var};

/// Ordered map of named tensors. Trainable tensors have `requires_grad`
/// set; the rest are buffers (running statistics) carried in checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor.with_requires_grad(true));
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor.with_requires_grad(false));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::invalid("params", format!("missing tensor {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::invalid("params", format!("missing tensor {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors.iter().filter(|(_, t)| t.requires_grad()).map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.tensors.values().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    /// Keeps only the tensors whose names start with one of `prefixes`.
    pub fn retain_prefixes(&mut self, prefixes: &[&str]) {
        self.tensors.retain(|name, _| prefixes.iter().any(|p| name.starts_with(p)));
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    /// Records every trainable tensor as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, t)| (n.clone(), tape.param(t)))
            .collect();
        Bound { vars }
    }

    /// Copies gradients from a backward pass into each tensor's grad slot.
    pub fn collect_grads(&mut self, bound: &Bound, grads: &Gradients<T>) -> Result<()> {
        for (name, &v) in &bound.vars {
            let t = self.get_mut(name)?;
            let g = grads.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()]);
            t.set_grad(Some(g))?;
        }
        Ok(())
    }

    /// Folds batch statistics into the running-statistic buffers:
    /// `r ← (1 − momentum)·r + momentum·batch`, with the unbiased batch variance.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>], momentum: f64) -> Result<()> {
        let mo = T::lit(momentum);
        for u in updates {
            let unbias = if u.count > T::one() { u.count / (u.count - T::one()) } else { T::one() };
            let rm = self.get_mut(&format!("{}.running_mean", u.prefix))?;
            for (r, &m) in rm.data_mut().iter_mut().zip(&u.mean) {
                *r = (T::one() - mo) * *r + mo * m;
            }
            let rv = self.get_mut(&format!("{}.running_var", u.prefix))?;
            for (r, &v) in rv.data_mut().iter_mut().zip(&u.var) {
                *r = (T::one() - mo) * *r + mo * v * unbias;
            }
        }
        Ok(())
    }
}

/// Channel statistics of one batch-style normalization during training.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate<T: Real = f32> {
    pub prefix: String,
    pub mean: Vec<T>,
    /// Biased (population) variance over the weighted rows.
    pub var: Vec<T>,
    pub count: T,
}

/// How a normalization layer computes its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormStyle {
    /// Per channel over all (visible) rows of the batch.
    Batch,
    /// Per row over its channels.
    Layer,
}

impl std::str::FromStr for NormStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(NormStyle::Batch),
            "layer" => Ok(NormStyle::Layer),
            _ => Err(Error::Config(format!("unknown norm style {s:?} (expected batch or layer)"))),
        }
    }
}

impl std::fmt::Display for NormStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormStyle::Batch => "batch",
            NormStyle::Layer => "layer",
        })
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// One forward pass: a fresh tape with every trainable tensor bound.
pub struct ForwardCtx<'a, T: Real = f32> {
    pub tape: Tape<T>,
    pub bound: Bound,
    pub store: &'a ParamStore<T>,
    /// Batch statistics in training mode, running statistics otherwise.
    pub train: bool,
    pub updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Real> ForwardCtx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, train: bool) -> Self {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        ForwardCtx { tape, bound, store, train, updates: vec![] }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.bound.var(name)
    }

    /// Normalization with learned scale `{prefix}.gamma` and shift `{prefix}.beta`.
    /// Rows with zero weight do not contribute to batch statistics.
    pub fn norm(&mut self, prefix: &str, x: Var, style: NormStyle, row_weights: Option<Vec<T>>) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        match style {
            NormStyle::Layer => self.tape.layer_norm(x, gamma, beta, NORM_EPS),
            NormStyle::Batch if self.train => {
                let out = self.tape.batch_norm(x, gamma, beta, row_weights, NORM_EPS)?;
                let (mean, var, count) = self.tape.norm_stats(out).expect("batch norm records statistics");
                self.updates.push(StatUpdate { prefix: prefix.to_string(), mean: mean.to_vec(), var: var.to_vec(), count });
                Ok(out)
            }
            NormStyle::Batch => {
                let mean = self.store.get(&format!("{prefix}.running_mean"))?.data().to_vec();
                let var = self.store.get(&format!("{prefix}.running_var"))?.data().to_vec();
                self.tape.norm_running(x, gamma, beta, &mean, &var, NORM_EPS)
            }
        }
    }
}

/// Inserts scale/shift parameters for a normalization over `e` channels,
/// plus running-statistic buffers for the batch style.
pub fn insert_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, e: usize, style: NormStyle) {
    store.insert_param(format!("{prefix}.gamma"), Tensor::ones(&[e]));
    store.insert_param(format!("{prefix}.beta"), Tensor::zeros(&[e]));
    if style == NormStyle::Batch {
        store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[e]));
        store.insert_buffer(format!("{prefix}.running_var"), Tensor::ones(&[e]));
    }
}

/// Tape handles for the trainable tensors of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid("params", format!("tensor {name:?} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_collect_round_trip() {
        let mut store = ParamStore::<f64>::new();
        store.insert_param("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        store.insert_buffer("running", Tensor::zeros(&[2]));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        assert!(bound.var("running").is_err());
        let w = bound.var("w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        store.collect_grads(&bound, &grads).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[2.0, 4.0]);
        assert_eq!(store.num_trainable(), 2);
    }
}
