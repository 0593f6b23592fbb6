//! Named trainable parameters and their binding onto a tape.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

/// Flat, name-indexed parameter table. Insertion order is stable and defines checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Panics on a duplicate name: model construction is static.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            frozen: false,
        });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return invalid(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Mark every parameter whose name starts with `prefix` as frozen (or trainable).
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Add leaf gradients collected on a tape into the stored `grad` buffers.
    pub fn accumulate(&mut self, bindings: &[(ParamId, usize)], grads: &Gradients) -> Result<()> {
        for &(id, var) in bindings {
            if let Some(g) = grads.get_id(var) {
                self.params[id.0].grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, k: f64) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g *= k;
            }
        }
    }

    /// Euclidean norm of gradients of parameters whose name starts with `prefix`.
    pub fn grad_norm(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Forward-pass context: lazily binds each parameter to one leaf on `tape`.
/// Frozen parameters are bound as constants and never receive gradients.
pub struct Ctx<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<HashMap<ParamId, Var<'t>>>,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), !p.frozen);
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Substitute an externally created var for a parameter (used by gradient checks).
    pub fn bind(&self, id: ParamId, var: Var<'t>) {
        self.bound.borrow_mut().insert(id, var);
    }

    /// `(param, tape var id)` pairs of trainable parameters touched so far.
    pub fn bindings(&self) -> Vec<(ParamId, usize)> {
        let mut v: Vec<(ParamId, usize)> = self
            .bound
            .borrow()
            .iter()
            .filter(|(id, _)| !self.store.get(**id).frozen)
            .map(|(id, var)| (*id, var.id()))
            .collect();
        v.sort();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_get_exact_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("encoder.w", Tensor::from_vec(vec![2.0]));
        let b = store.add("decoder.w", Tensor::from_vec(vec![3.0]));
        store.set_frozen("encoder.", true);
        let tape = Tape::new();
        let (bind, grads) = {
            let ctx = Ctx::new(&tape, &store);
            let y = ctx.p(a).mul(ctx.p(b)).unwrap().sum().unwrap();
            (ctx.bindings(), tape.backward(y).unwrap())
        };
        store.accumulate(&bind, &grads).unwrap();
        assert_eq!(store.get(a).grad.data(), &[0.0]);
        assert_eq!(store.get(b).grad.data(), &[2.0]);
        assert_eq!(store.grad_norm("encoder."), 0.0);
    }
}
