//! Named parameter storage and the per-forward binding context.

use std::cell::RefCell;

use crate::autograd::{BatchStats, Grads, Mode, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Learnable; counted in parameter totals.
    Param,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Entry<T: Scalar> {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: Tensor<T>,
}

/// Ordered inventory of named tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), TensorKind::Param, tensor.with_requires_grad(true))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), TensorKind::Buffer, tensor.with_requires_grad(false))
    }

    fn push(&mut self, name: String, kind: TensorKind, tensor: Tensor<T>) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate tensor name {name}");
        self.entries.push(Entry { name, kind, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> TensorKind {
        self.entries[id.0].kind
    }

    pub fn rename(&mut self, id: ParamId, name: String) {
        self.entries[id.0].name = name;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        self.find(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::Config(format!("no tensor named {name}")))
    }

    /// Replaces a tensor, keeping its trainable flag. Shapes must agree.
    pub fn set(&mut self, id: ParamId, mut tensor: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.tensor.shape() != tensor.shape() {
            return Err(dim_err!(
                "tensor {} has shape {:?}, got {:?}",
                slot.name,
                slot.tensor.shape(),
                tensor.shape()
            ));
        }
        tensor.requires_grad = slot.tensor.requires_grad;
        slot.tensor = tensor;
        Ok(())
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == TensorKind::Param)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == TensorKind::Param && e.tensor.requires_grad)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Same names, kinds and bit-identical values, in the same order.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.kind == b.kind && a.tensor.bitwise_eq(&b.tensor)
            })
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }
}

/// Lazily binds store tensors as leaves on a tape.
pub struct Bindings<'a, T: Scalar> {
    tape: &'a Tape<T>,
    store: &'a ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'a, T>>>>,
}

impl<'a, T: Scalar> Bindings<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Bindings {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Var<'a, T> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| {
            let entry = &self.store.entries[id.0];
            match entry.kind {
                TensorKind::Param => self.tape.leaf(entry.tensor.clone()),
                TensorKind::Buffer => self.tape.constant(entry.tensor.clone()),
            }
        })
    }

    /// Binds `id` to an existing variable instead of the stored tensor.
    pub fn bind(&self, id: ParamId, var: Var<'a, T>) -> Result<()> {
        let expect = self.store.get(id).shape();
        if var.shape() != expect {
            return Err(dim_err!(
                "binding {:?} to {} of shape {:?}",
                var.shape(),
                self.store.name(id),
                expect
            ));
        }
        self.vars.borrow_mut()[id.0] = Some(var);
        Ok(())
    }

    /// Gradients per store entry; `None` for tensors that were not bound,
    /// are frozen, or did not influence the loss.
    pub fn gradients(&self, grads: &Grads<T>) -> Vec<Option<Vec<T>>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).map(<[T]>::to_vec)))
            .collect()
    }
}

/// A pending batch-norm running-statistics update.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats<T>,
}

/// Default batch-norm momentum for running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// State shared by one forward evaluation.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub params: Bindings<'a, T>,
    pub mode: Mode,
    rng: Option<RefCell<&'a mut Rng>>,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, mode: Mode, rng: Option<&'a mut Rng>) -> Self {
        Ctx {
            tape,
            params: Bindings::new(tape, store),
            mode,
            rng: rng.map(RefCell::new),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Inference context: eval mode, no randomness.
    pub fn eval(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self::new(tape, store, Mode::Eval, None)
    }

    pub fn p(&self, id: ParamId) -> Var<'a, T> {
        self.params.get(id)
    }

    /// Runs `f` with the context's random stream. Errors if the context was
    /// created without one.
    pub fn with_rng<R>(&self, f: impl FnOnce(&mut Rng) -> R) -> Result<R> {
        let cell = self
            .rng
            .as_ref()
            .ok_or_else(|| Error::Config("train-mode stochastic op needs a random stream".into()))?;
        let mut rng = cell.borrow_mut();
        Ok(f(&mut rng))
    }

    pub fn record_bn(&self, update: BnUpdate<T>) {
        self.bn_updates.borrow_mut().push(update);
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

/// Folds batch statistics into running statistics:
/// `running = (1 − momentum)·running + momentum·batch`.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) {
    let m = T::of(momentum);
    let keep = T::one() - m;
    for u in updates {
        for (r, &b) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.running_var).data_mut().iter_mut().zip(&u.stats.var_unbiased) {
            *r = keep * *r + m * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_are_not_parameters() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("w", Tensor::zeros(&[3, 4]));
        s.add_buffer("running_mean", Tensor::zeros(&[4]));
        assert_eq!(s.param_count(), 12);
        assert!(!s.by_name("running_mean").unwrap().requires_grad);
    }

    #[test]
    fn set_checks_shape_and_keeps_flag() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add_param("w", Tensor::zeros(&[2]));
        s.get_mut(id).requires_grad = false;
        assert!(s.set(id, Tensor::zeros(&[3])).is_err());
        s.set(id, Tensor::ones(&[2]).with_requires_grad(true)).unwrap();
        assert!(!s.get(id).requires_grad);
    }

    #[test]
    fn running_stats_momentum() {
        let mut s = ParamStore::<f64>::new();
        let rm = s.add_buffer("rm", Tensor::zeros(&[1]));
        let rv = s.add_buffer("rv", Tensor::ones(&[1]));
        let u = BnUpdate {
            running_mean: rm,
            running_var: rv,
            stats: BatchStats { mean: vec![2.0], var_unbiased: vec![3.0] },
        };
        apply_bn_updates(&mut s, &[u], 0.1);
        assert!((s.get(rm).data()[0] - 0.2).abs() < 1e-15);
        assert!((s.get(rv).data()[0] - 1.2).abs() < 1e-15);
    }
}
