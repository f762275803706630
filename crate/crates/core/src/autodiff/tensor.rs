use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use super::{Gradients, Real};
use crate::error::{shape_err, Error, Result};

/// Dense row-major array with a gradient slot and freeze control.
///
/// Trainable parameters have `requires_grad = true` and `frozen = false`.
/// A frozen tensor never receives a gradient and is never touched by an
/// optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    frozen: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: true,
            frozen: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n]).expect("zero tensor shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Direct write access, used by loaders and tests. Optimizers go through
    /// [`ParamStore`] and respect the freeze flag.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_trainable(&self) -> bool {
        self.requires_grad && !self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        if frozen {
            self.grad = None;
        }
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub(crate) fn grad_mut(&mut self) -> Option<&mut Vec<T>> {
        self.grad.as_mut()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [T], Option<&[T]>) {
        (&mut self.data, self.grad.as_deref())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
            frozen: self.frozen,
        }
    }
}

/// Stable handle to a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named collection of parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn freeze_all(&mut self) {
        for t in &mut self.tensors {
            t.set_frozen(true);
        }
    }

    /// Freeze every tensor whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) {
        for (n, t) in self.names.iter().zip(&mut self.tensors) {
            if n.starts_with(prefix) {
                t.set_frozen(frozen);
            }
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let t = &mut self.tensors[id.0];
        t.set_frozen(!trainable);
        if trainable {
            t.set_requires_grad(true);
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, _, t)| t.is_trainable())
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.is_trainable())
            .map(|t| t.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Add `grads` into the gradient slots (`+=`). Frozen tensors are skipped.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let t = &mut self.tensors[id.0];
            if !t.is_trainable() {
                continue;
            }
            match &mut t.grad {
                Some(slot) => {
                    for (s, v) in slot.iter_mut().zip(g) {
                        *s += *v;
                    }
                }
                None => t.grad = Some(g.to_vec()),
            }
        }
    }

    /// Scale every populated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: T) {
        for t in &mut self.tensors {
            if let Some(g) = t.grad_mut() {
                for v in g.iter_mut() {
                    *v *= factor;
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Copy data of every tensor present in `other` under the same name.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (_, name, t) in other.iter() {
            let id = self.id(name)?;
            let dst = &mut self.tensors[id.0];
            if dst.shape != t.shape {
                return Err(shape_err(
                    "load",
                    format!("{name}: expected {:?}, got {:?}", dst.shape, t.shape),
                ));
            }
            dst.data.copy_from_slice(&t.data);
            dst.frozen = t.frozen;
            dst.requires_grad = t.requires_grad;
        }
        Ok(())
    }
}

impl ParamStore<f32> {
    /// SHA-256 over name, shape and little-endian bytes of every frozen tensor.
    pub fn frozen_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (_, name, t) in self.iter().filter(|(_, _, t)| t.is_frozen()) {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                h.update((d as u32).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}
