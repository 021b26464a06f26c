//! Named parameter storage with per-parameter forward-access counters.

use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns the weights of one network.
///
/// Every time a graph binds a parameter for a forward pass the matching
/// access counter is incremented, which lets callers prove that a
/// sub-network was never touched.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    access: Vec<AtomicU64>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Clone> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            access: self.access.iter().map(|_| AtomicU64::new(0)).collect(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            access: Vec::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.access.push(AtomicU64::new(0));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.ids()
            .filter(|&id| self.name(id).starts_with(prefix))
            .map(|id| self.value(id).numel())
            .sum()
    }

    pub(crate) fn record_access(&self, id: ParamId) {
        self.access[id.0].fetch_add(1, Ordering::Relaxed);
    }

    pub fn access_count(&self, id: ParamId) -> u64 {
        self.access[id.0].load(Ordering::Relaxed)
    }

    /// Summed access count over parameters whose name starts with `prefix`.
    pub fn access_count_with_prefix(&self, prefix: &str) -> u64 {
        self.ids()
            .filter(|&id| self.name(id).starts_with(prefix))
            .map(|id| self.access_count(id))
            .sum()
    }

    pub fn reset_access_counts(&self) {
        for a in &self.access {
            a.store(0, Ordering::Relaxed);
        }
    }

    /// Iterates `(name, tensor)` in insertion order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Replaces every value from `(name, tensor)` pairs. All names must be
    /// present with identical shapes.
    pub fn load_named<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, Tensor<T>)>,
    ) -> Result<()> {
        let mut seen = alloc::vec![false; self.values.len()];
        for (name, value) in entries {
            let id = self.find(name).ok_or_else(|| {
                Error::ShapeIncompatible(alloc::format!("unexpected tensor `{name}`"))
            })?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::ShapeIncompatible(alloc::format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = value;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::ShapeIncompatible(alloc::format!(
                "missing tensor `{}`",
                self.names[missing]
            )));
        }
        Ok(())
    }

    /// Bitwise equality of all weights (names and values).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }

    /// Converts every weight to another precision, keeping names.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, v) in self.named() {
            out.add(name, v.cast());
        }
        out
    }
}
