//! The prompt-set pool and its set → tasks registry.

use std::collections::BTreeMap;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::model::PromptSet;
use crate::Scalar;

/// Which tasks were trained on which set. Usable on its own when only the
/// bookkeeping matters (trace replay).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    sets: Vec<Vec<u32>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Set holding `task`, if any.
    pub fn set_of(&self, task: u32) -> Option<usize> {
        self.sets.iter().position(|ts| ts.contains(&task))
    }

    pub fn tasks(&self, set: usize) -> Option<&[u32]> {
        self.sets.get(set).map(|v| v.as_slice())
    }

    /// Opens a new set for `task` and returns its id.
    pub fn grow(&mut self, task: u32) -> Result<usize> {
        if self.set_of(task).is_some() {
            return Err(Error::DuplicateTask(task));
        }
        self.sets.push(vec![task]);
        Ok(self.sets.len() - 1)
    }

    pub fn assign(&mut self, set: usize, task: u32) -> Result<()> {
        if set >= self.sets.len() {
            return Err(Error::UnknownSet(set));
        }
        if self.set_of(task).is_some() {
            return Err(Error::DuplicateTask(task));
        }
        self.sets[set].push(task);
        Ok(())
    }

    pub fn assignments(&self) -> BTreeMap<usize, Vec<u32>> {
        self.sets.iter().cloned().enumerate().collect()
    }
}

/// Ordered prompt sets plus their registry. `len()` is the SSP count.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool<T> {
    sets: Vec<PromptSet<T>>,
    registry: Registry,
}

impl<T: Scalar> Default for PromptPool<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> PromptPool<T> {
    pub fn new() -> Self {
        Self {
            sets: Vec::new(),
            registry: Registry::new(),
        }
    }

    /// Rebuilds a pool from stored parts; used when loading snapshots.
    pub fn from_parts(sets: Vec<PromptSet<T>>, registry: Registry) -> Result<Self> {
        if sets.len() != registry.len() {
            return Err(Error::DimensionMismatch {
                expected: registry.len(),
                found: sets.len(),
            });
        }
        Ok(Self { sets, registry })
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn sets(&self) -> &[PromptSet<T>] {
        &self.sets
    }

    pub fn get(&self, id: usize) -> Result<&PromptSet<T>> {
        self.sets.get(id).ok_or(Error::UnknownSet(id))
    }

    pub fn get_mut(&mut self, id: usize) -> Result<&mut PromptSet<T>> {
        self.sets.get_mut(id).ok_or(Error::UnknownSet(id))
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    /// Stores `set` as a new pool entry trained first on `task`. The set's
    /// `id` is overwritten with its pool index.
    pub fn add_set(&mut self, mut set: PromptSet<T>, task: u32) -> Result<usize> {
        let id = self.registry.grow(task)?;
        set.id = id;
        self.sets.push(set);
        Ok(id)
    }

    pub fn assign_task(&mut self, set: usize, task: u32) -> Result<()> {
        self.registry.assign(set, task)
    }

    /// Set whose key has the highest cosine with `q`; ties go to the lowest id.
    pub fn retrieve(&self, q: ArrayView1<T>) -> Result<usize> {
        if self.sets.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mut best = 0;
        let mut best_cos = T::neg_infinity();
        for (i, s) in self.sets.iter().enumerate() {
            let c = cosine(q, s.key.view());
            if c > best_cos {
                best = i;
                best_cos = c;
            }
        }
        Ok(best)
    }
}

fn cosine<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    let den = norm(a) * norm(b);
    if den == T::zero() {
        T::zero()
    } else {
        dot(a, b) / den
    }
}
