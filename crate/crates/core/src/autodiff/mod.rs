//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Build a [`Tape`] per forward pass, register parameters with
//! [`Tape::param`], compose ops, then call [`Tape::backward`] on a scalar
//! loss. Every op checks its output for NaN/Inf and fails fast.
//!
//! ```
//! use sne_core::autodiff::{NdArray, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(&NdArray::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap()).unwrap();
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

mod adam;
mod checkpoint;
mod gradcheck;
mod kernels;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport};
pub use tape::{Gradients, Tape, Tensor};

use std::collections::HashMap;

use crate::{Error, Result};

/// Owned dense array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named parameter arrays in a fixed insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, NdArray)>,
    lookup: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, NdArray)>) -> Result<Self> {
        let mut set = Self::new();
        for (name, array) in entries {
            set.insert(name, array)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: impl Into<String>, array: NdArray) -> Result<()> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter {name}")));
        }
        self.lookup.insert(name.clone(), self.entries.len());
        self.entries.push((name, array));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.lookup.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn arrays(&self) -> impl Iterator<Item = &NdArray> {
        self.entries.iter().map(|(_, a)| a)
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut NdArray> {
        self.entries.iter_mut().map(|(_, a)| a)
    }

    pub fn entries(&self) -> &[(String, NdArray)] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Concatenation of all parameters in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, a)| a.data.iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.scalar_count()
            )));
        }
        let mut offset = 0;
        for (_, a) in &mut self.entries {
            let n = a.len();
            a.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}
