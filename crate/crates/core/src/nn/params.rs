//! Named parameter collections.

use std::collections::HashMap;

use ndarray::{Array2, NdFloat};
use sha2::{Digest, Sha256};

use super::tape::{cast, Tape, Var};
use crate::rng::SplitMix64;

/// An ordered set of named matrices. Order is insertion order and is what
/// checkpoints, optimizers and hashes iterate over.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: NdFloat> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return i;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.id(name).map(move |i| &mut self.values[i])
    }

    /// Panics on unknown names; model code only asks for names it created.
    pub fn expect(&self, name: &str) -> &Array2<T> {
        self.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Array2<T> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Array2<T> {
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: NdFloat>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, v) in self.iter() {
            out.insert(n, v.mapv(|x| cast::<U>(x.to_f64().expect("finite"))));
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian f64 images of all values.
    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.iter() {
            h.update((n.len() as u32).to_le_bytes());
            h.update(n.as_bytes());
            h.update((v.nrows() as u32).to_le_bytes());
            h.update((v.ncols() as u32).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_f64().expect("float").to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Puts every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters placed on a tape, addressable by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Binds the names of `store` to existing tape variables, in store order.
    pub fn from_vars<T: ndarray::NdFloat>(store: &ParamStore<T>, vars: Vec<Var>) -> Self {
        assert_eq!(store.len(), vars.len());
        Self {
            vars,
            index: store.index.clone(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))]
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Normal initializer with a fixed standard deviation.
pub fn normal_init<T: NdFloat>(rng: &mut SplitMix64, rows: usize, cols: usize, std: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || cast(rng.normal() * std))
}
