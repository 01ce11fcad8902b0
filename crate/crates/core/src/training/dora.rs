//! Weight-decomposed low-rank adaptation.
//!
//! For a frozen weight `W₀` (stored `in×out`, so column `j` belongs to output
//! unit `j`) an adapter holds a magnitude row `m` (1×out) and low-rank factors
//! `A` (in×r), `B` (r×out). With `s = α / r`:
//!
//! ```text
//! V  = W₀ + s·A·B
//! W′ = V · diag(m / ‖V‖_col)
//! ```
//!
//! `B` starts at zero and `m` at the column norms of `W₀`, so a fresh adapter
//! reproduces the base layer exactly.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{Array2, Axis, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{normal_init, Bound, ParamStore};
use crate::nn::tape::{cast, Tape, Var};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for DoraConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            alpha: 64.0,
            dropout: 0.05,
        }
    }
}

impl DoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Adapters for a set of target projections, keyed by projection name
/// (e.g. `layers.0.attn.q`). Parameters are `name.m`, `name.a`, `name.b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DoraAdapters<T> {
    pub config: DoraConfig,
    pub targets: Vec<String>,
    pub params: ParamStore<T>,
}

pub fn column_norms<T: NdFloat>(w: &Array2<T>) -> Array2<T> {
    w.map_axis(Axis(0), |c| c.fold(T::zero(), |a, &v| a + v * v).sqrt())
        .insert_axis(Axis(0))
}

impl<T: NdFloat> DoraAdapters<T> {
    pub fn init(base: &ParamStore<T>, targets: &[String], config: DoraConfig, rng: &mut SplitMix64) -> Result<Self> {
        let mut params = ParamStore::new();
        for t in targets {
            let w = base
                .get(&format!("{t}.w"))
                .ok_or_else(|| Error::Config(format!("no weight {t}.w to adapt")))?;
            let (fan_in, fan_out) = w.dim();
            if config.rank == 0 || config.rank > fan_in.min(fan_out) {
                return Err(Error::Config(format!(
                    "DoRA rank {} not in 1..={} for {t}",
                    config.rank,
                    fan_in.min(fan_out)
                )));
            }
            params.insert(format!("{t}.m"), column_norms(w));
            params.insert(format!("{t}.a"), normal_init(rng, fan_in, config.rank, 1.0 / (fan_in as f64).sqrt()));
            params.insert(format!("{t}.b"), Array2::zeros((config.rank, fan_out)));
        }
        Ok(Self {
            config,
            targets: targets.to_vec(),
            params,
        })
    }

    /// Base store with every target weight replaced by its adapted weight.
    pub fn merge(&self, base: &ParamStore<T>) -> Result<ParamStore<T>> {
        let mut out = base.clone();
        for t in &self.targets {
            let name = format!("{t}.w");
            let merged = dora_apply(
                base.expect(&name),
                self.params.expect(&format!("{t}.a")),
                self.params.expect(&format!("{t}.b")),
                self.params.expect(&format!("{t}.m")),
                cast(self.config.scale()),
            )?;
            out.insert(name, merged);
        }
        Ok(out)
    }

    /// Binds the adapter parameters as trainable leaves. `dropout_seed` enables
    /// input dropout on the low-rank path (training only).
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool, dropout_seed: Option<u64>) -> DoraBinding<T> {
        let bound = self.params.bind(tape, trainable);
        self.binding(bound, dropout_seed)
    }

    /// Binding over tape variables that already hold the adapter parameters,
    /// in store order.
    pub fn bind_vars(&self, vars: Vec<Var>, dropout_seed: Option<u64>) -> DoraBinding<T> {
        self.binding(Bound::from_vars(&self.params, vars), dropout_seed)
    }

    fn binding(&self, bound: Bound, dropout_seed: Option<u64>) -> DoraBinding<T> {
        let mut map = HashMap::new();
        for t in &self.targets {
            map.insert(
                t.clone(),
                AdapterVars {
                    m: bound.var(&format!("{t}.m")),
                    a: bound.var(&format!("{t}.a")),
                    b: bound.var(&format!("{t}.b")),
                },
            );
        }
        let dropout = match dropout_seed {
            Some(seed) if self.config.dropout > 0.0 => Some((self.config.dropout, RefCell::new(SplitMix64::new(seed)))),
            _ => None,
        };
        DoraBinding {
            adapters: map,
            bound,
            scale: cast(self.config.scale()),
            dropout,
        }
    }
}

/// `W′ = (W₀ + s·A·B) · diag(m / ‖W₀ + s·A·B‖_col)`.
pub fn dora_apply<T: NdFloat>(w0: &Array2<T>, a: &Array2<T>, b: &Array2<T>, m: &Array2<T>, scale: T) -> Result<Array2<T>> {
    if a.nrows() != w0.nrows() || b.ncols() != w0.ncols() || a.ncols() != b.nrows() || m.dim() != (1, w0.ncols()) {
        return Err(Error::ShapeError(format!(
            "dora: W {:?}, A {:?}, B {:?}, m {:?}",
            w0.dim(),
            a.dim(),
            b.dim(),
            m.dim()
        )));
    }
    let v = w0 + &(a.dot(b) * scale);
    let norms = column_norms(&v);
    if let Some(j) = norms.iter().position(|&n| n == T::zero()) {
        return Err(Error::DegenerateColumn(j));
    }
    Ok(v * &(m / &norms))
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub m: Var,
    pub a: Var,
    pub b: Var,
}

pub struct DoraBinding<T> {
    adapters: HashMap<String, AdapterVars>,
    bound: Bound,
    scale: T,
    dropout: Option<(f64, RefCell<SplitMix64>)>,
}

impl<T: NdFloat> DoraBinding<T> {
    pub fn get(&self, name: &str) -> Option<AdapterRef<'_, T>> {
        self.adapters.get(name).map(|vars| AdapterRef { vars: *vars, binding: self })
    }

    pub fn bound(&self) -> &Bound {
        &self.bound
    }
}

#[derive(Clone, Copy)]
pub struct AdapterRef<'a, T> {
    vars: AdapterVars,
    binding: &'a DoraBinding<T>,
}

/// `x·W′` on the tape, with dropout (when enabled) applied to the input of
/// the low-rank path only. The column norm stays differentiable.
pub fn adapted_matmul<T: NdFloat>(tape: &mut Tape<T>, x: Var, w: Var, adapter: AdapterRef<'_, T>) -> Var {
    let AdapterVars { m, a, b } = adapter.vars;
    let s = adapter.binding.scale;
    let ab = tape.matmul(a, b);
    let ab = tape.scale(ab, s);
    let v = tape.add(w, ab);
    let norms = tape.col_norm(v);
    let mag = tape.div(m, norms);
    let base = tape.matmul(x, w);
    let xd = match &adapter.binding.dropout {
        Some((p, rng)) => {
            let mut rng = rng.borrow_mut();
            let keep = 1.0 - p;
            let shape = tape.value(x).raw_dim();
            let mask = Array2::from_shape_simple_fn(shape, || {
                if rng.next_f64() < keep {
                    cast::<T>(1.0 / keep)
                } else {
                    T::zero()
                }
            });
            tape.mul_const(x, mask)
        }
        None => x,
    };
    let low = tape.matmul(xd, a);
    let low = tape.matmul(low, b);
    let low = tape.scale(low, s);
    let y = tape.add(base, low);
    tape.mul_row(y, mag)
}
