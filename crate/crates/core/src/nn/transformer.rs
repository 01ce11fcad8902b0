//! Pre-norm transformer blocks shared by the fallback encoder and the LM.
//!
//! Parameter names under a block prefix `p`:
//! `p.ln1.g`, `p.ln1.b`, `p.attn.{q,k,v,o}.{w,b}`, `p.ln2.g`, `p.ln2.b`,
//! `p.ff.w1`, `p.ff.b1`, `p.ff.w2`, `p.ff.b2`. Weights are stored `in×out`
//! and applied as `x·W + b`.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, NdFloat, Zip};

use super::params::{normal_init, Bound, ParamStore};
use super::tape::{attention_probs, cast, gelu, AttnLayout, Tape, Var};
use crate::rng::SplitMix64;
use crate::training::dora::{self, DoraBinding};

pub const INIT_STD: f64 = 0.02;
pub const ATTN_PROJ: [&str; 4] = ["q", "k", "v", "o"];

pub fn init_block<T: NdFloat>(store: &mut ParamStore<T>, prefix: &str, d: usize, ff: usize, rng: &mut SplitMix64) {
    store.insert(format!("{prefix}.ln1.g"), Array2::ones((1, d)));
    store.insert(format!("{prefix}.ln1.b"), Array2::zeros((1, d)));
    for p in ATTN_PROJ {
        store.insert(format!("{prefix}.attn.{p}.w"), normal_init(rng, d, d, INIT_STD));
        store.insert(format!("{prefix}.attn.{p}.b"), Array2::zeros((1, d)));
    }
    store.insert(format!("{prefix}.ln2.g"), Array2::ones((1, d)));
    store.insert(format!("{prefix}.ln2.b"), Array2::zeros((1, d)));
    store.insert(format!("{prefix}.ff.w1"), normal_init(rng, d, ff, INIT_STD));
    store.insert(format!("{prefix}.ff.b1"), Array2::zeros((1, ff)));
    store.insert(format!("{prefix}.ff.w2"), normal_init(rng, ff, d, INIT_STD));
    store.insert(format!("{prefix}.ff.b2"), Array2::zeros((1, d)));
}

/// Closed-form parameter count of one block.
pub fn block_param_count(d: usize, ff: usize) -> usize {
    2 * d + 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d)
}

pub fn linear<T: NdFloat>(
    tape: &mut Tape<T>,
    bound: &Bound,
    name: &str,
    x: Var,
    adapters: Option<&DoraBinding<T>>,
) -> Var {
    let w = bound.var(&format!("{name}.w"));
    let b = bound.var(&format!("{name}.b"));
    let y = match adapters.and_then(|a| a.get(name)) {
        Some(adapter) => dora::adapted_matmul(tape, x, w, adapter),
        None => tape.matmul(x, w),
    };
    tape.add_row(y, b)
}

pub fn block_forward<T: NdFloat>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    layout: &Rc<AttnLayout>,
    adapters: Option<&DoraBinding<T>>,
) -> Var {
    let h = tape.layer_norm(x, bound.var(&format!("{prefix}.ln1.g")), bound.var(&format!("{prefix}.ln1.b")));
    let q = linear(tape, bound, &format!("{prefix}.attn.q"), h, adapters);
    let k = linear(tape, bound, &format!("{prefix}.attn.k"), h, adapters);
    let v = linear(tape, bound, &format!("{prefix}.attn.v"), h, adapters);
    let a = tape.attention(q, k, v, heads, layout.clone());
    let o = linear(tape, bound, &format!("{prefix}.attn.o"), a, adapters);
    let x = tape.add(x, o);
    let h = tape.layer_norm(x, bound.var(&format!("{prefix}.ln2.g")), bound.var(&format!("{prefix}.ln2.b")));
    let f = tape.matmul(h, bound.var(&format!("{prefix}.ff.w1")));
    let f = tape.add_row(f, bound.var(&format!("{prefix}.ff.b1")));
    let f = tape.gelu(f);
    let f = tape.matmul(f, bound.var(&format!("{prefix}.ff.w2")));
    let f = tape.add_row(f, bound.var(&format!("{prefix}.ff.b2")));
    tape.add(x, f)
}

// ---- tape-free inference ------------------------------------------------

pub fn layer_norm_plain<T: NdFloat>(x: &Array2<T>, g: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    let eps: T = cast(1e-5);
    let dn: T = cast(x.ncols() as f64);
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let mean = row.sum() / dn;
        let var = row.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dn;
        let r = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
    }
    out * g + b
}

fn linear_plain<T: NdFloat>(store: &ParamStore<T>, name: &str, x: &Array2<T>) -> Array2<T> {
    x.dot(store.expect(&format!("{name}.w"))) + store.expect(&format!("{name}.b"))
}

/// Per-layer key/value rows accumulated during incremental decoding.
#[derive(Debug, Clone, Default)]
pub struct KvCache<T> {
    pub keys: Vec<Array2<T>>,
    pub values: Vec<Array2<T>>,
}

impl<T: NdFloat> KvCache<T> {
    pub fn new(layers: usize, d: usize) -> Self {
        Self {
            keys: vec![Array2::zeros((0, d)); layers],
            values: vec![Array2::zeros((0, d)); layers],
        }
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Causal block over new rows `x`, appending to `cache` for layer `layer`.
pub fn block_step<T: NdFloat>(
    store: &ParamStore<T>,
    prefix: &str,
    x: &Array2<T>,
    heads: usize,
    cache: &mut KvCache<T>,
    layer: usize,
) -> Array2<T> {
    let h = layer_norm_plain(x, store.expect(&format!("{prefix}.ln1.g")), store.expect(&format!("{prefix}.ln1.b")));
    let q = linear_plain(store, &format!("{prefix}.attn.q"), &h);
    let k = linear_plain(store, &format!("{prefix}.attn.k"), &h);
    let v = linear_plain(store, &format!("{prefix}.attn.v"), &h);
    let past = cache.keys[layer].nrows();
    let keys = ndarray::concatenate(Axis(0), &[cache.keys[layer].view(), k.view()]).expect("kv widths");
    let vals = ndarray::concatenate(Axis(0), &[cache.values[layer].view(), v.view()]).expect("kv widths");
    let (n, d) = q.dim();
    let dh = d / heads;
    let scale: T = cast(1.0 / (dh as f64).sqrt());
    let mut a = Array2::zeros((n, d));
    for hd in 0..heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        // Pad the query block on the left so row i sits at absolute position past+i.
        let mut qpad = Array2::zeros((past + n, dh));
        qpad.slice_mut(s![past.., ..]).assign(&q.slice(cols));
        let p = attention_probs(qpad.view(), keys.slice(cols), scale, true);
        let p = p.slice(s![past.., ..]).to_owned();
        a.slice_mut(cols).assign(&p.dot(&vals.slice(cols)));
    }
    cache.keys[layer] = keys;
    cache.values[layer] = vals;
    let o = linear_plain(store, &format!("{prefix}.attn.o"), &a);
    let x = x + &o;
    let h = layer_norm_plain(&x, store.expect(&format!("{prefix}.ln2.g")), store.expect(&format!("{prefix}.ln2.b")));
    let mut f = h.dot(store.expect(&format!("{prefix}.ff.w1"))) + store.expect(&format!("{prefix}.ff.b1"));
    f.mapv_inplace(gelu);
    let f = f.dot(store.expect(&format!("{prefix}.ff.w2"))) + store.expect(&format!("{prefix}.ff.b2"));
    let mut out = x;
    Zip::from(&mut out).and(&f).for_each(|o, &v| *o += v);
    out
}
