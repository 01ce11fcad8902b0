//! A small reverse-mode autodiff tape over 2-D arrays.
//!
//! Every value is an `Array2`; scalars are `1×1`. Nodes are appended in
//! evaluation order, so the backward pass is a single reverse sweep.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, NdFloat, Zip};

#[inline]
pub fn cast<T: NdFloat>(x: f64) -> T {
    T::from(x).expect("float cast")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row spans that attend only among themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnLayout {
    pub spans: Vec<(usize, usize)>,
    pub causal: bool,
}

impl AttnLayout {
    pub fn new(spans: Vec<(usize, usize)>, causal: bool) -> Self {
        Self { spans, causal }
    }

    pub fn total(&self) -> usize {
        self.spans.iter().map(|&(_, l)| l).sum()
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `x + row` with `row` 1×d broadcast over rows.
    AddRow(Var, Var),
    /// `x ⊙ row` with `row` 1×d broadcast over rows.
    MulRow(Var, Var),
    MulConst(Var, Array2<T>),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<AttnLayout>,
        probs: Vec<Array2<T>>,
    },
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    SegmentMean(Var, Vec<(usize, usize)>),
    /// Column L2 norms, 1×cols.
    ColNorm(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Array2<T>,
    },
    /// `(1/n) Σ_k ‖a_k − b_k‖²` over rows.
    SqDistMean(Var, Var),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: NdFloat> {
    nodes: Vec<Node<T>>,
}

impl<T: NdFloat> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`]. Missing entries are zero.
pub struct Grads<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: NdFloat> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads[v.0].take()
    }
}

impl<T: NdFloat> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        self.push(value, Op::Div(a, b), &[a, b])
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(x) + self.value(row);
        self.push(value, Op::AddRow(x, row), &[x, row])
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(x) * self.value(row);
        self.push(value, Op::MulRow(x, row), &[x, row])
    }

    pub fn mul_const(&mut self, x: Var, c: Array2<T>) -> Var {
        let value = self.value(x) * &c;
        self.push(value, Op::MulConst(x, c), &[x])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x) * c;
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps: T = cast(1e-5);
        let xv = self.value(x);
        let d = xv.ncols();
        let mut xhat = Array2::zeros(xv.raw_dim());
        let mut rstd = Vec::with_capacity(xv.nrows());
        let dn: T = cast(d as f64);
        for (row, mut out) in xv.outer_iter().zip(xhat.outer_iter_mut()) {
            let mean = row.sum() / dn;
            let var = row.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dn;
            let r = T::one() / (var + eps).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * r);
            rstd.push(r);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product attention restricted to `layout.spans`.
    /// Rows outside every span attend nowhere and produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Rc<AttnLayout>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dim();
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale: T = cast(1.0 / (dh as f64).sqrt());
        let mut out = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(layout.spans.len() * heads);
        for &(start, len) in &layout.spans {
            for h in 0..heads {
                let cols = s![start..start + len, h * dh..(h + 1) * dh];
                let p = attention_probs(qv.slice(cols), kv.slice(cols), scale, layout.causal);
                out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Row gather: `out[i] = x[ids[i]]`.
    pub fn gather(&mut self, x: Var, ids: Vec<usize>) -> Var {
        let value = self.value(x).select(Axis(0), &ids);
        self.push(value, Op::Gather(x, ids), &[x])
    }

    /// Row concatenation.
    pub fn concat(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat widths");
        let inputs = parts.clone();
        self.push(value, Op::Concat(parts), &inputs)
    }

    /// Mean over each `(start, len)` span of rows; one output row per span.
    pub fn segment_mean(&mut self, x: Var, spans: Vec<(usize, usize)>) -> Var {
        let xv = self.value(x);
        let mut value = Array2::zeros((spans.len(), xv.ncols()));
        for (i, &(start, len)) in spans.iter().enumerate() {
            assert!(len > 0, "empty span");
            let m = xv.slice(s![start..start + len, ..]).sum_axis(Axis(0)) / cast::<T>(len as f64);
            value.row_mut(i).assign(&m);
        }
        self.push(value, Op::SegmentMean(x, spans), &[x])
    }

    pub fn col_norm(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map_axis(Axis(0), |c| c.fold(T::zero(), |a, &v| a + v * v).sqrt())
            .insert_axis(Axis(0));
        self.push(value, Op::ColNorm(x), &[x])
    }

    /// Mean negative log-likelihood of `targets` as `(row, class)` pairs.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<(usize, usize)>) -> Var {
        assert!(!targets.is_empty());
        let lv = self.value(logits);
        let mut probs = Array2::zeros((targets.len(), lv.ncols()));
        let mut total = T::zero();
        for (i, &(row, class)) in targets.iter().enumerate() {
            let r = lv.row(row);
            let max = r.fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut p = probs.row_mut(i);
            Zip::from(&mut p).and(&r).for_each(|p, &l| *p = (l - max).exp());
            let z = p.sum();
            p.mapv_inplace(|v| v / z);
            total += z.ln() + max - r[class];
        }
        let value = Array2::from_elem((1, 1), total / cast(targets.len() as f64));
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        )
    }

    pub fn sq_dist_mean(&mut self, a: Var, b: Var) -> Var {
        let diff = self.value(a) - self.value(b);
        let n: T = cast(diff.nrows() as f64);
        let value = Array2::from_elem((1, 1), diff.mapv(|v| v * v).sum() / n);
        self.push(value, Op::SqDistMean(a, b), &[a, b])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.dot(val(*b)));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g * val(*b));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g * val(*a));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if self.wants(*a) {
                    accumulate(grads, *a, g / bv);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, -(g * &node.value) / bv);
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*row) {
                    accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(x, row) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g * val(*row));
                }
                if self.wants(*row) {
                    accumulate(grads, *row, (g * val(*x)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulConst(x, c) => accumulate(grads, *x, g * c),
            Op::Scale(x, c) => accumulate(grads, *x, g * *c),
            Op::Gelu(x) => {
                let mut dx = val(*x).mapv(gelu_grad);
                dx *= g;
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*x) {
                    let gx = g * val(*gamma);
                    let dn: T = cast(xhat.ncols() as f64);
                    let mut dx = Array2::zeros(g.raw_dim());
                    for (i, mut out) in dx.outer_iter_mut().enumerate() {
                        let gr = gx.row(i);
                        let xr = xhat.row(i);
                        let mean_g = gr.sum() / dn;
                        let mean_gx = gr.dot(&xr) / dn;
                        Zip::from(&mut out)
                            .and(&gr)
                            .and(&xr)
                            .for_each(|o, &gv, &xv| *o = rstd[i] * (gv - mean_g - xv * mean_gx));
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let d = qv.ncols();
                let dh = d / heads;
                let scale: T = cast(1.0 / (dh as f64).sqrt());
                let mut dq = Array2::zeros(qv.raw_dim());
                let mut dk = Array2::zeros(kv.raw_dim());
                let mut dv = Array2::zeros(vv.raw_dim());
                let mut p_iter = probs.iter();
                for &(start, len) in &layout.spans {
                    for h in 0..*heads {
                        let p = p_iter.next().expect("cached probs");
                        let cols = s![start..start + len, h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(cols).t());
                        let mut ds = dp;
                        for (mut dsr, pr) in ds.outer_iter_mut().zip(p.outer_iter()) {
                            let dot = dsr.dot(&pr);
                            Zip::from(&mut dsr).and(&pr).for_each(|d, &pv| *d = pv * (*d - dot) * scale);
                        }
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                }
                if self.wants(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.wants(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::Gather(x, ids) => {
                let slot = grads[x.0].get_or_insert_with(|| Array2::zeros(val(*x).raw_dim()));
                for (i, &id) in ids.iter().enumerate() {
                    let mut r = slot.row_mut(id);
                    r += &g.row(i);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).nrows();
                    if self.wants(p) {
                        accumulate(grads, p, g.slice(s![off..off + n, ..]).to_owned());
                    }
                    off += n;
                }
            }
            Op::SegmentMean(x, spans) => {
                let mut dx = Array2::zeros(val(*x).raw_dim());
                for (i, &(start, len)) in spans.iter().enumerate() {
                    let share = &g.row(i) / cast::<T>(len as f64);
                    for mut r in dx.slice_mut(s![start..start + len, ..]).outer_iter_mut() {
                        r.assign(&share);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ColNorm(x) => {
                let xv = val(*x);
                let mut dx = xv / &node.value;
                dx *= g;
                accumulate(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let gs = g[[0, 0]] / cast(targets.len() as f64);
                let slot = grads[logits.0].get_or_insert_with(|| Array2::zeros(val(*logits).raw_dim()));
                for (i, &(row, class)) in targets.iter().enumerate() {
                    let mut r = slot.row_mut(row);
                    r.scaled_add(gs, &probs.row(i));
                    r[class] -= gs;
                }
            }
            Op::SqDistMean(a, b) => {
                let diff = val(*a) - val(*b);
                let c: T = g[[0, 0]] * cast(2.0 / diff.nrows() as f64);
                let d = diff * c;
                if self.wants(*b) {
                    accumulate(grads, *b, d.mapv(|x| -x));
                }
                if self.wants(*a) {
                    accumulate(grads, *a, d);
                }
            }
        }
    }
}

fn accumulate<T: NdFloat>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Softmax attention weights for one head over one span.
pub fn attention_probs<T: NdFloat>(q: ArrayView2<T>, k: ArrayView2<T>, scale: T, causal: bool) -> Array2<T> {
    let mut scores = q.dot(&k.t());
    for (i, mut row) in scores.outer_iter_mut().enumerate() {
        if causal {
            for j in i + 1..row.len() {
                row[j] = T::neg_infinity();
            }
        }
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b * scale));
        row.mapv_inplace(|s| (s * scale - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    scores
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu<T: NdFloat>(x: T) -> T {
    let c: T = cast(GELU_C);
    let a: T = cast(0.044715);
    let half: T = cast(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: NdFloat>(x: T) -> T {
    let c: T = cast(GELU_C);
    let a: T = cast(0.044715);
    let half: T = cast(0.5);
    let three: T = cast(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}
