//! A small decoder-only language model that reads mixed sequences of
//! vocabulary tokens and soft (fallback) embedding rows.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{normal_init, Bound, ParamStore};
use crate::nn::tape::{cast, AttnLayout, Tape, Var};
use crate::nn::transformer::{block_forward, block_step, init_block, layer_norm_plain, KvCache, INIT_STD};
use crate::rng::SplitMix64;
use crate::training::dora::DoraBinding;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const TXT: usize = 4;
pub const IMG: usize = 5;
pub const N_SPECIAL: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_lm: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    pub feedforward_dim: usize,
    /// Output head shares the input embedding table.
    pub tied: bool,
}

impl LmConfig {
    pub fn new(vocab_size: usize, n_layers: usize, d_lm: usize, n_heads: usize, max_positions: usize) -> Self {
        Self {
            vocab_size,
            n_layers,
            d_lm,
            n_heads,
            max_positions,
            feedforward_dim: 4 * d_lm,
            tied: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_lm % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "lm needs n_layers >= 1 and d_lm ({}) divisible by n_heads ({})",
                self.d_lm, self.n_heads
            )));
        }
        if self.vocab_size <= N_SPECIAL || self.max_positions == 0 {
            return Err(Error::Config("lm vocabulary must exceed the special tokens".into()));
        }
        Ok(())
    }

    /// Names of the attention projections in every layer.
    pub fn attention_targets(&self) -> Vec<String> {
        (0..self.n_layers)
            .flat_map(|l| ["q", "k", "v", "o"].map(|p| format!("layers.{l}.attn.{p}")))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment<T> {
    Vocab(Vec<usize>),
    Soft(Array2<T>),
}

impl<T> Segment<T> {
    pub fn len(&self) -> usize {
        match self {
            Self::Vocab(t) => t.len(),
            Self::Soft(r) => r.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSequence<T> {
    pub segments: Vec<Segment<T>>,
    /// Half-open range of positions whose next-token predictions carry loss.
    pub target_span: Option<(usize, usize)>,
}

/// One position of a flattened mixed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Token(usize),
    /// Row index into an externally supplied soft-embedding matrix.
    Soft(usize),
}

impl<T: NdFloat> MixedSequence<T> {
    pub fn new(segments: Vec<Segment<T>>) -> Self {
        Self {
            segments,
            target_span: None,
        }
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Token id at each position, `None` for soft rows.
    pub fn tokens(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.len());
        for seg in &self.segments {
            match seg {
                Segment::Vocab(t) => out.extend(t.iter().map(|&x| Some(x))),
                Segment::Soft(r) => out.extend(std::iter::repeat_n(None, r.nrows())),
            }
        }
        out
    }

    pub fn validate(&self, config: &LmConfig) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if n > config.max_positions {
            return Err(Error::SequenceTooLong {
                actual: n,
                limit: config.max_positions,
            });
        }
        for seg in &self.segments {
            match seg {
                Segment::Vocab(t) => {
                    if let Some(&id) = t.iter().find(|&&id| id >= config.vocab_size) {
                        return Err(Error::UnknownToken(id));
                    }
                }
                Segment::Soft(r) if r.ncols() != config.d_lm => {
                    return Err(Error::ShapeError(format!("soft rows of width {} vs d_lm {}", r.ncols(), config.d_lm)));
                }
                Segment::Soft(_) => {}
            }
        }
        if let Some((a, b)) = self.target_span {
            let toks = self.tokens();
            if a >= b || b > n || toks[a..b].iter().any(Option::is_none) {
                return Err(Error::Config(format!("target span {a}..{b} must cover vocabulary positions")));
            }
        }
        Ok(())
    }
}

/// Result of decoding: generated ids (EOS excluded), summed log-probability
/// (EOS included when emitted) and the length-normalised score.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub beam_size: usize,
    pub max_new: usize,
    pub length_penalty: f64,
    /// 0 disables sampling. Only used with `beam_size == 1`.
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            beam_size: 2,
            max_new: 32,
            length_penalty: 1.0,
            temperature: 0.0,
            top_k: 0,
            top_p: 1.0,
            seed: 0,
        }
    }
}

fn log_softmax<T: NdFloat>(row: ndarray::ArrayView1<T>) -> Vec<f64> {
    let v: Vec<f64> = row.iter().map(|x| x.to_f64().expect("float")).collect();
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    v.into_iter().map(|x| x - z).collect()
}

fn normalised(logprob: f64, len: usize, lp: f64) -> f64 {
    logprob / (len.max(1) as f64).powf(lp)
}

/// Beam search over an abstract step function. `step(state, token)` feeds
/// `token` and returns the log-probabilities of the next token. Stops once
/// `beam_size` hypotheses have emitted EOS or after `max_new` tokens.
pub fn beam_search<S: Clone>(
    init: S,
    init_logprobs: Vec<f64>,
    mut step: impl FnMut(&mut S, usize) -> Vec<f64>,
    beam_size: usize,
    max_new: usize,
    length_penalty: f64,
) -> Hypothesis {
    let k = beam_size.max(1);
    struct Beam<S> {
        tokens: Vec<usize>,
        logprob: f64,
        state: S,
        next: Vec<f64>,
    }
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        logprob: 0.0,
        state: init,
        next: init_logprobs,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_new {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            let mut ids: Vec<usize> = (0..beam.next.len()).collect();
            ids.sort_by(|&x, &y| beam.next[y].total_cmp(&beam.next[x]).then(x.cmp(&y)));
            for &t in ids.iter().take(2 * k) {
                cands.push((beam.logprob + beam.next[t], b, t));
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next_beams = Vec::with_capacity(k);
        for (rank, &(lp, b, t)) in cands.iter().enumerate() {
            if t == EOS {
                // EOS below the top-k candidates does not count
                if rank < k {
                    let tokens = beams[b].tokens.clone();
                    finished.push(Hypothesis {
                        score: normalised(lp, tokens.len() + 1, length_penalty),
                        tokens,
                        logprob: lp,
                        finished: true,
                    });
                }
                continue;
            }
            let mut state = beams[b].state.clone();
            let next = step(&mut state, t);
            let mut tokens = beams[b].tokens.clone();
            tokens.push(t);
            next_beams.push(Beam {
                tokens,
                logprob: lp,
                state,
                next,
            });
            if next_beams.len() == k {
                break;
            }
        }
        beams = next_beams;
        if finished.len() >= k || beams.is_empty() {
            break;
        }
    }
    if finished.len() < k {
        for b in beams {
            finished.push(Hypothesis {
                score: normalised(b.logprob, b.tokens.len(), length_penalty),
                tokens: b.tokens,
                logprob: b.logprob,
                finished: false,
            });
        }
    }
    finished
        .into_iter()
        .reduce(|best, h| if h.score > best.score { h } else { best })
        .expect("at least one hypothesis")
}

/// Language model weights plus configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel<T> {
    pub config: LmConfig,
    pub weights: ParamStore<T>,
}

impl<T: NdFloat> LanguageModel<T> {
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::derive(seed, "lm");
        let d = config.d_lm;
        let mut w = ParamStore::new();
        w.insert("tok_emb", normal_init(&mut rng, config.vocab_size, d, INIT_STD));
        w.insert("pos", normal_init(&mut rng, config.max_positions, d, INIT_STD));
        for l in 0..config.n_layers {
            init_block(&mut w, &format!("layers.{l}"), d, config.feedforward_dim, &mut rng);
        }
        w.insert("ln_f.g", Array2::ones((1, d)));
        w.insert("ln_f.b", Array2::zeros((1, d)));
        if !config.tied {
            w.insert("head", normal_init(&mut rng, d, config.vocab_size, INIT_STD));
        }
        Ok(Self { config, weights: w })
    }

    pub fn from_parts(config: LmConfig, weights: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        for name in ["tok_emb", "pos", "ln_f.g", "ln_f.b"] {
            if weights.get(name).is_none() {
                return Err(Error::Format(format!("lm checkpoint lacks {name}")));
            }
        }
        if weights.expect("tok_emb").nrows() != config.vocab_size {
            return Err(Error::Format("embedding rows differ from vocab_size".into()));
        }
        Ok(Self { config, weights })
    }

    pub fn cast<U: NdFloat>(&self) -> LanguageModel<U> {
        LanguageModel {
            config: self.config.clone(),
            weights: self.weights.cast(),
        }
    }

    pub fn embedding_table(&self) -> &Array2<T> {
        self.weights.expect("tok_emb")
    }

    /// `T×d_lm` input rows: table lookups for tokens, soft rows verbatim.
    pub fn embed_mixed(&self, seq: &MixedSequence<T>) -> Result<Array2<T>> {
        seq.validate(&self.config)?;
        let table = self.embedding_table();
        let mut out = Array2::zeros((seq.len(), self.config.d_lm));
        let mut at = 0;
        for seg in &seq.segments {
            match seg {
                Segment::Vocab(t) => {
                    for &id in t {
                        out.row_mut(at).assign(&table.row(id));
                        at += 1;
                    }
                }
                Segment::Soft(r) => {
                    out.slice_mut(s![at..at + r.nrows(), ..]).assign(r);
                    at += r.nrows();
                }
            }
        }
        Ok(out)
    }

    /// Tape version of [`Self::embed_mixed`] over a flattened slot list;
    /// soft slots index rows of `soft`.
    pub fn embed_slots(&self, tape: &mut Tape<T>, bound: &Bound, slots: &[Slot], soft: Option<Var>) -> Result<Var> {
        let mut tok_ids = Vec::new();
        let mut soft_ids = Vec::new();
        let mut order = Vec::with_capacity(slots.len());
        for s in slots {
            match *s {
                Slot::Token(id) => {
                    if id >= self.config.vocab_size {
                        return Err(Error::UnknownToken(id));
                    }
                    order.push((false, tok_ids.len()));
                    tok_ids.push(id);
                }
                Slot::Soft(r) => {
                    order.push((true, soft_ids.len()));
                    soft_ids.push(r);
                }
            }
        }
        let toks = tape.gather(bound.var("tok_emb"), tok_ids.clone());
        if soft_ids.is_empty() {
            return Ok(toks);
        }
        let soft = soft.ok_or_else(|| Error::Config("soft slots without soft rows".into()))?;
        let softs = tape.gather(soft, soft_ids);
        let cat = tape.concat(vec![toks, softs]);
        let perm = order
            .into_iter()
            .map(|(is_soft, i)| if is_soft { tok_ids.len() + i } else { i })
            .collect();
        Ok(tape.gather(cat, perm))
    }

    /// Packed causal forward: `spans` are independent sequences laid end to
    /// end in `emb`, each with positions starting at 0. Returns logits.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        emb: Var,
        spans: &[(usize, usize)],
        adapters: Option<&DoraBinding<T>>,
    ) -> Result<Var> {
        let mut pos_ids = Vec::with_capacity(tape.value(emb).nrows());
        for &(_, len) in spans {
            if len > self.config.max_positions {
                return Err(Error::SequenceTooLong {
                    actual: len,
                    limit: self.config.max_positions,
                });
            }
            pos_ids.extend(0..len);
        }
        let pos = tape.gather(bound.var("pos"), pos_ids);
        let mut x = tape.add(emb, pos);
        let layout = Rc::new(AttnLayout::new(spans.to_vec(), true));
        for l in 0..self.config.n_layers {
            x = block_forward(tape, bound, &format!("layers.{l}"), x, self.config.n_heads, &layout, adapters);
        }
        let h = tape.layer_norm(x, bound.var("ln_f.g"), bound.var("ln_f.b"));
        let logits = if self.config.tied {
            tape.matmul_t(h, bound.var("tok_emb"))
        } else {
            tape.matmul(h, bound.var("head"))
        };
        if !tape.value(logits).iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalError("lm logits".into()));
        }
        Ok(logits)
    }

    /// Logits for one sequence of input embeddings.
    pub fn forward(&self, emb: &Array2<T>) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, false);
        let e = tape.constant(emb.clone());
        let logits = self.forward_tape(&mut tape, &bound, e, &[(0, emb.nrows())], None)?;
        Ok(tape.value(logits).clone())
    }

    fn head(&self, h: &Array2<T>) -> Array2<T> {
        let h = layer_norm_plain(h, self.weights.expect("ln_f.g"), self.weights.expect("ln_f.b"));
        if self.config.tied {
            h.dot(&self.embedding_table().t())
        } else {
            h.dot(self.weights.expect("head"))
        }
    }

    /// Feeds `emb` rows after the cached prefix; returns their logits.
    pub fn step(&self, cache: &mut KvCache<T>, emb: &Array2<T>) -> Result<Array2<T>> {
        let start = cache.len();
        let end = start + emb.nrows();
        if end > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                actual: end,
                limit: self.config.max_positions,
            });
        }
        let mut x = emb + &self.weights.expect("pos").slice(s![start..end, ..]);
        for l in 0..self.config.n_layers {
            x = block_step(&self.weights, &format!("layers.{l}"), &x, self.config.n_heads, cache, l);
        }
        let logits = self.head(&x);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalError("lm logits".into()));
        }
        Ok(logits)
    }

    /// Decodes a continuation of the prompt embeddings.
    pub fn generate(&self, prompt: &Array2<T>, config: &GenerateConfig) -> Result<Hypothesis> {
        if prompt.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        let mut cache = KvCache::new(self.config.n_layers, self.config.d_lm);
        let logits = self.step(&mut cache, prompt)?;
        let first = log_softmax(logits.row(logits.nrows() - 1));
        // every emitted token is fed back, so stay inside the position table
        let max_new = config.max_new.min(self.config.max_positions - prompt.nrows());
        if config.temperature > 0.0 && config.beam_size <= 1 {
            return self.sample(cache, first, max_new, config);
        }
        let table = self.embedding_table();
        let mut failure = None;
        let hyp = beam_search(
            cache,
            first,
            |cache, tok| {
                let e = table.slice(s![tok..tok + 1, ..]).to_owned();
                match self.step(cache, &e) {
                    Ok(l) => log_softmax(l.row(0)),
                    Err(err) => {
                        failure.get_or_insert(err);
                        vec![0.0; self.config.vocab_size]
                    }
                }
            },
            config.beam_size,
            max_new,
            config.length_penalty,
        );
        match failure {
            Some(e) => Err(e),
            None => Ok(hyp),
        }
    }

    fn sample(&self, mut cache: KvCache<T>, mut logp: Vec<f64>, max_new: usize, config: &GenerateConfig) -> Result<Hypothesis> {
        let mut rng = SplitMix64::derive(config.seed, "sample");
        let mut tokens = Vec::new();
        let mut total = 0.0;
        let mut finished = false;
        for _ in 0..max_new {
            let t = sample_index(&logp, config, &mut rng);
            total += logp[t];
            if t == EOS {
                finished = true;
                break;
            }
            tokens.push(t);
            let e = self.embedding_table().slice(s![t..t + 1, ..]).to_owned();
            logp = log_softmax(self.step(&mut cache, &e)?.row(0));
        }
        let len = tokens.len() + usize::from(finished);
        Ok(Hypothesis {
            score: normalised(total, len, config.length_penalty),
            tokens,
            logprob: total,
            finished,
        })
    }
}

fn sample_index(logp: &[f64], config: &GenerateConfig, rng: &mut SplitMix64) -> usize {
    let mut ids: Vec<usize> = (0..logp.len()).collect();
    ids.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
    if config.top_k > 0 {
        ids.truncate(config.top_k);
    }
    let mut w: Vec<f64> = ids.iter().map(|&i| (logp[i] / config.temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    if config.top_p < 1.0 {
        let mut acc = 0.0;
        let keep = w
            .iter()
            .position(|&p| {
                acc += p;
                acc >= config.top_p
            })
            .map_or(w.len(), |i| i + 1);
        ids.truncate(keep);
        w.truncate(keep);
    }
    let z: f64 = w.iter().sum();
    let mut u = rng.next_f64() * z;
    for (i, &p) in w.iter().enumerate() {
        if u < p {
            return ids[i];
        }
        u -= p;
    }
    *ids.last().expect("non-empty vocabulary")
}

/// Mean NLL of `targets` over positions where `mask` is set.
pub fn loss_ce<T: NdFloat>(logits: &Array2<T>, targets: &[usize], mask: &[bool]) -> Result<T> {
    if logits.nrows() != targets.len() || targets.len() != mask.len() {
        return Err(Error::ShapeError("logits, targets and mask lengths differ".into()));
    }
    let mut total = T::zero();
    let mut n = 0usize;
    for ((row, &t), _) in logits.axis_iter(Axis(0)).zip(targets).zip(mask).filter(|(_, &m)| m) {
        if t >= row.len() {
            return Err(Error::InvalidTarget(t));
        }
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let z = row.fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
        total += z - row[t];
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyLossMask);
    }
    Ok(total / cast(n as f64))
}
