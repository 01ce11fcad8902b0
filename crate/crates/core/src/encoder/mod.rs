//! The fallback network: a small transformer that turns each word's patches
//! (or UTF-8 bytes) into one vector in the language model's embedding space.
//!
//! Forward pass:
//!
//! 1. `z_i = x_i·E + E_pos[pos_i]` (pixels) or `z_i = B[b_i] + E_pos[pos_i]`
//!    (bytes), with positions restarting at every word;
//! 2. pre-norm transformer layers whose attention is confined to each word;
//! 3. final layer norm, mean over each word's rows, projection to `d_lm`.
//!
//! Because of (1) and (2) a word's vector does not depend on its neighbours.

use std::rc::Rc;

use ndarray::{Array2, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{normal_init, Bound, ParamStore};
use crate::nn::tape::{attention_probs, cast, AttnLayout, Tape, Var};
use crate::nn::transformer::{block_forward, block_param_count, init_block, INIT_STD};
use crate::rng::SplitMix64;
use crate::textrender::{render_sequence, PatchSequence, RenderConfig, Word, DEFAULT_MAX_PATCHES, DEFAULT_MAX_WORD_PATCHES};

pub const MAX_BYTES: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Pixel,
    Byte,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub mode: InputMode,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_lm: usize,
    pub max_input: usize,
    pub feedforward_dim: usize,
    /// `P²·C`; unused in byte mode.
    pub patch_dim: usize,
    /// Rows of the positional table, i.e. the longest word in patches/bytes.
    pub max_word_positions: usize,
}

impl EncoderConfig {
    pub fn new(mode: InputMode, n_layers: usize, d_model: usize, n_heads: usize, d_lm: usize) -> Self {
        Self {
            mode,
            n_layers,
            d_model,
            n_heads,
            d_lm,
            max_input: match mode {
                InputMode::Pixel => DEFAULT_MAX_PATCHES,
                InputMode::Byte => MAX_BYTES,
            },
            feedforward_dim: 4 * d_model,
            patch_dim: 24 * 24,
            max_word_positions: DEFAULT_MAX_WORD_PATCHES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "encoder needs n_layers >= 1 and d_model ({}) divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.d_lm == 0 || self.max_input == 0 || self.max_word_positions == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count `(with output projection, without)`.
    pub fn param_count(&self) -> (usize, usize) {
        let d = self.d_model;
        let input = match self.mode {
            InputMode::Pixel => self.patch_dim * d,
            InputMode::Byte => 256 * d,
        };
        let body = input
            + self.max_word_positions * d
            + self.n_layers * block_param_count(d, self.feedforward_dim)
            + 2 * d;
        (body + d * self.d_lm, body)
    }
}

/// UTF-8 bytes of a word list with per-word spans and positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteSequence {
    pub bytes: Vec<u8>,
    pub word_offsets: Vec<(usize, usize)>,
    pub positional_ids: Vec<usize>,
}

pub fn byte_sequence(words: &[Word]) -> Result<ByteSequence> {
    byte_sequence_with_limit(words, MAX_BYTES)
}

pub fn byte_sequence_with_limit(words: &[Word], limit: usize) -> Result<ByteSequence> {
    if words.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: usize = words.iter().map(|w| w.text.len()).sum();
    if total > limit {
        return Err(Error::SequenceTooLong { actual: total, limit });
    }
    let mut seq = ByteSequence {
        bytes: Vec::with_capacity(total),
        word_offsets: Vec::with_capacity(words.len()),
        positional_ids: Vec::with_capacity(total),
    };
    for w in words {
        seq.word_offsets.push((seq.bytes.len(), w.text.len()));
        seq.bytes.extend_from_slice(w.text.as_bytes());
        seq.positional_ids.extend(0..w.text.len());
    }
    Ok(seq)
}

#[derive(Debug, Clone, Copy)]
pub enum EncoderInput<'a> {
    Pixels(&'a PatchSequence),
    Bytes(&'a ByteSequence),
}

impl EncoderInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            Self::Pixels(p) => p.len(),
            Self::Bytes(b) => b.bytes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn word_offsets(&self) -> &[(usize, usize)] {
        match self {
            Self::Pixels(p) => &p.word_offsets,
            Self::Bytes(b) => &b.word_offsets,
        }
    }

    pub fn positional_ids(&self) -> &[usize] {
        match self {
            Self::Pixels(p) => &p.positional_ids,
            Self::Bytes(b) => &b.positional_ids,
        }
    }

    fn mode(&self) -> InputMode {
        match self {
            Self::Pixels(_) => InputMode::Pixel,
            Self::Bytes(_) => InputMode::Byte,
        }
    }
}

/// Same-word attention mask: `mask[i][j]` iff rows `i` and `j` share a span.
pub fn block_attention_mask(word_offsets: &[(usize, usize)]) -> Array2<bool> {
    let n: usize = word_offsets.iter().map(|&(_, l)| l).sum();
    let mut mask = Array2::from_elem((n, n), false);
    for &(s, l) in word_offsets {
        mask.slice_mut(ndarray::s![s..s + l, s..s + l]).fill(true);
    }
    mask
}

/// Dense single-head attention with an explicit boolean mask (disallowed
/// logits set to −∞ before the softmax). Reference for the span kernel.
pub fn masked_attention_dense<T: NdFloat>(q: &Array2<T>, k: &Array2<T>, v: &Array2<T>, mask: &Array2<bool>) -> Array2<T> {
    let scale: T = cast(1.0 / (q.ncols() as f64).sqrt());
    let mut scores = q.dot(&k.t()) * scale;
    ndarray::Zip::from(&mut scores).and(mask).for_each(|s, &m| {
        if !m {
            *s = T::neg_infinity();
        }
    });
    for mut row in scores.outer_iter_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|s| (s - max).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    scores.dot(v)
}

/// Single-head span attention, exposed for comparison against the dense form.
pub fn span_attention<T: NdFloat>(q: &Array2<T>, k: &Array2<T>, v: &Array2<T>, word_offsets: &[(usize, usize)]) -> Array2<T> {
    let scale: T = cast(1.0 / (q.ncols() as f64).sqrt());
    let mut out = Array2::zeros(v.raw_dim());
    for &(s, l) in word_offsets {
        let r = ndarray::s![s..s + l, ..];
        let p = attention_probs(q.slice(r), k.slice(r), scale, false);
        out.slice_mut(r).assign(&p.dot(&v.slice(r)));
    }
    out
}

/// Encoder input that owns its data.
#[derive(Debug, Clone, PartialEq)]
pub enum OwnedInput {
    Pixels(PatchSequence),
    Bytes(ByteSequence),
}

impl OwnedInput {
    /// Renders (pixel mode) or byte-decomposes `words`, checking the
    /// per-sequence cap.
    pub fn prepare(words: &[Word], mode: InputMode, render: &RenderConfig) -> Result<Self> {
        Ok(match mode {
            InputMode::Pixel => Self::Pixels(render_sequence(words, render)?),
            InputMode::Byte => Self::Bytes(byte_sequence(words)?),
        })
    }

    pub fn as_input(&self) -> EncoderInput<'_> {
        match self {
            Self::Pixels(p) => EncoderInput::Pixels(p),
            Self::Bytes(b) => EncoderInput::Bytes(b),
        }
    }

    pub fn word_count(&self) -> usize {
        self.as_input().word_offsets().len()
    }

    /// Lays several sequences end to end, for one batched forward pass. The
    /// result may exceed the per-sequence cap; words stay independent.
    pub fn concat(parts: &[&OwnedInput]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let shift = |offsets: &mut Vec<(usize, usize)>, src: &[(usize, usize)], base: usize| {
            offsets.extend(src.iter().map(|&(s, l)| (s + base, l)));
        };
        match first {
            Self::Pixels(p0) => {
                let mut views = Vec::new();
                let mut offsets = Vec::new();
                let mut pos = Vec::new();
                let mut n = 0;
                for part in parts {
                    let Self::Pixels(p) = part else {
                        return Err(Error::Config("mixed pixel and byte inputs".into()));
                    };
                    views.push(p.patches.view());
                    shift(&mut offsets, &p.word_offsets, n);
                    pos.extend_from_slice(&p.positional_ids);
                    n += p.len();
                }
                let patches = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::ShapeError(e.to_string()))?;
                Ok(Self::Pixels(PatchSequence {
                    patch_size: p0.patch_size,
                    channels: p0.channels,
                    patches,
                    word_offsets: offsets,
                    positional_ids: pos,
                }))
            }
            Self::Bytes(_) => {
                let mut out = ByteSequence {
                    bytes: Vec::new(),
                    word_offsets: Vec::new(),
                    positional_ids: Vec::new(),
                };
                for part in parts {
                    let Self::Bytes(b) = part else {
                        return Err(Error::Config("mixed pixel and byte inputs".into()));
                    };
                    shift(&mut out.word_offsets, &b.word_offsets, out.bytes.len());
                    out.bytes.extend_from_slice(&b.bytes);
                    out.positional_ids.extend_from_slice(&b.positional_ids);
                }
                Ok(Self::Bytes(out))
            }
        }
    }
}

/// Encoder weights plus configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FallbackEncoder<T> {
    pub config: EncoderConfig,
    pub weights: ParamStore<T>,
}

impl<T: NdFloat> FallbackEncoder<T> {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::derive(seed, "encoder");
        let d = config.d_model;
        let mut w = ParamStore::new();
        match config.mode {
            InputMode::Pixel => w.insert("patch_proj", normal_init(&mut rng, config.patch_dim, d, INIT_STD)),
            InputMode::Byte => w.insert("byte_emb", normal_init(&mut rng, 256, d, INIT_STD)),
        };
        w.insert("pos", normal_init(&mut rng, config.max_word_positions, d, INIT_STD));
        for l in 0..config.n_layers {
            init_block(&mut w, &format!("layers.{l}"), d, config.feedforward_dim, &mut rng);
        }
        w.insert("ln_f.g", Array2::ones((1, d)));
        w.insert("ln_f.b", Array2::zeros((1, d)));
        w.insert("out_proj", normal_init(&mut rng, d, config.d_lm, INIT_STD));
        Ok(Self { config, weights: w })
    }

    pub fn from_parts(config: EncoderConfig, weights: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let input = match config.mode {
            InputMode::Pixel => "patch_proj",
            InputMode::Byte => "byte_emb",
        };
        for name in [input, "pos", "ln_f.g", "ln_f.b", "out_proj"] {
            if weights.get(name).is_none() {
                return Err(Error::Format(format!("encoder checkpoint lacks {name}")));
            }
        }
        Ok(Self { config, weights })
    }

    pub fn cast<U: NdFloat>(&self) -> FallbackEncoder<U> {
        FallbackEncoder {
            config: self.config.clone(),
            weights: self.weights.cast(),
        }
    }

    fn check_input(&self, input: &EncoderInput<'_>, batched: bool) -> Result<()> {
        if input.mode() != self.config.mode {
            return Err(Error::Config(format!(
                "{:?} input given to a {:?} encoder",
                input.mode(),
                self.config.mode
            )));
        }
        if !batched && input.len() > self.config.max_input {
            return Err(Error::SequenceTooLong {
                actual: input.len(),
                limit: self.config.max_input,
            });
        }
        let size = self.config.max_word_positions;
        if let Some(&id) = input.positional_ids().iter().find(|&&p| p >= size) {
            return Err(Error::PositionOverflow { id, size });
        }
        if let EncoderInput::Pixels(p) = input {
            if p.patches.ncols() != self.config.patch_dim {
                return Err(Error::ShapeError(format!(
                    "patch width {} vs encoder {}",
                    p.patches.ncols(),
                    self.config.patch_dim
                )));
            }
        }
        Ok(())
    }

    /// Input embeddings `N×d_model`.
    pub fn embed_input(&self, tape: &mut Tape<T>, bound: &Bound, input: &EncoderInput<'_>) -> Result<Var> {
        self.embed_checked(tape, bound, input, false)
    }

    fn embed_checked(&self, tape: &mut Tape<T>, bound: &Bound, input: &EncoderInput<'_>, batched: bool) -> Result<Var> {
        self.check_input(input, batched)?;
        let z = match input {
            EncoderInput::Pixels(p) => {
                let x = tape.constant(p.patches.mapv(|v| cast::<T>(v as f64)));
                tape.matmul(x, bound.var("patch_proj"))
            }
            EncoderInput::Bytes(b) => tape.gather(bound.var("byte_emb"), b.bytes.iter().map(|&v| v as usize).collect()),
        };
        let pos = tape.gather(bound.var("pos"), input.positional_ids().to_vec());
        Ok(tape.add(z, pos))
    }

    /// Final-layer states `N×d_model`, after the closing layer norm.
    pub fn hidden_states(&self, tape: &mut Tape<T>, bound: &Bound, input: &EncoderInput<'_>) -> Result<Var> {
        self.hidden_checked(tape, bound, input, false)
    }

    fn hidden_checked(&self, tape: &mut Tape<T>, bound: &Bound, input: &EncoderInput<'_>, batched: bool) -> Result<Var> {
        let mut x = self.embed_checked(tape, bound, input, batched)?;
        let layout = Rc::new(AttnLayout::new(input.word_offsets().to_vec(), false));
        for l in 0..self.config.n_layers {
            x = block_forward(tape, bound, &format!("layers.{l}"), x, self.config.n_heads, &layout, None);
        }
        Ok(tape.layer_norm(x, bound.var("ln_f.g"), bound.var("ln_f.b")))
    }

    /// Word embeddings `W×d_lm` on the tape.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, input: &EncoderInput<'_>) -> Result<Var> {
        self.forward_checked(tape, bound, input, false)
    }

    /// Forward over sequences joined with [`OwnedInput::concat`]; only the
    /// per-sequence cap (checked when each part was prepared) applies.
    pub fn forward_batch(&self, tape: &mut Tape<T>, bound: &Bound, input: &EncoderInput<'_>) -> Result<Var> {
        self.forward_checked(tape, bound, input, true)
    }

    fn forward_checked(&self, tape: &mut Tape<T>, bound: &Bound, input: &EncoderInput<'_>, batched: bool) -> Result<Var> {
        let h = self.hidden_checked(tape, bound, input, batched)?;
        let pooled = tape.segment_mean(h, input.word_offsets().to_vec());
        let out = tape.matmul(pooled, bound.var("out_proj"));
        if !tape.value(out).iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalError("encoder output".into()));
        }
        Ok(out)
    }

    /// Inference: one `d_lm` row per input word.
    pub fn encode(&self, input: &EncoderInput<'_>) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, input)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradients, relative_error};


    fn tiny(mode: InputMode) -> EncoderConfig {
        EncoderConfig {
            patch_dim: 64,
            max_word_positions: 8,
            feedforward_dim: 16,
            ..EncoderConfig::new(mode, 2, 8, 2, 6)
        }
    }

    fn words(text: &str) -> Vec<Word> {
        text.split_whitespace().map(|w| Word::new(w).unwrap()).collect()
    }

    fn small_render() -> RenderConfig {
        let mut c = RenderConfig::default();
        c.patch_size = 8;
        c
    }

    #[test]
    fn byte_sequence_examples() {
        let s = byte_sequence(&words("A")).unwrap();
        assert_eq!(s.bytes, vec![0x41]);
        assert_eq!(s.word_offsets, vec![(0, 1)]);
        // three Devanagari consonants, 3 UTF-8 bytes each
        let s = byte_sequence(&words("कखग")).unwrap();
        assert_eq!(s.bytes.len(), 9);
        let s = byte_sequence(&words("ab cde")).unwrap();
        assert_eq!(s.positional_ids, vec![0, 1, 0, 1, 2]);
        let long = vec![Word::new(&"x".repeat(2049)).unwrap()];
        assert!(matches!(byte_sequence(&long), Err(Error::SequenceTooLong { actual: 2049, limit: 2048 })));
    }

    #[test]
    fn mask_examples() {
        let m = block_attention_mask(&[(0, 2), (2, 1)]);
        let want = ndarray::arr2(&[[true, true, false], [true, true, false], [false, false, true]]);
        assert_eq!(m, want);
        assert!(block_attention_mask(&[(0, 4)]).iter().all(|&b| b));
        let id = block_attention_mask(&[(0, 1), (1, 1), (2, 1)]);
        assert_eq!(id, Array2::from_shape_fn((3, 3), |(i, j)| i == j));
    }

    #[test]
    fn span_attention_matches_dense_mask() {
        let mut rng = SplitMix64::new(8);
        let offsets = [(0, 3), (3, 1), (4, 2)];
        let q = normal_init::<f64>(&mut rng, 6, 4, 1.0);
        let k = normal_init::<f64>(&mut rng, 6, 4, 1.0);
        let v = normal_init::<f64>(&mut rng, 6, 4, 1.0);
        let dense = masked_attention_dense(&q, &k, &v, &block_attention_mask(&offsets));
        let span = span_attention(&q, &k, &v, &offsets);
        assert!(relative_error(&dense, &span) < 1e-14);
    }

    #[test]
    fn zero_patches_embed_to_positions() {
        let enc = FallbackEncoder::<f64>::init(tiny(InputMode::Pixel), 1).unwrap();
        let seq = PatchSequence {
            patch_size: 8,
            channels: 1,
            patches: Array2::zeros((3, 64)),
            word_offsets: vec![(0, 2), (2, 1)],
            positional_ids: vec![0, 1, 0],
        };
        let mut tape = Tape::new();
        let b = enc.weights.bind(&mut tape, false);
        let z = enc.embed_input(&mut tape, &b, &EncoderInput::Pixels(&seq)).unwrap();
        let pos = enc.weights.expect("pos");
        for (i, &p) in seq.positional_ids.iter().enumerate() {
            assert_eq!(tape.value(z).row(i), pos.row(p));
        }
    }

    #[test]
    fn byte_embedding_lookup() {
        let enc = FallbackEncoder::<f64>::init(tiny(InputMode::Byte), 1).unwrap();
        let seq = byte_sequence(&words("A")).unwrap();
        let mut tape = Tape::new();
        let b = enc.weights.bind(&mut tape, false);
        let z = enc.embed_input(&mut tape, &b, &EncoderInput::Bytes(&seq)).unwrap();
        let want = &enc.weights.expect("byte_emb").row(65) + &enc.weights.expect("pos").row(0);
        assert_eq!(tape.value(z).row(0), want);
    }

    #[test]
    fn repeated_word_embeds_identically() {
        let enc = FallbackEncoder::<f64>::init(tiny(InputMode::Pixel), 2).unwrap();
        let seq = render_sequence(&words("abc xy abc"), &small_render()).unwrap();
        let out = enc.encode(&EncoderInput::Pixels(&seq)).unwrap();
        assert_eq!(out.row(0), out.row(2));
    }

    #[test]
    fn rejects_wrong_mode_and_overflow() {
        let enc = FallbackEncoder::<f64>::init(tiny(InputMode::Byte), 1).unwrap();
        let seq = render_sequence(&words("ab"), &small_render()).unwrap();
        assert!(matches!(enc.encode(&EncoderInput::Pixels(&seq)), Err(Error::Config(_))));
        let long = byte_sequence(&words("abcdefghij")).unwrap();
        assert!(matches!(
            enc.encode(&EncoderInput::Bytes(&long)),
            Err(Error::PositionOverflow { id: 8, size: 8 })
        ));
    }

    #[test]
    fn mean_pool_of_equal_states() {
        let mut tape = Tape::<f64>::new();
        let row = ndarray::arr2(&[[0.1, -2.5, 3.0]]);
        let x = tape.constant(ndarray::concatenate(ndarray::Axis(0), &[row.view(), row.view(), row.view()]).unwrap());
        let m = tape.segment_mean(x, vec![(0, 3)]);
        assert!((tape.value(m) - &row).iter().all(|d| d.abs() < 1e-12));
        let y = tape.constant(ndarray::arr2(&[[1.0, 3.0], [3.0, 5.0]]));
        let m = tape.segment_mean(y, vec![(0, 2)]);
        assert_eq!(tape.value(m), &ndarray::arr2(&[[2.0, 4.0]]));
    }

    #[test]
    fn single_patch_identity_projection() {
        let mut cfg = tiny(InputMode::Pixel);
        cfg.d_lm = cfg.d_model;
        let mut enc = FallbackEncoder::<f64>::init(cfg, 3).unwrap();
        enc.weights.insert("out_proj", Array2::eye(8));
        let seq = render_sequence(&words("ab"), &small_render()).unwrap();
        let input = EncoderInput::Pixels(&seq);
        let mut tape = Tape::new();
        let b = enc.weights.bind(&mut tape, false);
        let h = enc.hidden_states(&mut tape, &b, &input).unwrap();
        let out = enc.encode(&input).unwrap();
        assert_eq!(out.row(0), tape.value(h).row(0));
    }

    #[test]
    fn word_independence_f64() {
        let enc = FallbackEncoder::<f64>::init(tiny(InputMode::Pixel), 4).unwrap();
        let cfg = small_render();
        let both = render_sequence(&words("hello wor"), &cfg).unwrap();
        let alone = render_sequence(&words("hello"), &cfg).unwrap();
        let a = enc.encode(&EncoderInput::Pixels(&both)).unwrap();
        let b = enc.encode(&EncoderInput::Pixels(&alone)).unwrap();
        assert_eq!(a.row(0), b.row(0));
    }

    #[test]
    fn encoder_gradcheck_pixels_and_bytes() {
        for mode in [InputMode::Pixel, InputMode::Byte] {
            let cfg = EncoderConfig {
                patch_dim: 64,
                max_word_positions: 6,
                feedforward_dim: 8,
                ..EncoderConfig::new(mode, 1, 4, 2, 3)
            };
            let enc = FallbackEncoder::<f64>::init(cfg, 5).unwrap();
            let ws = words("ab xyz");
            let pix = render_sequence(&ws, &small_render()).unwrap();
            let bytes = byte_sequence(&ws).unwrap();
            let input = match mode {
                InputMode::Pixel => EncoderInput::Pixels(&pix),
                InputMode::Byte => EncoderInput::Bytes(&bytes),
            };
            let names: Vec<String> = enc.weights.iter().map(|(n, _)| n.to_string()).collect();
            let values: Vec<Array2<f64>> = enc.weights.iter().map(|(_, v)| v * 10.0).collect();
            for i in 0..names.len() {
                // softmax is shift-invariant per row, so the key bias has an
                // exactly zero gradient and only finite-difference noise
                if names[i].ends_with("attn.k.b") {
                    continue;
                }
                let err = check_gradients(&values[i..i + 1], |t, v| {
                    let mut store = ParamStore::new();
                    let mut vars = Vec::new();
                    for (j, n) in names.iter().enumerate() {
                        vars.push(if j == i { v[0] } else { t.constant(values[j].clone()) });
                        store.insert(n.clone(), values[j].clone());
                    }
                    let bound = crate::nn::params::Bound::from_vars(&store, vars);
                    let e = FallbackEncoder::from_parts(enc.config.clone(), store).unwrap();
                    let out = e.forward(t, &bound, &input).unwrap();
                    let target = t.constant(Array2::from_elem((2, 3), 0.25));
                    t.sq_dist_mean(out, target)
                });
                assert!(err < 1e-4, "{mode:?} {}: {err}", names[i]);
            }
        }
    }

    #[test]
    fn closed_form_count_matches_store() {
        let cfg = tiny(InputMode::Pixel);
        let enc = FallbackEncoder::<f32>::init(cfg.clone(), 0).unwrap();
        assert_eq!(enc.weights.count(), cfg.param_count().0);
        let cfg = tiny(InputMode::Byte);
        let enc = FallbackEncoder::<f32>::init(cfg.clone(), 0).unwrap();
        assert_eq!(enc.weights.count(), cfg.param_count().0);
    }
}
