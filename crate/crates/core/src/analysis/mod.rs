//! chrF++, compression ratios, FLOPs estimates and modality-gap probes.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis, NdFloat};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, InputMode};
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::rng::SplitMix64;
use crate::textrender::{pretokenize, Segmenter};
use crate::tokenizer::BpeVocab;

pub const CHAR_ORDER: usize = 6;
pub const WORD_ORDER: usize = 2;
pub const BETA: f64 = 2.0;

/// Per-order `(hyp n-grams, ref n-grams, matches)`, character orders first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChrfStats(pub Vec<[usize; 3]>);

fn ngram_counts<T: std::hash::Hash + Eq + Clone>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn order_stats<T: std::hash::Hash + Eq + Clone>(hyp: &[T], reference: &[T], n: usize) -> [usize; 3] {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h.iter().map(|(g, &c)| c.min(*r.get(g).unwrap_or(&0))).sum();
    [h.values().sum(), r.values().sum(), matches]
}

impl ChrfStats {
    pub fn sentence(hypothesis: &str, reference: &str) -> Result<Self> {
        if reference.trim().is_empty() {
            return Err(Error::EmptyReference);
        }
        let hc: Vec<char> = hypothesis.chars().filter(|c| !c.is_whitespace()).collect();
        let rc: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
        let hw: Vec<&str> = hypothesis.split_whitespace().collect();
        let rw: Vec<&str> = reference.split_whitespace().collect();
        let mut v: Vec<[usize; 3]> = (1..=CHAR_ORDER).map(|n| order_stats(&hc, &rc, n)).collect();
        v.extend((1..=WORD_ORDER).map(|n| order_stats(&hw, &rw, n)));
        Ok(Self(v))
    }

    pub fn add(&mut self, other: &Self) {
        if self.0.is_empty() {
            self.0 = vec![[0; 3]; other.0.len()];
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
    }

    /// F_β per order, averaged over orders present in both hypothesis and
    /// reference; 0 when there are none.
    pub fn score(&self) -> f64 {
        let b2 = BETA * BETA;
        let mut total = 0.0;
        let mut orders = 0;
        for &[h, r, m] in &self.0 {
            if h == 0 || r == 0 {
                continue;
            }
            orders += 1;
            let p = m as f64 / h as f64;
            let rec = m as f64 / r as f64;
            if m > 0 {
                total += (1.0 + b2) * p * rec / (b2 * p + rec);
            }
        }
        if orders == 0 {
            0.0
        } else {
            100.0 * total / orders as f64
        }
    }
}

pub fn chrf_pp(hypothesis: &str, reference: &str) -> Result<f64> {
    Ok(ChrfStats::sentence(hypothesis, reference)?.score())
}

/// Statistics summed over all pairs before the F computation.
pub fn corpus_chrf_pp<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<f64> {
    let mut acc = ChrfStats::default();
    let mut any = false;
    for (h, r) in pairs {
        acc.add(&ChrfStats::sentence(h, r)?);
        any = true;
    }
    if !any {
        return Err(Error::EmptyCorpus);
    }
    Ok(acc.score())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineLengths {
    pub tokens: usize,
    pub words: usize,
    pub bytes: usize,
}

impl LineLengths {
    pub fn ratio(&self) -> Option<f64> {
        (self.words > 0).then(|| self.tokens as f64 / self.words as f64)
    }
}

pub fn line_lengths(text: &str, vocab: &BpeVocab, segmenter: &dyn Segmenter) -> Result<LineLengths> {
    Ok(LineLengths {
        tokens: vocab.encode(text).len(),
        words: match pretokenize(text, segmenter) {
            Ok(w) => w.len(),
            Err(Error::EmptyInput) => 0,
            Err(e) => return Err(e),
        },
        bytes: text.len(),
    })
}

/// Total tokenizer tokens over total fallback words.
pub fn compression_ratio<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    vocab: &BpeVocab,
    segmenter: &dyn Segmenter,
) -> Result<f64> {
    let (mut tokens, mut words) = (0, 0);
    for line in corpus {
        let l = line_lengths(line, vocab, segmenter)?;
        tokens += l.tokens;
        words += l.words;
    }
    if words == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(tokens as f64 / words as f64)
}

/// Average of per-line ratios, lines without words skipped.
pub fn mean_line_ratio<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    vocab: &BpeVocab,
    segmenter: &dyn Segmenter,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for line in corpus {
        if let Some(r) = line_lengths(line, vocab, segmenter)?.ratio() {
            sum += r;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(sum / n as f64)
}

/// Forward cost of one transformer layer over `t` positions whose attention
/// spans have squared lengths summing to `t2`.
pub fn layer_flops(t: u64, t2: u64, d: u64, d_ff: u64) -> u64 {
    8 * t * d * d + 4 * t2 * d + 4 * t * d * d_ff
}

/// Input lengths of one generation request.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Lengths {
    /// Encoder units (patches or bytes) of each fallback word.
    pub word_units: Vec<usize>,
    /// LM prompt length (tokens plus fallback words).
    pub prompt: usize,
    pub generated: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Flops {
    pub encoder: u64,
    pub prefill: u64,
    pub decode: u64,
}

impl Flops {
    pub fn total(&self) -> u64 {
        self.encoder + self.prefill + self.decode
    }
}

/// Analytic forward FLOPs with multiply-accumulate counted as 2.
///
/// The encoder runs once; generation step `i ≥ 2` attends over the cache and
/// reuses the fallback encodings, so it costs one position per layer.
pub fn flops_estimate(encoder: Option<&EncoderConfig>, lm: &LmConfig, len: &Lengths) -> Flops {
    let mut f = Flops::default();
    if let Some(e) = encoder {
        let (d, ff) = (e.d_model as u64, e.feedforward_dim as u64);
        let t: u64 = len.word_units.iter().map(|&n| n as u64).sum();
        let t2: u64 = len.word_units.iter().map(|&n| (n * n) as u64).sum();
        let input = match e.mode {
            InputMode::Pixel => 2 * t * e.patch_dim as u64 * d,
            InputMode::Byte => 0,
        };
        let out = 2 * len.word_units.len() as u64 * d * e.d_lm as u64;
        f.encoder = input + e.n_layers as u64 * layer_flops(t, t2, d, ff) + out;
    }
    let (d, ff, v) = (lm.d_lm as u64, lm.feedforward_dim as u64, lm.vocab_size as u64);
    let p = len.prompt as u64;
    f.prefill = lm.n_layers as u64 * layer_flops(p, p * p, d, ff) + 2 * d * v;
    for i in 1..len.generated as u64 {
        // one new position attending over p + i cached positions
        let ctx = p + i;
        f.decode += lm.n_layers as u64 * (8 * d * d + 4 * ctx * d + 4 * d * ff) + 2 * d * v;
    }
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub centroid_distance: f64,
    pub probe_accuracy: f64,
    pub n_soft: usize,
    pub n_vocab: usize,
}

pub const PROBE_STEPS: usize = 1000;
pub const PROBE_LR: f64 = 0.1;

fn to_f64<T: NdFloat>(m: &Array2<T>) -> Array2<f64> {
    m.mapv(|x| x.to_f64().expect("float"))
}

pub fn centroid_distance<T: NdFloat>(a: &Array2<T>, b: &Array2<T>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeError(format!("dimension {} vs {}", a.ncols(), b.ncols())));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let d = to_f64(a).mean_axis(Axis(0)).unwrap() - to_f64(b).mean_axis(Axis(0)).unwrap();
    Ok(d.dot(&d).sqrt())
}

/// Logistic probe: full-batch gradient descent on standardised features,
/// trained on a seeded 80% split, accuracy on the rest.
pub fn probe_accuracy(x: &Array2<f64>, y: &[bool], seed: u64) -> f64 {
    let n = x.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    SplitMix64::derive(seed, "probe").shuffle(&mut idx);
    let n_train = (n * 4 / 5).clamp(1, n.saturating_sub(1).max(1));
    let (train, test) = idx.split_at(n_train);
    let xt = x.select(Axis(0), train);
    let mean = xt.mean_axis(Axis(0)).unwrap();
    let std = xt.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let norm = |m: Array2<f64>| (m - &mean) / &std;
    let xt = norm(xt);
    let yt: Array1<f64> = train.iter().map(|&i| if y[i] { 1.0 } else { 0.0 }).collect();
    let mut w = Array1::<f64>::zeros(x.ncols());
    let mut b = 0.0;
    let m = train.len() as f64;
    for _ in 0..PROBE_STEPS {
        let z = xt.dot(&w) + b;
        let err = z.mapv(|z| 1.0 / (1.0 + (-z).exp())) - &yt;
        w = w - xt.t().dot(&err) * (PROBE_LR / m);
        b -= PROBE_LR * err.sum() / m;
    }
    if test.is_empty() {
        return 0.0;
    }
    let xs = norm(x.select(Axis(0), test));
    let z = xs.dot(&w) + b;
    let right = test.iter().zip(z.iter()).filter(|(&i, &z)| (z > 0.0) == y[i]).count();
    right as f64 / test.len() as f64
}

/// Centroid distance between fallback vectors `soft` and vocabulary
/// embeddings `vocab`, plus how well a linear probe tells them apart.
pub fn modality_gap<T: NdFloat>(soft: &Array2<T>, vocab: &Array2<T>, seed: u64) -> Result<GapReport> {
    let centroid_distance = centroid_distance(soft, vocab)?;
    let x = ndarray::concatenate(Axis(0), &[to_f64(soft).view(), to_f64(vocab).view()])
        .map_err(|e| Error::ShapeError(e.to_string()))?;
    let y: Vec<bool> = (0..x.nrows()).map(|i| i < soft.nrows()).collect();
    Ok(GapReport {
        centroid_distance,
        probe_accuracy: probe_accuracy(&x, &y, seed),
        n_soft: soft.nrows(),
        n_vocab: vocab.nrows(),
    })
}
