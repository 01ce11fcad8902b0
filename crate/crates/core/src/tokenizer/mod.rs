//! Byte-level BPE: training, encoding, decoding and vocabulary union.
//!
//! Text is cut into chunks before merging, each chunk being a word with the
//! whitespace in front of it (`"abab abab"` → `"abab"`, `" abab"`). Merges
//! never cross chunk boundaries.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis, NdFloat};

use crate::error::{Error, Result};
use crate::lm::{LanguageModel, LmConfig, N_SPECIAL};
use crate::nn::tape::cast;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    /// `(left, right)` ids in training order; merge `i` yields `results[i]`.
    merges: Vec<(usize, usize)>,
    results: Vec<usize>,
    tokens: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
    ranks: HashMap<(usize, usize), usize>,
}

impl Default for BpeVocab {
    fn default() -> Self {
        Self::bytes_only()
    }
}

/// Splits text into chunks, whitespace attached to the following word.
pub fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws && i > start {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl BpeVocab {
    pub fn bytes_only() -> Self {
        let tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            merges: Vec::new(),
            results: Vec::new(),
            tokens,
            index,
            ranks: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: usize) -> Option<&[u8]> {
        self.tokens.get(id).map(Vec::as_slice)
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<usize> {
        self.index.get(bytes).copied()
    }

    /// Appends a merge; the result token is created when new.
    fn push_merge(&mut self, left: usize, right: usize) -> bool {
        if self.ranks.contains_key(&(left, right)) {
            return false;
        }
        let mut bytes = self.tokens[left].clone();
        bytes.extend_from_slice(&self.tokens[right]);
        let id = match self.index.get(&bytes) {
            Some(&id) => id,
            None => {
                self.tokens.push(bytes.clone());
                self.index.insert(bytes, self.tokens.len() - 1);
                self.tokens.len() - 1
            }
        };
        self.ranks.insert((left, right), self.merges.len());
        self.merges.push((left, right));
        self.results.push(id);
        true
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<usize>) {
        let mut ids: Vec<usize> = chunk.iter().map(|&b| b as usize).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let pair = self.merges[rank];
            let result = self.results[rank];
            let mut merged = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    merged.push(result);
                    i += 2;
                } else {
                    merged.push(ids[i]);
                    i += 1;
                }
            }
            ids = merged;
        }
        out.extend(ids);
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for c in chunks(text) {
            self.encode_chunk(c.as_bytes(), &mut out);
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.tokens.get(id).ok_or(Error::UnknownToken(id))?);
        }
        Ok(out)
    }

    /// Decodes to text; invalid UTF-8 (from truncated generations) is
    /// replaced with U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("BPEV1\n");
        for &(l, r) in &self.merges {
            writeln!(s, "{} {}", hex(&self.tokens[l]), hex(&self.tokens[r])).unwrap();
        }
        for (id, t) in self.tokens.iter().enumerate() {
            writeln!(s, "{id}\t{}", hex(t)).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l.trim()) != Some("BPEV1") {
            return Err(Error::Format("vocab file must start with BPEV1".into()));
        }
        let bad = |n: usize| Error::Format(format!("vocab file line {}", n + 1));
        let mut merges = Vec::new();
        let mut table: Vec<(usize, Vec<u8>)> = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            if let Some((id, h)) = line.split_once('\t') {
                table.push((id.parse().map_err(|_| bad(n))?, unhex(h).ok_or_else(|| bad(n))?));
            } else {
                let (l, r) = line.split_once(' ').ok_or_else(|| bad(n))?;
                merges.push((unhex(l).ok_or_else(|| bad(n))?, unhex(r).ok_or_else(|| bad(n))?, n));
            }
        }
        table.sort();
        if table.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(Error::Format("token ids must be 0..N without gaps".into()));
        }
        let tokens: Vec<Vec<u8>> = table.into_iter().map(|(_, t)| t).collect();
        if tokens.len() < 256 || (0..256).any(|b| tokens[b] != [b as u8]) {
            return Err(Error::Format("ids 0..256 must be the single bytes".into()));
        }
        let index: HashMap<Vec<u8>, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Format("duplicate token byte strings".into()));
        }
        let mut v = Self {
            merges: Vec::new(),
            results: Vec::new(),
            tokens,
            index,
            ranks: HashMap::new(),
        };
        for (l, r, n) in merges {
            let (Some(l), Some(r)) = (v.id_of(&l), v.id_of(&r)) else {
                return Err(bad(n));
            };
            let mut cat = v.tokens[l].clone();
            cat.extend_from_slice(&v.tokens[r]);
            let Some(id) = v.id_of(&cat) else { return Err(bad(n)) };
            v.ranks.insert((l, r), v.merges.len());
            v.merges.push((l, r));
            v.results.push(id);
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 || s.is_empty() {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

/// Greedy most-frequent-pair merging until `target_size` tokens exist or no
/// pair occurs twice. Ties go to the smallest concatenated byte string, then
/// the smallest left token.
pub fn train_bpe<'a>(corpus: impl IntoIterator<Item = &'a str>, target_size: usize) -> Result<BpeVocab> {
    if target_size <= 256 {
        return Err(Error::InvalidTarget(target_size));
    }
    let mut freq: HashMap<&[u8], usize> = HashMap::new();
    for line in corpus {
        for c in chunks(line) {
            *freq.entry(c.as_bytes()).or_default() += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut words: Vec<(Vec<usize>, usize)> = freq
        .into_iter()
        .map(|(w, n)| (w.iter().map(|&b| b as usize).collect(), n))
        .collect();
    words.sort();
    let mut vocab = BpeVocab::bytes_only();
    while vocab.len() < target_size {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for (w, n) in &words {
            for p in w.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += n;
            }
        }
        let key = |&(l, r): &(usize, usize)| {
            let mut cat = vocab.tokens[l].clone();
            cat.extend_from_slice(&vocab.tokens[r]);
            (cat, vocab.tokens[l].clone())
        };
        let best = counts
            .iter()
            .filter(|(p, &n)| n >= 2 && !vocab.ranks.contains_key(p))
            .max_by(|(pa, na), (pb, nb)| na.cmp(nb).then_with(|| key(pb).cmp(&key(pa))));
        let Some((&pair, _)) = best else { break };
        vocab.push_merge(pair.0, pair.1);
        let result = *vocab.results.last().unwrap();
        for (w, _) in words.iter_mut() {
            let mut i = 0;
            let mut out = Vec::with_capacity(w.len());
            while i < w.len() {
                if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
                    out.push(result);
                    i += 2;
                } else {
                    out.push(w[i]);
                    i += 1;
                }
            }
            *w = out;
        }
    }
    Ok(vocab)
}

/// Union of two vocabularies: every base id is kept, then merges of `new`
/// are appended in order (re-expressed over the merged token table).
pub fn merge_vocabs(base: &BpeVocab, new: &BpeVocab) -> BpeVocab {
    let mut out = base.clone();
    for &(l, r) in &new.merges {
        let l = out.id_of(&new.tokens[l]).expect("components precede their merge");
        let r = out.id_of(&new.tokens[r]).expect("components precede their merge");
        out.push_merge(l, r);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NewRowInit {
    /// `N(0, σ²)` with σ the standard deviation of the base embeddings.
    Random,
    /// Mean of the base embedding rows.
    Mean,
}

/// Expands a language model to the union vocabulary. Base rows keep their
/// ids and values; genuinely new tokens get fresh rows.
pub fn expand_vocab<T: NdFloat>(
    base: &BpeVocab,
    new: &BpeVocab,
    lm: &LanguageModel<T>,
    init: NewRowInit,
    seed: u64,
) -> Result<(BpeVocab, LanguageModel<T>)> {
    let merged = merge_vocabs(base, new);
    let added = merged.len() - base.len();
    let table = lm.embedding_table();
    let fresh = |rng: &mut SplitMix64, src: &Array2<T>, rows: usize| -> Array2<T> {
        match init {
            NewRowInit::Mean => {
                let mean = src.sum_axis(Axis(0)) / cast::<T>(src.nrows() as f64);
                mean.broadcast((rows, src.ncols())).expect("row").to_owned()
            }
            NewRowInit::Random => {
                let n = src.len() as f64;
                let mu = src.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
                let var = src.iter().map(|v| (v.to_f64().unwrap() - mu).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                Array2::from_shape_simple_fn((rows, src.ncols()), || cast(rng.normal() * sd))
            }
        }
    };
    let mut rng = SplitMix64::derive(seed, "expand");
    let mut weights = lm.weights.clone();
    let rows = fresh(&mut rng, table, added);
    weights.insert("tok_emb", concatenate(Axis(0), &[table.view(), rows.view()]).expect("widths"));
    if let Some(head) = lm.weights.get("head") {
        let cols = fresh(&mut rng, &head.t().to_owned(), added).reversed_axes();
        weights.insert("head", concatenate(Axis(1), &[head.view(), cols.view()]).expect("heights"));
    }
    let config = LmConfig {
        vocab_size: lm.config.vocab_size + added,
        ..lm.config.clone()
    };
    debug_assert_eq!(config.vocab_size, merged.len() + N_SPECIAL);
    Ok((merged, LanguageModel::from_parts(config, weights)?))
}

pub fn token_count(text: &str, vocab: &BpeVocab) -> usize {
    vocab.encode(text).len()
}
