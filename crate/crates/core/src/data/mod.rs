//! Parallel corpora: TSV and Pharaoh I/O plus synthetic task generators.
//!
//! The cipher task builds small English sentences and "translates" them by
//! substituting each letter with a fixed codepoint from a non-ASCII block.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub type Alignment = Vec<(usize, usize)>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(String, String)>,
    /// Source-word to target-word links, one list per pair.
    pub alignments: Option<Vec<Alignment>>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(s, _)| s.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(_, t)| t.as_str())
    }

    /// First `n` pairs and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let (a, b) = self.pairs.split_at(n);
        let (al, bl) = match &self.alignments {
            Some(x) => (Some(x[..n].to_vec()), Some(x[n..].to_vec())),
            None => (None, None),
        };
        (
            Self {
                pairs: a.to_vec(),
                alignments: al,
            },
            Self {
                pairs: b.to_vec(),
                alignments: bl,
            },
        )
    }
}

pub fn parse_tsv(text: &str) -> Result<ParallelCorpus> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let (s, t) = line.split_once('\t').ok_or(Error::MissingTab(n + 1))?;
        if s.trim().is_empty() || t.trim().is_empty() {
            return Err(Error::EmptyField(n + 1));
        }
        pairs.push((s.to_string(), t.to_string()));
    }
    Ok(ParallelCorpus {
        pairs,
        alignments: None,
    })
}

pub fn load_tsv(path: &Path) -> Result<ParallelCorpus> {
    parse_tsv(&std::fs::read_to_string(path)?)
}

pub fn to_tsv(corpus: &ParallelCorpus) -> String {
    let mut s = String::new();
    for (a, b) in &corpus.pairs {
        writeln!(s, "{a}\t{b}").unwrap();
    }
    s
}

pub fn save_tsv(corpus: &ParallelCorpus, path: &Path) -> Result<()> {
    std::fs::write(path, to_tsv(corpus))?;
    Ok(())
}

pub fn format_pharaoh(alignments: &[Alignment]) -> String {
    let mut s = String::new();
    for line in alignments {
        let parts: Vec<String> = line.iter().map(|(i, j)| format!("{i}-{j}")).collect();
        writeln!(s, "{}", parts.join(" ")).unwrap();
    }
    s
}

pub fn parse_pharaoh(text: &str) -> Result<Vec<Alignment>> {
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            line.split_whitespace()
                .map(|p| {
                    let (i, j) = p.split_once('-')?;
                    Some((i.parse().ok()?, j.parse().ok()?))
                })
                .collect::<Option<Alignment>>()
                .ok_or_else(|| Error::Format(format!("alignment line {}", n + 1)))
        })
        .collect()
}

pub fn load_pharaoh(path: &Path) -> Result<Vec<Alignment>> {
    parse_pharaoh(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Script {
    Cyrillic,
    Devanagari,
    /// Sources equal targets.
    Identity,
}

impl std::str::FromStr for Script {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyrillic" => Ok(Self::Cyrillic),
            "devanagari" => Ok(Self::Devanagari),
            "identity" => Ok(Self::Identity),
            _ => Err(Error::Config(format!("unknown script {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CipherSpec {
    pub script: Script,
    /// Reverse the word order of sources.
    pub permute: bool,
}

impl Default for CipherSpec {
    fn default() -> Self {
        Self {
            script: Script::Cyrillic,
            permute: false,
        }
    }
}

/// Fixed letter substitution for a script. Cyrillic uses а..щ
/// (U+0430–U+0449), Devanagari the consonants क..म (U+0915–U+092E); both are
/// shuffled with a constant key.
pub fn cipher_table(script: Script) -> HashMap<char, char> {
    let start = match script {
        Script::Cyrillic => 0x0430,
        Script::Devanagari => 0x0915,
        Script::Identity => return ('a'..='z').map(|c| (c, c)).collect(),
    };
    let mut block: Vec<char> = (start..start + 26).map(|c| char::from_u32(c).unwrap()).collect();
    SplitMix64::new(0x6369_7068_6572).shuffle(&mut block);
    ('a'..='z').zip(block).collect()
}

pub fn encipher(text: &str, script: Script) -> String {
    let t = cipher_table(script);
    text.chars().map(|c| *t.get(&c).unwrap_or(&c)).collect()
}

pub fn decipher(text: &str, script: Script) -> String {
    let inv: HashMap<char, char> = cipher_table(script).into_iter().map(|(a, b)| (b, a)).collect();
    text.chars().map(|c| *inv.get(&c).unwrap_or(&c)).collect()
}

const DET: &[&str] = &["the", "a", "my", "one"];
const ADJ: &[&str] = &["big", "small", "red", "old", "new", "happy", "quiet", "brave"];
const NOUN: &[&str] = &["cat", "dog", "bird", "fish", "king", "girl", "boy", "tree", "house", "river", "horse", "child"];
const VERB_T: &[&str] = &["sees", "likes", "finds", "wants", "helps", "calls", "takes", "meets"];
const VERB_I: &[&str] = &["runs", "sleeps", "sings", "waits"];
const ADV: &[&str] = &["today", "again", "often", "now", "here", "slowly"];

fn pick<'a>(rng: &mut SplitMix64, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len() as u64) as usize]
}

fn noun_phrase<'a>(rng: &mut SplitMix64, out: &mut Vec<&'a str>) {
    out.push(pick(rng, DET));
    if rng.bernoulli(0.5) {
        out.push(pick(rng, ADJ));
    }
    out.push(pick(rng, NOUN));
}

/// One English-like sentence of 3 to 8 words.
pub fn sentence(rng: &mut SplitMix64) -> String {
    let mut w = Vec::new();
    noun_phrase(rng, &mut w);
    if rng.bernoulli(0.7) {
        w.push(pick(rng, VERB_T));
        noun_phrase(rng, &mut w);
    } else {
        w.push(pick(rng, VERB_I));
    }
    if rng.bernoulli(0.4) {
        w.push(pick(rng, ADV));
    }
    w.join(" ")
}

/// All words the sentence generator can emit.
pub fn task_words() -> Vec<&'static str> {
    [DET, ADJ, NOUN, VERB_T, VERB_I, ADV].concat()
}

pub fn gen_cipher_task(n_pairs: usize, seed: u64, spec: CipherSpec) -> ParallelCorpus {
    let mut rng = SplitMix64::derive(seed, "cipher");
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut aligns = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let tgt = sentence(&mut rng);
        let mut words: Vec<String> = tgt.split(' ').map(|w| encipher(w, spec.script)).collect();
        let n = words.len();
        let align: Alignment = if spec.permute {
            words.reverse();
            (0..n).map(|i| (i, n - 1 - i)).collect()
        } else {
            (0..n).map(|i| (i, i)).collect()
        };
        pairs.push((words.join(" "), tgt));
        aligns.push(align);
    }
    ParallelCorpus {
        pairs,
        alignments: Some(aligns),
    }
}

/// Cipher pairs where each source word stays plain ASCII with probability
/// `ratio`. Returns the corpus and, per pair, which source words are ASCII.
pub fn gen_codeswitch_task(n_pairs: usize, seed: u64, ratio: f64, script: Script) -> Result<(ParallelCorpus, Vec<Vec<bool>>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("code-switch ratio {ratio} outside [0, 1]")));
    }
    let mut corpus = gen_cipher_task(
        n_pairs,
        seed,
        CipherSpec {
            script,
            permute: false,
        },
    );
    let mut coin = SplitMix64::derive(seed, "codeswitch");
    let mut masks = Vec::with_capacity(n_pairs);
    for (src, tgt) in corpus.pairs.iter_mut() {
        let mut mask = Vec::new();
        let words: Vec<String> = tgt
            .split(' ')
            .map(|w| {
                let ascii = coin.bernoulli(ratio);
                mask.push(ascii);
                if ascii {
                    w.to_string()
                } else {
                    encipher(w, script)
                }
            })
            .collect();
        *src = words.join(" ");
        masks.push(mask);
    }
    Ok((corpus, masks))
}
