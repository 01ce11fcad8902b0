//! Routing between the vocabulary path (ASCII) and the fallback path
//! (everything else), and assembly of mixed LM inputs.

use ndarray::NdFloat;
use serde::{Deserialize, Serialize};

use crate::encoder::{FallbackEncoder, OwnedInput};
use crate::error::{Error, Result};
use crate::lm::{MixedSequence, Segment, IMG, N_SPECIAL, TXT};
use crate::textrender::{pretokenize, RenderConfig, WhitespaceSegmenter, Word};
use crate::tokenizer::BpeVocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Ascii,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalitySegment {
    pub kind: Kind,
    pub text: String,
}

/// Maximal ASCII / non-ASCII runs. Whitespace between runs of one kind stays
/// in the run; between differing kinds it ends the preceding segment.
/// Leading whitespace joins the first segment.
pub fn split_by_modality(text: &str) -> Vec<ModalitySegment> {
    let mut out: Vec<ModalitySegment> = Vec::new();
    let mut pending = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            pending.push(c);
            continue;
        }
        let kind = if c.is_ascii() { Kind::Ascii } else { Kind::Other };
        match out.last_mut() {
            Some(seg) if seg.kind == kind => {
                seg.text.push_str(&pending);
                seg.text.push(c);
            }
            Some(seg) => {
                seg.text.push_str(&pending);
                out.push(ModalitySegment { kind, text: c.to_string() });
            }
            None => out.push(ModalitySegment {
                kind,
                text: format!("{pending}{c}"),
            }),
        }
        pending.clear();
    }
    match out.last_mut() {
        Some(seg) => seg.text.push_str(&pending),
        None if !pending.is_empty() => out.push(ModalitySegment {
            kind: Kind::Ascii,
            text: pending,
        }),
        None => {}
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterleaveMode {
    /// Whole text through the tokenizer.
    Off,
    /// ASCII through the tokenizer, the rest through the fallback encoder.
    #[default]
    AsciiSplit,
    /// Whole text through the fallback encoder.
    ForcePixels,
}

impl std::str::FromStr for InterleaveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "ascii-split" => Ok(Self::AsciiSplit),
            "force-pixels" => Ok(Self::ForcePixels),
            _ => Err(Error::Config(format!("unknown interleave mode {s}"))),
        }
    }
}

/// Source text after routing, before the encoder runs.
#[derive(Debug, Clone, PartialEq)]
pub enum Piece {
    /// LM token ids (BPE ids shifted past the specials).
    Tokens(Vec<usize>),
    Words(Vec<Word>),
}

impl Piece {
    pub fn len(&self) -> usize {
        match self {
            Self::Tokens(t) => t.len(),
            Self::Words(w) => w.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn lm_ids(vocab: &BpeVocab, text: &str) -> Vec<usize> {
    vocab.encode(text).into_iter().map(|i| i + N_SPECIAL).collect()
}

/// Routes `text` into pieces, with an `<txt>`/`<img>` token before each
/// segment when `prefix` is set.
pub fn plan(text: &str, vocab: &BpeVocab, mode: InterleaveMode, prefix: bool) -> Result<Vec<Piece>> {
    let segments = match mode {
        InterleaveMode::Off => vec![(Kind::Ascii, text)],
        InterleaveMode::ForcePixels => vec![(Kind::Other, text)],
        InterleaveMode::AsciiSplit => {
            return plan_segments(&split_by_modality(text), vocab, prefix);
        }
    };
    let owned: Vec<ModalitySegment> = segments
        .into_iter()
        .map(|(kind, t)| ModalitySegment { kind, text: t.to_string() })
        .collect();
    plan_segments(&owned, vocab, prefix)
}

fn plan_segments(segments: &[ModalitySegment], vocab: &BpeVocab, prefix: bool) -> Result<Vec<Piece>> {
    let mut out = Vec::new();
    for seg in segments {
        let piece = match seg.kind {
            Kind::Ascii => Piece::Tokens(lm_ids(vocab, &seg.text)),
            Kind::Other => Piece::Words(pretokenize(&seg.text, &WhitespaceSegmenter)?),
        };
        if piece.is_empty() {
            continue;
        }
        if prefix {
            out.push(Piece::Tokens(vec![if seg.kind == Kind::Ascii { TXT } else { IMG }]));
        }
        out.push(piece);
    }
    Ok(out)
}

/// Fallback encoder together with how its inputs are prepared.
#[derive(Debug, Clone)]
pub struct Fallback<T> {
    pub encoder: FallbackEncoder<T>,
    pub render: RenderConfig,
}

impl<T: NdFloat> Fallback<T> {
    pub fn prepare(&self, words: &[Word]) -> Result<OwnedInput> {
        OwnedInput::prepare(words, self.encoder.config.mode, &self.render)
    }

    pub fn encode_words(&self, words: &[Word]) -> Result<ndarray::Array2<T>> {
        self.encoder.encode(&self.prepare(words)?.as_input())
    }
}

/// Turns pieces into a mixed sequence, encoding word pieces.
pub fn realize<T: NdFloat>(pieces: &[Piece], fallback: Option<&Fallback<T>>) -> Result<MixedSequence<T>> {
    let mut segments = Vec::with_capacity(pieces.len());
    for p in pieces {
        segments.push(match p {
            Piece::Tokens(t) => Segment::Vocab(t.clone()),
            Piece::Words(w) => {
                let f = fallback.ok_or_else(|| Error::Config("fallback-routed text but no fallback encoder".into()))?;
                Segment::Soft(f.encode_words(w)?)
            }
        });
    }
    Ok(MixedSequence::new(segments))
}

pub fn build_mixed<T: NdFloat>(
    text: &str,
    vocab: &BpeVocab,
    fallback: Option<&Fallback<T>>,
    mode: InterleaveMode,
    prefix: bool,
) -> Result<MixedSequence<T>> {
    realize(&plan(text, vocab, mode, prefix)?, fallback)
}
