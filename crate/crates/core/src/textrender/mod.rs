//! Text to pixel patches.
//!
//! Words are split into extended grapheme clusters, windowed into
//! overlapping grapheme bigrams, and each bigram is drawn left-aligned into a
//! `P×P×C` patch. A word with `G` graphemes yields `max(1, G−1)` patches.

pub mod font;

use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::Array2;
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};
use font::{EmbeddedFont, FontBackend, HexFont};

pub const DEFAULT_PATCH_SIZE: usize = 24;
pub const DEFAULT_MAX_PATCHES: usize = 529;
pub const DEFAULT_MAX_WORD_PATCHES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FontSpec {
    Embedded,
    /// GNU Unifont `.hex` file.
    System(std::path::PathBuf),
}

#[derive(Clone)]
pub struct RenderConfig {
    pub patch_size: usize,
    pub channels: usize,
    pub ink_value: f32,
    pub background_value: f32,
    pub max_patches: usize,
    pub max_word_patches: usize,
    font: Arc<dyn FontBackend>,
    font_spec: FontSpec,
}

impl std::fmt::Debug for RenderConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RenderConfig")
            .field("patch_size", &self.patch_size)
            .field("channels", &self.channels)
            .field("ink_value", &self.ink_value)
            .field("background_value", &self.background_value)
            .field("max_patches", &self.max_patches)
            .field("max_word_patches", &self.max_word_patches)
            .field("font", &self.font_spec)
            .finish()
    }
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            channels: 1,
            ink_value: 1.0,
            background_value: 0.0,
            max_patches: DEFAULT_MAX_PATCHES,
            max_word_patches: DEFAULT_MAX_WORD_PATCHES,
            font: Arc::new(EmbeddedFont),
            font_spec: FontSpec::Embedded,
        }
    }
}

impl RenderConfig {
    pub fn with_font(mut self, spec: FontSpec) -> Result<Self> {
        self.font = match &spec {
            FontSpec::Embedded => Arc::new(EmbeddedFont),
            FontSpec::System(path) => Arc::new(HexFont::load(path)?),
        };
        self.font_spec = spec;
        Ok(self)
    }

    pub fn with_backend(mut self, backend: Arc<dyn FontBackend>, spec: FontSpec) -> Self {
        self.font = backend;
        self.font_spec = spec;
        self
    }

    pub fn font_spec(&self) -> &FontSpec {
        &self.font_spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 8 {
            return Err(Error::Config(format!("patch size {} < 8", self.patch_size)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(0.0 <= self.background_value && self.background_value < self.ink_value && self.ink_value <= 1.0) {
            return Err(Error::Config("need 0 <= background < ink <= 1".into()));
        }
        if self.max_patches == 0 || self.max_word_patches == 0 {
            return Err(Error::Config("patch limits must be positive".into()));
        }
        Ok(())
    }

    /// Floats per patch, `P²·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Word {
    pub text: String,
    pub graphemes: Vec<String>,
}

impl Word {
    pub fn new(text: &str) -> Result<Self> {
        let graphemes: Vec<String> = text.graphemes(true).map(str::to_owned).collect();
        if graphemes.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Self {
            text: text.to_owned(),
            graphemes,
        })
    }

    pub fn grapheme_count(&self) -> usize {
        self.graphemes.len()
    }

    pub fn patch_count(&self) -> usize {
        self.graphemes.len().saturating_sub(1).max(1)
    }
}

/// Splits text into word strings. Implementations must return non-empty
/// slices of the input.
pub trait Segmenter: Send + Sync {
    fn segment<'a>(&self, text: &'a str) -> Vec<&'a str>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceSegmenter;

impl Segmenter for WhitespaceSegmenter {
    fn segment<'a>(&self, text: &'a str) -> Vec<&'a str> {
        text.split_whitespace().collect()
    }
}

pub fn pretokenize(text: &str, segmenter: &dyn Segmenter) -> Result<Vec<Word>> {
    let words: Vec<Word> = segmenter
        .segment(text)
        .into_iter()
        .filter(|w| !w.is_empty())
        .map(Word::new)
        .collect::<Result<_>>()?;
    if words.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(words)
}

/// Overlapping grapheme bigrams; a single-grapheme word is its own window.
pub fn bigram_windows(word: &Word) -> Vec<String> {
    match word.graphemes.as_slice() {
        [only] => vec![only.clone()],
        gs => gs.windows(2).map(|w| format!("{}{}", w[0], w[1])).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedWord {
    pub word: Word,
    /// One `P·P·C` buffer per patch, laid out `[y][x][c]`.
    pub patches: Vec<Vec<f32>>,
}

/// Rasterizes one window of graphemes into a patch buffer.
fn draw_window(graphemes: &[&str], config: &RenderConfig) -> Result<Vec<f32>> {
    let p = config.patch_size;
    let ch = config.channels;
    let mut buf = vec![config.background_value; p * p * ch];
    let font = &config.font;
    let top = p.saturating_sub(font.cell_height()) / 2;
    let mut cursor = 1usize;
    for g in graphemes {
        let mut cell_start = cursor;
        let mut advance = 0usize;
        let mut mark_width = 0usize;
        for c in g.chars() {
            let glyph = font.glyph(c)?;
            let x0 = if glyph.combining { cell_start } else { cursor + advance };
            if glyph.combining {
                mark_width = mark_width.max(glyph.width);
            } else {
                cell_start = x0;
                advance += glyph.width + 1;
            }
            for y in 0..glyph.height {
                let py = top + y;
                if py >= p {
                    break;
                }
                for x in 0..glyph.width {
                    let px = x0 + x;
                    if px >= p {
                        break;
                    }
                    if glyph.get(x, y) {
                        let at = (py * p + px) * ch;
                        buf[at..at + ch].fill(config.ink_value);
                    }
                }
            }
        }
        // A grapheme made only of marks still takes a cell.
        cursor += if advance == 0 { mark_width + 1 } else { advance };
    }
    Ok(buf)
}

pub fn render_word(word: &Word, config: &RenderConfig) -> Result<RenderedWord> {
    config.validate()?;
    let gs: Vec<&str> = word.graphemes.iter().map(String::as_str).collect();
    let windows: Vec<&[&str]> = if gs.len() == 1 { vec![&gs[..]] } else { gs.windows(2).collect() };
    let patches = windows.into_iter().map(|w| draw_window(w, config)).collect::<Result<_>>()?;
    Ok(RenderedWord {
        word: word.clone(),
        patches,
    })
}

/// Concatenated patches of a word list with per-word spans.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub patch_size: usize,
    pub channels: usize,
    /// `N × P²C`
    pub patches: Array2<f32>,
    pub word_offsets: Vec<(usize, usize)>,
    pub positional_ids: Vec<usize>,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }

    pub fn word_count(&self) -> usize {
        self.word_offsets.len()
    }

    /// Builds a sequence from already-rendered words (e.g. from a cache).
    pub fn from_rendered(words: &[&RenderedWord], config: &RenderConfig) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::EmptyInput);
        }
        let total: usize = words.iter().map(|w| w.patches.len()).sum();
        if total > config.max_patches {
            return Err(Error::SequenceTooLong {
                actual: total,
                limit: config.max_patches,
            });
        }
        let dim = config.patch_dim();
        let mut data = Vec::with_capacity(total * dim);
        let mut word_offsets = Vec::with_capacity(words.len());
        let mut positional_ids = Vec::with_capacity(total);
        for w in words {
            if w.patches.len() > config.max_word_patches {
                return Err(Error::SequenceTooLong {
                    actual: w.patches.len(),
                    limit: config.max_word_patches,
                });
            }
            word_offsets.push((positional_ids.len(), w.patches.len()));
            for (i, p) in w.patches.iter().enumerate() {
                data.extend_from_slice(p);
                positional_ids.push(i);
            }
        }
        Ok(Self {
            patch_size: config.patch_size,
            channels: config.channels,
            patches: Array2::from_shape_vec((total, dim), data).expect("patch buffer size"),
            word_offsets,
            positional_ids,
        })
    }
}

pub fn render_sequence(words: &[Word], config: &RenderConfig) -> Result<PatchSequence> {
    if words.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: usize = words.iter().map(Word::patch_count).sum();
    if total > config.max_patches {
        return Err(Error::SequenceTooLong {
            actual: total,
            limit: config.max_patches,
        });
    }
    let rendered: Vec<RenderedWord> = words.iter().map(|w| render_word(w, config)).collect::<Result<_>>()?;
    let refs: Vec<&RenderedWord> = rendered.iter().collect();
    PatchSequence::from_rendered(&refs, config)
}

const PATCH_MAGIC: &[u8; 4] = b"PXF1";

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Patch dump: `"PXF1"`, u32 N, P, C, word count, word spans, N·P·P·C f32
/// pixels, N u32 positional ids; all little-endian.
pub fn write_patch_dump(seq: &PatchSequence, w: &mut impl Write) -> Result<()> {
    w.write_all(PATCH_MAGIC)?;
    put_u32(w, seq.len())?;
    put_u32(w, seq.patch_size)?;
    put_u32(w, seq.channels)?;
    put_u32(w, seq.word_offsets.len())?;
    for &(s, l) in &seq.word_offsets {
        put_u32(w, s)?;
        put_u32(w, l)?;
    }
    for v in seq.patches.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    for &p in &seq.positional_ids {
        put_u32(w, p)?;
    }
    Ok(())
}

pub fn read_patch_dump(r: &mut impl Read) -> Result<PatchSequence> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PATCH_MAGIC {
        return Err(Error::Format("not a PXF1 patch dump".into()));
    }
    let n = get_u32(r)?;
    let p = get_u32(r)?;
    let c = get_u32(r)?;
    let wc = get_u32(r)?;
    let mut word_offsets = Vec::with_capacity(wc);
    for _ in 0..wc {
        word_offsets.push((get_u32(r)?, get_u32(r)?));
    }
    let dim = p * p * c;
    let mut raw = vec![0u8; n * dim * 4];
    r.read_exact(&mut raw)?;
    let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let positional_ids = (0..n).map(|_| get_u32(r)).collect::<Result<_>>()?;
    Ok(PatchSequence {
        patch_size: p,
        channels: c,
        patches: Array2::from_shape_vec((n, dim), data).map_err(|e| Error::Format(e.to_string()))?,
        word_offsets,
        positional_ids,
    })
}
