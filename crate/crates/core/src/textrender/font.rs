//! Glyph sources for the patch renderer.
//!
//! The embedded font is fully deterministic:
//!
//! * printable ASCII, Latin-1 (U+00A0–U+00FF) and Greek (U+0390–U+03C9) use
//!   the public-domain 8×8 `font8x8` bitmaps;
//! * Cyrillic (U+0400–U+04FF) and Devanagari (U+0900–U+097F) use synthetic
//!   8×8 glyphs derived from a SplitMix64 hash of the codepoint. They are
//!   pairwise distinct but not typographically faithful. Devanagari base
//!   glyphs carry a top bar; Devanagari combining marks are two-row overlays
//!   drawn into the cell of the base they attach to.
//!
//! [`HexFont`] loads GNU Unifont `.hex` files for real coverage of other
//! scripts.

use std::collections::HashMap;
use std::path::Path;

use font8x8::{UnicodeFonts, BASIC_FONTS, GREEK_FONTS, LATIN_FONTS};

use crate::error::{Error, Result};
use crate::rng::mix;

/// A 1-bit glyph bitmap, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Glyph {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
    /// Combining marks draw into the preceding cell and do not advance.
    pub combining: bool,
}

impl Glyph {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    fn from_rows8(rows: [u8; 8], combining: bool) -> Self {
        let mut bits = Vec::with_capacity(64);
        for row in rows {
            for x in 0..8 {
                bits.push(row >> x & 1 == 1);
            }
        }
        Self {
            width: 8,
            height: 8,
            bits,
            combining,
        }
    }
}

pub trait FontBackend: Send + Sync {
    fn glyph(&self, c: char) -> Result<Glyph>;
    /// Nominal glyph height, used to centre text vertically.
    fn cell_height(&self) -> usize;
}

pub const DEVANAGARI: std::ops::RangeInclusive<u32> = 0x0900..=0x097F;
pub const CYRILLIC: std::ops::RangeInclusive<u32> = 0x0400..=0x04FF;

#[derive(Debug, Clone, Copy, Default)]
pub struct EmbeddedFont;

fn is_devanagari_mark(cp: u32) -> bool {
    matches!(cp, 0x0900..=0x0903 | 0x093A..=0x093C | 0x093E..=0x094F | 0x0951..=0x0957 | 0x0962..=0x0963)
}

fn synthetic_rows(cp: u32, top_bar: bool) -> [u8; 8] {
    let mut h = mix(cp as u64 ^ 0x5049_5846_4f4e_5421);
    let mut rows = [0u8; 8];
    let first = if top_bar { 2 } else { 1 };
    for row in rows.iter_mut().take(8).skip(first) {
        // columns 1..=6
        *row = ((h & 0x3F) as u8) << 1;
        h >>= 6;
    }
    if top_bar {
        rows[1] = 0xFF;
    }
    // a fixed stem so sparse hashes still ink
    rows[4] |= 0x08;
    rows
}

fn mark_rows(cp: u32) -> [u8; 8] {
    let h = mix(cp as u64 ^ 0x4d41_524b);
    let band = (h as u8 & 0x7E) | 0x18;
    let band2 = ((h >> 8) as u8 & 0x7E) | 0x24;
    let mut rows = [0u8; 8];
    match cp {
        // above
        0x0900..=0x0902 | 0x0945..=0x0948 | 0x0951..=0x0957 => {
            rows[0] = band;
            rows[1] = ((h >> 24) as u8 & 0x7E) | 0x42;
        }
        // below
        0x0941..=0x0944 | 0x094D | 0x093C | 0x0962..=0x0963 => {
            rows[7] = band;
            rows[6] = band2;
        }
        // right edge
        _ => {
            for (i, r) in rows.iter_mut().enumerate().skip(1) {
                *r = ((((h >> (3 * i + 16)) & 7) as u8) << 5) | 0x80;
            }
            rows[0] = band & 0xF0;
        }
    }
    rows
}

impl FontBackend for EmbeddedFont {
    fn glyph(&self, c: char) -> Result<Glyph> {
        let cp = c as u32;
        if (0x20..0x7F).contains(&cp) {
            return BASIC_FONTS.get(c).map(|r| Glyph::from_rows8(r, false)).ok_or(Error::GlyphMissing(cp));
        }
        if (0xA0..=0xFF).contains(&cp) {
            return LATIN_FONTS.get(c).map(|r| Glyph::from_rows8(r, false)).ok_or(Error::GlyphMissing(cp));
        }
        if (0x0390..=0x03C9).contains(&cp) {
            return GREEK_FONTS.get(c).map(|r| Glyph::from_rows8(r, false)).ok_or(Error::GlyphMissing(cp));
        }
        if CYRILLIC.contains(&cp) {
            return Ok(Glyph::from_rows8(synthetic_rows(cp, false), false));
        }
        if DEVANAGARI.contains(&cp) {
            if is_devanagari_mark(cp) {
                return Ok(Glyph::from_rows8(mark_rows(cp), true));
            }
            return Ok(Glyph::from_rows8(synthetic_rows(cp, true), false));
        }
        Err(Error::GlyphMissing(cp))
    }

    fn cell_height(&self) -> usize {
        8
    }
}

/// GNU Unifont `.hex` glyphs (`CODEPOINT:HEX`, 8×16 or 16×16). Common
/// combining-mark ranges (Latin, Cyrillic, Hebrew, Thai, Devanagari) are
/// flagged combining.
#[derive(Debug, Clone)]
pub struct HexFont {
    glyphs: HashMap<u32, Glyph>,
}

impl HexFont {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::BackendError(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut glyphs = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::BackendError(format!("hex font line {}", n + 1));
            let (cp, hex) = line.split_once(':').ok_or_else(bad)?;
            let cp = u32::from_str_radix(cp, 16).map_err(|_| bad())?;
            let width = match hex.len() {
                32 => 8,
                64 => 16,
                _ => return Err(bad()),
            };
            let mut bits = Vec::with_capacity(width * 16);
            let digits: Vec<u8> = hex
                .chars()
                .map(|c| c.to_digit(16).map(|d| d as u8))
                .collect::<Option<_>>()
                .ok_or_else(bad)?;
            for row in digits.chunks(width / 4) {
                for nib in row {
                    for b in (0..4).rev() {
                        bits.push(nib >> b & 1 == 1);
                    }
                }
            }
            let combining = char::from_u32(cp).is_some_and(is_combining_mark);
            glyphs.insert(
                cp,
                Glyph {
                    width,
                    height: 16,
                    bits,
                    combining,
                },
            );
        }
        Ok(Self { glyphs })
    }
}

fn is_combining_mark(c: char) -> bool {
    let cp = c as u32;
    matches!(cp, 0x0300..=0x036F | 0x0483..=0x0489 | 0x0591..=0x05BD | 0x0E31 | 0x0E34..=0x0E3A | 0x0E47..=0x0E4E)
        || is_devanagari_mark(cp)
}

impl FontBackend for HexFont {
    fn glyph(&self, c: char) -> Result<Glyph> {
        self.glyphs.get(&(c as u32)).cloned().ok_or(Error::GlyphMissing(c as u32))
    }

    fn cell_height(&self) -> usize {
        16
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn covers_printable_ascii() {
        for c in ' '..='~' {
            assert!(EmbeddedFont.glyph(c).is_ok(), "{c:?}");
        }
        assert!(matches!(EmbeddedFont.glyph('\u{4E00}'), Err(Error::GlyphMissing(0x4E00))));
    }

    #[test]
    fn ascii_letter_shape() {
        // 'H' has two vertical strokes in font8x8.
        let g = EmbeddedFont.glyph('H').unwrap();
        let ink: usize = g.bits.iter().filter(|&&b| b).count();
        assert!(ink > 10);
        assert!(!g.combining);
    }

    #[test]
    fn synthetic_blocks_are_distinct() {
        for block in [CYRILLIC, DEVANAGARI] {
            let mut seen = HashSet::new();
            for cp in block {
                let g = EmbeddedFont.glyph(char::from_u32(cp).unwrap()).unwrap();
                assert!(g.bits.iter().any(|&b| b));
                assert!(seen.insert((g.bits.clone(), g.combining)), "U+{cp:04X} duplicates");
            }
        }
    }

    #[test]
    fn virama_is_combining() {
        assert!(EmbeddedFont.glyph('\u{094D}').unwrap().combining);
        assert!(!EmbeddedFont.glyph('\u{0928}').unwrap().combining);
    }

    #[test]
    fn hex_font_parses() {
        let f = HexFont::parse("0041:0000000018242442427E424242420000\n").unwrap();
        let g = f.glyph('A').unwrap();
        assert_eq!((g.width, g.height), (8, 16));
        assert!(g.get(3, 4));
        assert!(!g.get(0, 0));
        assert!(matches!(f.glyph('B'), Err(Error::GlyphMissing(0x42))));
        assert!(HexFont::parse("zz:00").is_err());
    }
}
