//! GNU Unifont `.hex` glyph storage.
//!
//! Each line of a `.hex` file holds one glyph: `CODEPOINT:PAYLOAD`, where the
//! codepoint is 4 to 6 hex digits and the payload is either 32 hex digits
//! (an 8×16 glyph, one byte per row) or 64 hex digits (a 16×16 glyph, two
//! bytes per row). Bits are read MSB-first per row, rows top to bottom.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use thiserror::Error;

/// Glyph height in pixels. Unifont glyphs are always 16 rows tall.
pub const GLYPH_HEIGHT: usize = 16;

#[derive(Debug, Error)]
pub enum FontError {
    #[error("malformed codepoint prefix {0:?}")]
    MalformedCodepoint(String),
    #[error("missing ':' separator")]
    MissingSeparator,
    #[error("payload has {0} hex digits, expected 32 or 64")]
    BadPayloadLength(usize),
    #[error("payload contains non-hex character {0:?}")]
    NonHexPayload(char),
    #[error("no glyphs parsed from {lines} lines")]
    NoGlyphs { lines: usize },
    #[error("font source is not readable: {0}")]
    Io(#[from] std::io::Error),
}

/// A monochrome 8×16 or 16×16 glyph.
///
/// Rows are stored right-aligned in a `u16`: for an 8-pixel glyph only the
/// low byte is used, and bit `width - 1 - x` holds column `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GlyphBitmap {
    width: u8,
    rows: [u16; GLYPH_HEIGHT],
}

impl GlyphBitmap {
    pub fn blank(width: usize) -> Self {
        assert!(width == 8 || width == 16, "glyph width must be 8 or 16");
        Self {
            width: width as u8,
            rows: [0; GLYPH_HEIGHT],
        }
    }

    /// The fallback glyph: an 8×16 box with a one-pixel border.
    pub fn notdef() -> Self {
        let mut rows = [0x81u16; GLYPH_HEIGHT];
        rows[0] = 0xFF;
        rows[GLYPH_HEIGHT - 1] = 0xFF;
        Self { width: 8, rows }
    }

    pub fn from_rows(width: usize, rows: [u16; GLYPH_HEIGHT]) -> Self {
        assert!(width == 8 || width == 16, "glyph width must be 8 or 16");
        let mask = if width == 8 { 0xFF } else { 0xFFFF };
        Self {
            width: width as u8,
            rows: rows.map(|r| r & mask),
        }
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn height(&self) -> usize {
        GLYPH_HEIGHT
    }

    pub fn rows(&self) -> &[u16; GLYPH_HEIGHT] {
        &self.rows
    }

    pub fn pixel(&self, x: usize, y: usize) -> bool {
        debug_assert!(x < self.width() && y < GLYPH_HEIGHT);
        (self.rows[y] >> (self.width() - 1 - x)) & 1 == 1
    }

    pub fn ink_count(&self) -> u32 {
        self.rows.iter().map(|r| r.count_ones()).sum()
    }

    pub fn is_blank(&self) -> bool {
        self.rows.iter().all(|&r| r == 0)
    }

    /// Hex payload in `.hex` file form (32 or 64 uppercase digits).
    pub fn to_hex(&self) -> String {
        let digits = self.width() / 4;
        let mut out = String::with_capacity(digits * GLYPH_HEIGHT);
        for row in &self.rows {
            write!(out, "{:0width$X}", row, width = digits).unwrap();
        }
        out
    }
}

/// Parse one `.hex` line into its codepoint and glyph.
pub fn parse_hex_line(line: &str) -> Result<(u32, GlyphBitmap), FontError> {
    let line = line.trim_end_matches(['\r', '\n']);
    let (prefix, payload) = line.split_once(':').ok_or(FontError::MissingSeparator)?;
    if !(4..=6).contains(&prefix.len()) || !prefix.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(FontError::MalformedCodepoint(prefix.to_string()));
    }
    let cp = u32::from_str_radix(prefix, 16)
        .map_err(|_| FontError::MalformedCodepoint(prefix.to_string()))?;
    if cp > 0x10FFFF {
        return Err(FontError::MalformedCodepoint(prefix.to_string()));
    }
    let width = match payload.len() {
        32 => 8,
        64 => 16,
        n => return Err(FontError::BadPayloadLength(n)),
    };
    if let Some(bad) = payload.chars().find(|c| !c.is_ascii_hexdigit()) {
        return Err(FontError::NonHexPayload(bad));
    }
    let digits = width / 4;
    let mut rows = [0u16; GLYPH_HEIGHT];
    for (y, row) in rows.iter_mut().enumerate() {
        let chunk = &payload[y * digits..(y + 1) * digits];
        *row = u16::from_str_radix(chunk, 16).expect("validated hex");
    }
    Ok((cp, GlyphBitmap::from_rows(width, rows)))
}

/// Counters reported by [`GlyphStore::load`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub lines: usize,
    pub glyphs: usize,
    pub skipped: usize,
    pub duplicates: usize,
}

/// Immutable codepoint → glyph table with a total lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphStore {
    glyphs: BTreeMap<u32, GlyphBitmap>,
    notdef: GlyphBitmap,
}

impl GlyphStore {
    /// Load every parseable line of a `.hex` stream.
    ///
    /// Blank lines and `#` comments are ignored; malformed lines are
    /// skipped and counted. A later line for the same codepoint replaces an
    /// earlier one.
    pub fn load<R: BufRead>(source: R) -> Result<(Self, LoadReport), FontError> {
        let mut glyphs = BTreeMap::new();
        let mut report = LoadReport::default();
        for line in source.lines() {
            let line = line?;
            report.lines += 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            match parse_hex_line(trimmed) {
                Ok((cp, glyph)) => {
                    if glyphs.insert(cp, glyph).is_some() {
                        report.duplicates += 1;
                    }
                }
                Err(err) => {
                    log::debug!("skipping line {}: {err}", report.lines);
                    report.skipped += 1;
                }
            }
        }
        if glyphs.is_empty() {
            return Err(FontError::NoGlyphs {
                lines: report.lines,
            });
        }
        if report.duplicates > 0 {
            log::warn!("{} duplicate codepoints (last wins)", report.duplicates);
        }
        report.glyphs = glyphs.len();
        Ok((
            Self {
                glyphs,
                notdef: GlyphBitmap::notdef(),
            },
            report,
        ))
    }

    pub fn from_hex_str(text: &str) -> Result<(Self, LoadReport), FontError> {
        Self::load(text.as_bytes())
    }

    /// The Unifont subset bundled with the crate.
    pub fn bundled() -> Self {
        Self::from_hex_str(crate::fixtures::UNIFONT_SUBSET)
            .expect("bundled font parses")
            .0
    }

    pub fn glyph(&self, ch: char) -> &GlyphBitmap {
        self.glyph_code(ch as u32)
    }

    /// Lookup by raw code value; also accepts surrogate code units, which
    /// have no glyphs in Unifont and fall back to notdef.
    pub fn glyph_code(&self, code: u32) -> &GlyphBitmap {
        self.glyphs.get(&code).unwrap_or(&self.notdef)
    }

    pub fn contains(&self, code: u32) -> bool {
        self.glyphs.contains_key(&code)
    }

    pub fn notdef(&self) -> &GlyphBitmap {
        &self.notdef
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &GlyphBitmap)> {
        self.glyphs.iter().map(|(&cp, g)| (cp, g))
    }

    /// Serialize back to `.hex` lines, ascending by codepoint.
    pub fn to_hex_string(&self) -> String {
        let mut out = String::new();
        for (cp, glyph) in self.iter() {
            writeln!(out, "{cp:04X}:{}", glyph.to_hex()).unwrap();
        }
        out
    }
}
