//! Token text → standardized square bitmap → raw binary vector.

use std::io::Write;

use thiserror::Error;

use crate::fontstore::{GlyphStore, GLYPH_HEIGHT};

/// Longest token rendering, in glyphs. Longer texts use their first 8 chars.
pub const MAX_RENDER_GLYPHS: usize = 8;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("cannot render empty text")]
    EmptyText,
    #[error("target side must be at least 1 pixel")]
    ZeroSide,
    #[error("source image is empty")]
    EmptySource,
}

/// Variable-width monochrome strip of concatenated glyphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "image data length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Concatenate glyphs of raw code values left to right.
pub fn render_codes(codes: &[u32], store: &GlyphStore) -> Result<Bitmap, RenderError> {
    if codes.is_empty() {
        return Err(RenderError::EmptyText);
    }
    let glyphs: Vec<_> = codes
        .iter()
        .take(MAX_RENDER_GLYPHS)
        .map(|&c| store.glyph_code(c))
        .collect();
    let width: usize = glyphs.iter().map(|g| g.width()).sum();
    let mut bits = vec![false; width * GLYPH_HEIGHT];
    let mut x0 = 0;
    for g in glyphs {
        for y in 0..GLYPH_HEIGHT {
            for x in 0..g.width() {
                bits[y * width + x0 + x] = g.pixel(x, y);
            }
        }
        x0 += g.width();
    }
    Ok(Bitmap {
        width,
        height: GLYPH_HEIGHT,
        bits,
    })
}

/// Render a token's text as one horizontal strip of glyphs.
pub fn render_token(text: &str, store: &GlyphStore) -> Result<Bitmap, RenderError> {
    let codes: Vec<u32> = text.chars().map(|c| c as u32).collect();
    render_codes(&codes, store)
}

/// Bilinear resize to `side × side` with half-pixel centers and edge
/// clamping: output (row i, col j) samples the source at
/// `((i + 0.5)·h/side − 0.5, (j + 0.5)·w/side − 0.5)`.
pub fn resize_bilinear(src: &GrayImage, side: usize) -> Result<GrayImage, RenderError> {
    if side == 0 {
        return Err(RenderError::ZeroSide);
    }
    if src.width == 0 || src.height == 0 {
        return Err(RenderError::EmptySource);
    }
    let xs = sample_axis(src.width, side);
    let ys = sample_axis(src.height, side);
    let mut data = Vec::with_capacity(side * side);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src.get(x0, y0) * (1.0 - fx) + src.get(x1, y0) * fx;
            let bottom = src.get(x0, y1) * (1.0 - fx) + src.get(x1, y1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(GrayImage::new(side, side, data))
}

/// Source neighbors and blend weight for each output coordinate.
fn sample_axis(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    let last = (src_len - 1) as f64;
    (0..dst_len)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = pos.floor();
            let i0 = lo as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, pos - lo)
        })
        .collect()
}

/// `1` where `gray >= threshold`.
pub fn binarize(gray: &GrayImage, threshold: f64) -> Vec<u8> {
    gray.data.iter().map(|&v| u8::from(v >= threshold)).collect()
}

pub fn ink_density(raw: &[u8]) -> f64 {
    if raw.is_empty() {
        return 0.0;
    }
    raw.iter().map(|&b| b as usize).sum::<usize>() as f64 / raw.len() as f64
}

/// Standardized image of one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenImage {
    pub source: Option<Bitmap>,
    pub gray: GrayImage,
    pub binary: Vec<u8>,
}

impl TokenImage {
    pub fn side(&self) -> usize {
        self.gray.width
    }
}

/// Render, resize and binarize a token given its raw code values. Empty
/// input yields an all-zero image.
pub fn token_image_codes(
    codes: &[u32],
    store: &GlyphStore,
    side: usize,
    threshold: f64,
) -> Result<TokenImage, RenderError> {
    if side == 0 {
        return Err(RenderError::ZeroSide);
    }
    if codes.is_empty() {
        return Ok(TokenImage {
            source: None,
            gray: GrayImage::constant(side, side, 0.0),
            binary: vec![0; side * side],
        });
    }
    let source = render_codes(codes, store)?;
    let gray = resize_bilinear(&source.to_gray(), side)?;
    let binary = binarize(&gray, threshold);
    Ok(TokenImage {
        source: Some(source),
        gray,
        binary,
    })
}

pub fn token_image(
    text: &str,
    store: &GlyphStore,
    side: usize,
    threshold: f64,
) -> Result<TokenImage, RenderError> {
    let codes: Vec<u32> = text.chars().map(|c| c as u32).collect();
    token_image_codes(&codes, store, side, threshold)
}

/// Row-major `side²` binary vector for a token's text.
pub fn token_raw_vector(
    text: &str,
    store: &GlyphStore,
    side: usize,
    threshold: f64,
) -> Result<Vec<u8>, RenderError> {
    Ok(token_image(text, store, side, threshold)?.binary)
}

/// Binary PGM (P5) of a grayscale image.
pub fn write_pgm<W: Write>(image: &GrayImage, mut out: W) -> std::io::Result<()> {
    write!(out, "P5\n{} {}\n255\n", image.width, image.height)?;
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|&v| 255 - (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store() -> GlyphStore {
        GlyphStore::bundled()
    }

    #[test]
    fn single_char_renders_its_glyph() {
        let s = store();
        let bmp = render_token("A", &s).unwrap();
        let g = s.glyph('A');
        assert_eq!((bmp.width(), bmp.height()), (8, 16));
        for y in 0..16 {
            for x in 0..8 {
                assert_eq!(bmp.get(x, y), g.pixel(x, y));
            }
        }
    }

    #[test]
    fn widths_add_up() {
        let s = store();
        assert_eq!(render_token("abc", &s).unwrap().width(), 24);
        // CJK glyphs are 16 wide
        assert_eq!(render_token("a的", &s).unwrap().width(), 24);
        assert_eq!(render_token("abcdefghij", &s).unwrap().width(), 64);
        assert_eq!(render_token("", &s), Err(RenderError::EmptyText));
    }

    #[test]
    fn unmapped_char_renders_notdef_box() {
        let s = store();
        let bmp = render_token("a\u{1F600}", &s).unwrap();
        assert_eq!(bmp.width(), 16);
        for y in 0..16 {
            for x in 0..8 {
                let border = y == 0 || y == 15 || x == 0 || x == 7;
                assert_eq!(bmp.get(8 + x, y), border);
            }
        }
    }

    #[test]
    fn checkerboard_2x2_to_1x1_is_half() {
        let src = GrayImage::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        // sample point (0.5, 0.5): equal blend of all four neighbors
        let out = resize_bilinear(&src, 1).unwrap();
        assert_eq!(out.data, vec![0.5]);
    }

    #[test]
    fn upsizing_1x1_is_constant() {
        let out = resize_bilinear(&GrayImage::constant(1, 1, 0.3), 5).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn zero_side_is_rejected() {
        let src = GrayImage::constant(2, 2, 1.0);
        assert_eq!(resize_bilinear(&src, 0), Err(RenderError::ZeroSide));
    }

    #[test]
    fn blank_tokens_give_zero_vectors() {
        let s = store();
        let v = token_raw_vector("  ", &s, 16, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(v.len(), 256);
        assert!(v.iter().all(|&b| b == 0));
        let v = token_image_codes(&[], &s, 16, DEFAULT_THRESHOLD).unwrap();
        assert!(v.binary.iter().all(|&b| b == 0));
    }

    #[test]
    fn pgm_header() {
        let mut buf = Vec::new();
        write_pgm(&GrayImage::constant(3, 2, 1.0), &mut buf).unwrap();
        assert_eq!(&buf[..11], b"P5\n3 2\n255\n");
        assert_eq!(&buf[11..], &[0u8; 6]);
    }

    fn image_strategy() -> impl Strategy<Value = GrayImage> {
        (1usize..20, 1usize..20).prop_flat_map(|(w, h)| {
            proptest::collection::vec(0.0f64..=1.0, w * h)
                .prop_map(move |data| GrayImage::new(w, h, data))
        })
    }

    proptest! {
        #[test]
        fn constant_images_stay_constant(w in 1usize..40, h in 1usize..40, side in 1usize..40, v in 0.0f64..=1.0) {
            let out = resize_bilinear(&GrayImage::constant(w, h, v), side).unwrap();
            for &x in &out.data {
                prop_assert!((x - v).abs() <= 1e-15);
            }
        }

        #[test]
        fn resize_is_linear_in_scale(img in image_strategy(), a in 0.0f64..=1.0, side in 1usize..24) {
            let scaled = GrayImage::new(img.width, img.height, img.data.iter().map(|v| a * v).collect());
            let lhs = resize_bilinear(&scaled, side).unwrap();
            let rhs = resize_bilinear(&img, side).unwrap();
            for (l, r) in lhs.data.iter().zip(&rhs.data) {
                prop_assert!((l - a * r).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(l));
            }
        }

        #[test]
        fn resize_to_native_size_is_identity(side in 1usize..24, seed in any::<u64>()) {
            let data: Vec<f64> = (0..side * side)
                .map(|i| ((seed.wrapping_mul(i as u64 + 1) >> 11) % 1000) as f64 / 999.0)
                .collect();
            let img = GrayImage::new(side, side, data);
            prop_assert_eq!(resize_bilinear(&img, side).unwrap(), img);
        }

        #[test]
        fn raising_threshold_never_sets_bits(img in image_strategy(), t1 in 0.0f64..=1.0, dt in 0.0f64..=1.0) {
            let lo = binarize(&img, t1);
            let hi = binarize(&img, t1 + dt);
            for (a, b) in lo.iter().zip(&hi) {
                prop_assert!(b <= a);
            }
        }
    }
}
