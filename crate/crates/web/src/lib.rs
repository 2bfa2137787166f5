//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every exported method returns a JSON string; failures come back as
//! `{"error": "..."}`.

use bvv_core::embedmat::build_visual_embeddings;
use bvv_core::fixtures;
use bvv_core::fontstore::GlyphStore;
use bvv_core::glyphrender::{ink_density, token_image, DEFAULT_THRESHOLD};
use bvv_core::pca::PcaModel;
use bvv_core::univoc::{mine_ngrams, Profile, TokenKind, Vocab};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// N-grams mined from the toy corpus for the segmentation view.
pub const SEGMENTER_NGRAMS: usize = 4000;
pub const PROJECTION_SIDE: usize = 16;
pub const PROJECTION_DIM: usize = 64;
pub const MAX_SIDE: usize = 64;

#[derive(Debug, Serialize)]
pub struct RenderView {
    pub source_width: usize,
    pub source_height: usize,
    /// Concatenated glyph strip, row-major 0/1.
    pub source: Vec<u8>,
    pub side: usize,
    /// Resized intensities scaled to 0..=255.
    pub gray: Vec<u8>,
    pub binary: Vec<u8>,
    pub density: f64,
}

#[derive(Debug, Serialize)]
pub struct Segment {
    pub id: u32,
    pub text: String,
    pub kind: TokenKind,
}

#[derive(Debug, Serialize)]
pub struct Segmentation {
    pub segments: Vec<Segment>,
    pub chars: usize,
    pub chars_per_token: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Point {
    pub id: u32,
    pub text: String,
    pub len: usize,
    pub x: f64,
    pub y: f64,
}

pub fn render_view(store: &GlyphStore, text: &str, side: usize) -> Result<RenderView, String> {
    if side == 0 || side > MAX_SIDE {
        return Err(format!("side must be in 1..={MAX_SIDE}"));
    }
    let image = token_image(text, store, side, DEFAULT_THRESHOLD).map_err(|e| e.to_string())?;
    let source = image.source.ok_or("nothing to render")?;
    Ok(RenderView {
        source_width: source.width(),
        source_height: source.height(),
        source: source.bits().iter().map(|&b| b as u8).collect(),
        side,
        gray: image.gray.data.iter().map(|&g| (g * 255.0).round() as u8).collect(),
        density: ink_density(&image.binary),
        binary: image.binary,
    })
}

pub fn segment(vocab: &Vocab, text: &str) -> Result<Segmentation, String> {
    let pieces = vocab.encode_pieces(text).map_err(|e| e.to_string())?;
    let segments: Vec<Segment> = pieces
        .iter()
        .map(|p| {
            let entry = vocab.entry(p.id).expect("encoded ids are in range");
            Segment {
                id: p.id,
                text: text[p.start..p.end].to_string(),
                kind: entry.kind,
            }
        })
        .collect();
    let chars = text.chars().count();
    Ok(Segmentation {
        chars_per_token: if segments.is_empty() { 0.0 } else { chars as f64 / segments.len() as f64 },
        chars,
        segments,
    })
}

/// First two principal components of the visual embedding rows.
pub fn projection(vocab: &Vocab, store: &GlyphStore) -> Result<Vec<Point>, String> {
    let build = build_visual_embeddings(vocab, store, PROJECTION_SIDE, PROJECTION_DIM)
        .map_err(|e| e.to_string())?;
    let m = build.matrix;
    let data: Vec<f64> = m.rows.iter().map(|&x| x as f64).collect();
    let pca = PcaModel::fit(&data, m.vocab_size, m.d_model, 2).map_err(|e| e.to_string())?;
    vocab
        .entries()
        .iter()
        .zip(data.chunks_exact(m.d_model))
        .map(|(e, row)| {
            let p = pca.transform(row).map_err(|e| e.to_string())?;
            Ok(Point {
                id: e.id,
                text: e.text.clone(),
                len: e.text.chars().count(),
                x: p[0],
                y: p[1],
            })
        })
        .collect()
}

fn to_json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("serializable"),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

#[wasm_bindgen]
pub struct Demo {
    store: GlyphStore,
    segmenter: Vocab,
    compact: Vocab,
    points: Option<Vec<Point>>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    #[allow(clippy::new_without_default)]
    pub fn new() -> Demo {
        let ngrams = mine_ngrams(fixtures::TOY_CORPUS, SEGMENTER_NGRAMS);
        Demo {
            store: GlyphStore::bundled(),
            segmenter: Vocab::build(&ngrams, Profile::Bmp).expect("mined n-grams fit the BMP profile"),
            compact: fixtures::compact_vocab(),
            points: None,
        }
    }

    pub fn render(&self, text: &str, side: usize) -> String {
        to_json(render_view(&self.store, text, side))
    }

    pub fn segment(&self, text: &str) -> String {
        to_json(segment(&self.segmenter, text))
    }

    /// Computed on first call, then cached.
    pub fn projection(&mut self) -> String {
        if self.points.is_none() {
            match projection(&self.compact, &self.store) {
                Ok(p) => self.points = Some(p),
                Err(e) => return to_json::<()>(Err(e)),
            }
        }
        to_json(Ok(self.points.as_ref()))
    }

    pub fn projection_vocab_size(&self) -> usize {
        self.compact.len()
    }
}
