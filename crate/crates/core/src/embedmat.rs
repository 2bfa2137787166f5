//! Frozen embedding matrices: visual (glyph images), random-bitmap
//! ablation, and learned; plus the `BVVE` file format.
//!
//! Both frozen variants share one path: raw `H²` bit vectors → PCA fit over
//! the whole vocabulary → projection to `d_model` → L2 normalization. Tokens
//! whose raw vector is all zero (blank glyphs, unused id slots) get a zero
//! row.
//!
//! Random bitmaps come from ChaCha8 (`rand_chacha::ChaCha8Rng`), seeded with
//! `seed_from_u64(seed)` and switched to stream `token_id`. Pixel `p` of the
//! token is bit `p % 64` (LSB first) of the `p / 64`-th `next_u64()` draw.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binfmt::{ByteReader, ByteWriter, FormatError};
use crate::fontstore::GlyphStore;
use crate::glyphrender::{self, RenderError, DEFAULT_THRESHOLD};
use crate::pca::{PcaError, PcaModel};
use crate::univoc::{TokenKind, Vocab};

pub const MAGIC: [u8; 4] = *b"BVVE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4 + 1 + 1 + 32;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("d_model {d_model} exceeds raw image dimension {raw_dim} (H = {side})")]
    DimTooLarge {
        d_model: usize,
        side: usize,
        raw_dim: usize,
    },
    #[error("vocabulary is empty")]
    EmptyVocab,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Provenance {
    Visual = 0,
    RandomBitmap = 1,
    Learned = 2,
}

impl Provenance {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Provenance::Visual),
            1 => Some(Provenance::RandomBitmap),
            2 => Some(Provenance::Learned),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Provenance::Visual => "visual",
            Provenance::RandomBitmap => "random_bitmap",
            Provenance::Learned => "learned",
        }
    }
}

/// `V × d_model` single-precision embedding table with its build metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Side of the square source images; 0 for learned matrices.
    pub side: usize,
    pub provenance: Provenance,
    pub frozen: bool,
    pub vocab_hash: [u8; 32],
    /// PCA mean (`side²`) and components (`d_model × side²`), kept for audit.
    pub pca_mean: Vec<f64>,
    pub pca_components: Vec<f64>,
    pub rows: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Wrap trained embedding weights.
    pub fn learned(rows: Vec<f32>, vocab_size: usize, d_model: usize, vocab_hash: [u8; 32]) -> Self {
        assert_eq!(rows.len(), vocab_size * d_model, "row data shape");
        Self {
            vocab_size,
            d_model,
            side: 0,
            provenance: Provenance::Learned,
            frozen: false,
            vocab_hash,
            pca_mean: Vec::new(),
            pca_components: Vec::new(),
            rows,
        }
    }

    pub fn row(&self, id: usize) -> &[f32] {
        &self.rows[id * self.d_model..(id + 1) * self.d_model]
    }

    pub fn row_norm(&self, id: usize) -> f64 {
        self.row(id)
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm_stats(&self) -> NormStats {
        let mut stats = NormStats {
            zero_rows: 0,
            min: f64::INFINITY,
            max: 0.0,
        };
        for id in 0..self.vocab_size {
            let n = self.row_norm(id);
            if n == 0.0 {
                stats.zero_rows += 1;
            } else {
                stats.min = stats.min.min(n);
                stats.max = stats.max.max(n);
            }
        }
        stats
    }

    /// Fraction of rows that exactly duplicate an earlier row.
    pub fn duplicate_row_fraction(&self) -> f64 {
        let mut seen = std::collections::HashSet::new();
        let mut dups = 0usize;
        for id in 0..self.vocab_size {
            let key: Vec<u32> = self.row(id).iter().map(|x| x.to_bits()).collect();
            if !seen.insert(key) {
                dups += 1;
            }
        }
        dups as f64 / self.vocab_size.max(1) as f64
    }

    pub fn matches_vocab(&self, vocab: &Vocab) -> bool {
        self.vocab_hash == vocab_hash(vocab)
    }

    fn raw_dim(&self) -> usize {
        self.side * self.side
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 8 * self.raw_dim() * (1 + self.d_model) + 4 * self.vocab_size * self.d_model
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.header(MAGIC, VERSION);
        w.u64(self.vocab_size as u64);
        w.u32(self.d_model as u32);
        w.u32(self.side as u32);
        w.u8(self.provenance as u8);
        w.u8(self.frozen as u8);
        w.bytes(&self.vocab_hash);
        w.f64s(&self.pca_mean);
        w.f64s(&self.pca_components);
        w.f32s(&self.rows);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.header(MAGIC, VERSION)?;
        let vocab_size = usize::try_from(r.u64()?)
            .map_err(|_| FormatError::Corrupt("vocabulary size overflows".into()))?;
        let d_model = r.u32()? as usize;
        let side = r.u32()? as usize;
        let provenance = r.u8()?;
        let provenance = Provenance::from_byte(provenance)
            .ok_or_else(|| FormatError::Corrupt(format!("unknown provenance {provenance}")))?;
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(FormatError::Corrupt(format!("frozen flag {b}"))),
        };
        let vocab_hash = r.bytes32()?;
        let raw_dim = side
            .checked_mul(side)
            .ok_or_else(|| FormatError::Corrupt("image side overflows".into()))?;
        if provenance != Provenance::Learned && d_model > raw_dim {
            return Err(FormatError::Corrupt(format!(
                "d_model {d_model} exceeds raw dimension {raw_dim}"
            )));
        }
        let pca_mean = r.f64_vec(raw_dim)?;
        let pca_components = r.f64_vec(
            raw_dim
                .checked_mul(d_model)
                .ok_or_else(|| FormatError::Corrupt("component block overflows".into()))?,
        )?;
        let rows = r.f32_vec(
            vocab_size
                .checked_mul(d_model)
                .ok_or_else(|| FormatError::Corrupt("row block overflows".into()))?,
        )?;
        r.finish()?;
        Ok(Self {
            vocab_size,
            d_model,
            side,
            provenance,
            frozen,
            vocab_hash,
            pca_mean,
            pca_components,
            rows,
        })
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<(), FormatError> {
        out.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load<R: Read>(mut source: R) -> Result<Self, FormatError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn pca_model(&self) -> Option<PcaModel> {
        (self.side > 0).then(|| {
            PcaModel::from_parts(
                self.pca_mean.clone(),
                self.pca_components.clone(),
                self.d_model,
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub zero_rows: usize,
    pub min: f64,
    pub max: f64,
}

/// SHA-256 of the vocabulary's JSON Lines serialization.
pub fn vocab_hash(vocab: &Vocab) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(vocab.to_jsonl_string().as_bytes());
    hasher.finalize().into()
}

/// `n × dim` row-major 0/1 matrix, one byte per entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawVectors {
    pub n: usize,
    pub dim: usize,
    pub bits: Vec<u8>,
}

impl RawVectors {
    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.dim..(i + 1) * self.dim]
    }

    pub fn density(&self, i: usize) -> f64 {
        glyphrender::ink_density(self.row(i))
    }

    pub fn mean_density(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().map(|&b| b as u64).sum::<u64>() as f64 / self.bits.len() as f64
    }
}

/// Rendered, resized and binarized images of every token.
pub fn visual_raw_vectors(
    vocab: &Vocab,
    store: &GlyphStore,
    side: usize,
    threshold: f64,
) -> Result<RawVectors, RenderError> {
    let dim = side * side;
    let mut bits = Vec::with_capacity(vocab.len() * dim);
    let mut cache: HashMap<Vec<u32>, Vec<u8>> = HashMap::new();
    for id in 0..vocab.len() as u32 {
        let codes = vocab.visual_codes(id);
        // Single-glyph renders repeat heavily (notdef, escapes).
        if codes.len() == 1 {
            if let Some(v) = cache.get(&codes) {
                bits.extend_from_slice(v);
                continue;
            }
        }
        let image = glyphrender::token_image_codes(&codes, store, side, threshold)?;
        bits.extend_from_slice(&image.binary);
        if codes.len() == 1 {
            cache.insert(codes, image.binary);
        }
    }
    Ok(RawVectors {
        n: vocab.len(),
        dim,
        bits,
    })
}

/// Bernoulli(0.5) bitmaps keyed by `(seed, token id)`.
pub fn random_raw_vectors(n: usize, side: usize, seed: u64) -> RawVectors {
    let dim = side * side;
    let mut bits = Vec::with_capacity(n * dim);
    for id in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        let mut word = 0u64;
        for p in 0..dim {
            if p % 64 == 0 {
                word = rng.next_u64();
            }
            bits.push(((word >> (p % 64)) & 1) as u8);
        }
    }
    RawVectors { n, dim, bits }
}

/// Fit PCA over all raw vectors and produce unit-norm `d_model` rows.
pub fn project_and_normalize(
    raw: &RawVectors,
    d_model: usize,
) -> Result<(PcaModel, Vec<f32>), EmbedError> {
    let pca = PcaModel::fit_binary(&raw.bits, raw.n, raw.dim, d_model)?;
    let projector = pca.binary_projector();
    let mut rows = Vec::with_capacity(raw.n * d_model);
    let mut cache: HashMap<&[u8], Vec<f32>> = HashMap::new();
    for i in 0..raw.n {
        let bits = raw.row(i);
        if let Some(row) = cache.get(bits) {
            rows.extend_from_slice(row);
            continue;
        }
        let row = if bits.iter().all(|&b| b == 0) {
            vec![0.0f32; d_model]
        } else {
            let v = projector.transform(bits);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                vec![0.0f32; d_model]
            } else {
                v.iter().map(|x| (x / norm) as f32).collect()
            }
        };
        rows.extend_from_slice(&row);
        cache.insert(bits, row);
    }
    Ok((pca, rows))
}

/// A built frozen matrix together with its intermediate products.
#[derive(Debug, Clone)]
pub struct EmbeddingBuild {
    pub matrix: EmbeddingMatrix,
    pub pca: PcaModel,
    pub raw: RawVectors,
}

fn check_dims(vocab: &Vocab, side: usize, d_model: usize) -> Result<(), EmbedError> {
    if vocab.is_empty() {
        return Err(EmbedError::EmptyVocab);
    }
    if side == 0 {
        return Err(RenderError::ZeroSide.into());
    }
    if d_model > side * side {
        return Err(EmbedError::DimTooLarge {
            d_model,
            side,
            raw_dim: side * side,
        });
    }
    Ok(())
}

fn finish_build(
    vocab: &Vocab,
    raw: RawVectors,
    side: usize,
    d_model: usize,
    provenance: Provenance,
) -> Result<EmbeddingBuild, EmbedError> {
    let (pca, rows) = project_and_normalize(&raw, d_model)?;
    let matrix = EmbeddingMatrix {
        vocab_size: vocab.len(),
        d_model,
        side,
        provenance,
        frozen: true,
        vocab_hash: vocab_hash(vocab),
        pca_mean: pca.mean().to_vec(),
        pca_components: pca.components().to_vec(),
        rows,
    };
    Ok(EmbeddingBuild { matrix, pca, raw })
}

/// Glyph-image embeddings for every token of `vocab`.
pub fn build_visual_embeddings(
    vocab: &Vocab,
    store: &GlyphStore,
    side: usize,
    d_model: usize,
) -> Result<EmbeddingBuild, EmbedError> {
    check_dims(vocab, side, d_model)?;
    let raw = visual_raw_vectors(vocab, store, side, DEFAULT_THRESHOLD)?;
    finish_build(vocab, raw, side, d_model, Provenance::Visual)
}

/// Random-bitmap embeddings through the same PCA path.
pub fn build_random_embeddings(
    vocab: &Vocab,
    seed: u64,
    side: usize,
    d_model: usize,
) -> Result<EmbeddingBuild, EmbedError> {
    check_dims(vocab, side, d_model)?;
    let raw = random_raw_vectors(vocab.len(), side, seed);
    finish_build(vocab, raw, side, d_model, Provenance::RandomBitmap)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation between character length and raw ink density over
/// the multi-character tokens of `vocab`.
pub fn density_length_correlation(vocab: &Vocab, raw: &RawVectors) -> Option<f64> {
    let (lens, dens): (Vec<f64>, Vec<f64>) = vocab
        .entries()
        .iter()
        .filter(|e| e.kind == TokenKind::Ngram)
        .map(|e| (e.text.chars().count(), e.id as usize))
        .filter(|&(len, _)| len >= 2)
        .map(|(len, id)| (len as f64, raw.density(id)))
        .unzip();
    pearson(&lens, &dens)
}
