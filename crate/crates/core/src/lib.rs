//! Frozen visual token embeddings built from Unicode glyph bitmaps, a
//! Unicode-centric tokenizer, and a small decoder-only transformer that
//! can train with frozen, random-frozen, or trainable input embeddings.
//!
//! Pipeline: [`fontstore`] parses Unifont `.hex` glyphs, [`glyphrender`]
//! turns token text into a fixed-size binary image, [`pca`] projects those
//! images to the model width and [`embedmat`] normalizes and persists the
//! result. [`univoc`] provides the token id space and [`nanoformer`] the
//! model used for the frozen / trainable / random comparison.

pub mod binfmt;
pub mod embedmat;
pub mod fontstore;
pub mod glyphrender;
pub mod nanoformer;
pub mod pca;
pub mod univoc;

/// Data bundled with the crate so the whole pipeline runs offline.
pub mod fixtures {
    /// GNU Unifont 15.1.05 subset: ASCII, Latin-1, Cyrillic, General
    /// Punctuation and the 100 CJK ideographs used by [`TOY_CORPUS`].
    pub const UNIFONT_SUBSET: &str = include_str!("../fixtures/unifont-subset.hex");
    /// Mixed English / Russian / Chinese training text.
    pub const TOY_CORPUS: &str = include_str!("../fixtures/toy_corpus.txt");
    /// Vocabulary size of the desk-scale fixture vocabulary.
    pub const COMPACT_VOCAB_SIZE: usize = 1024;

    /// The desk-scale vocabulary: corpus characters plus mined n-grams.
    pub fn compact_vocab() -> crate::univoc::Vocab {
        crate::univoc::Vocab::compact_from_corpus(TOY_CORPUS, COMPACT_VOCAB_SIZE)
            .expect("fixture corpus fits the compact vocabulary")
    }
}
