//! Unicode-centric tokenizer.
//!
//! The built-in profiles map token ids to BMP codepoints identity-wise,
//! with two reclaimed ranges:
//!
//! * `0xD800..=0xDFFF` are escape ids. A non-BMP character is written as its
//!   UTF-16 surrogate pair (high, low). A private-use character
//!   `U+E000..=U+F8FF`, whose own id slot holds an n-gram, is written as two
//!   *low* escapes: `0xDC00 + (off >> 10)`, `0xDC00 + (off & 0x3FF)` with
//!   `off = cp - 0xE000`. A valid stream never starts a pair with a low
//!   escape otherwise, so both forms decode unambiguously.
//! * `0xE000..=0xF8FF` hold the first 6400 n-grams; the 131072 profile
//!   continues n-gram slots at `0x10000..=0x1FFFF`.
//!
//! Text is segmented greedily: at each position the longest registered
//! n-gram wins, otherwise the character falls back to its direct id.
//!
//! External vocabularies (arbitrary id-ordered token strings) use the same
//! greedy rule over all of their tokens, with no fallback.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const MAX_NGRAM_CHARS: usize = 8;
pub const PAD_ID: TokenId = 0;

const HIGH_SURROGATES: std::ops::RangeInclusive<u32> = 0xD800..=0xDBFF;
const LOW_SURROGATES: std::ops::RangeInclusive<u32> = 0xDC00..=0xDFFF;
const PUA_START: u32 = 0xE000;
const PUA_END: u32 = 0xF8FF;
const PUA_SLOTS: usize = (PUA_END - PUA_START + 1) as usize;
const PLANE1_START: u32 = 0x10000;
const MAX_EXTERNAL_VOCAB: usize = 1 << 21;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("duplicate token text {0:?}")]
    DuplicateToken(String),
    #[error("n-gram capacity exceeded: {requested} requested, {capacity} slots")]
    CapacityExceeded { requested: usize, capacity: usize },
    #[error("illegal n-gram {text:?}: must be 2..=8 characters")]
    IllegalNgram { text: String },
    #[error("empty token text at id {0}")]
    EmptyToken(usize),
    #[error("external vocabulary too large: {0} tokens")]
    TooManyTokens(usize),
    #[error("unsupported vocabulary size {0} (built-in profiles are 65536 and 131072)")]
    UnsupportedProfile(usize),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: TokenId, vocab_size: usize },
    #[error("unpaired surrogate escape id {id:#06X} at position {pos}")]
    UnpairedSurrogate { id: TokenId, pos: usize },
    #[error("character {ch:?} at byte {offset} has no token in this vocabulary")]
    Unencodable { ch: char, offset: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocabulary file line {line}: {message}")]
    BadFile { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Codepoint,
    Ngram,
    SurrogateEscape,
    Special,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub id: TokenId,
    pub kind: TokenKind,
    pub text: String,
}

/// Built-in id-space profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// 65536 ids: BMP identity plus 6400 private-use n-gram slots.
    Bmp,
    /// 131072 ids: adds 65536 n-gram slots in `0x10000..=0x1FFFF`.
    Extended,
}

impl Profile {
    pub fn from_vocab_size(size: usize) -> Result<Self, VocabError> {
        match size {
            65536 => Ok(Profile::Bmp),
            131072 => Ok(Profile::Extended),
            other => Err(VocabError::UnsupportedProfile(other)),
        }
    }

    pub fn vocab_size(self) -> usize {
        match self {
            Profile::Bmp => 1 << 16,
            Profile::Extended => 1 << 17,
        }
    }

    pub fn ngram_capacity(self) -> usize {
        match self {
            Profile::Bmp => PUA_SLOTS,
            Profile::Extended => PUA_SLOTS + (1 << 16),
        }
    }

    /// Id of the `index`-th n-gram.
    pub fn ngram_slot(self, index: usize) -> TokenId {
        if index < PUA_SLOTS {
            PUA_START + index as u32
        } else {
            PLANE1_START + (index - PUA_SLOTS) as u32
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Unicode(Profile),
    External,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: Vec<(char, u32)>,
    token: Option<TokenId>,
}

/// Character trie used for longest-match lookup.
#[derive(Debug, Clone)]
struct Trie {
    nodes: Vec<TrieNode>,
}

impl Trie {
    fn new() -> Self {
        Self {
            nodes: vec![TrieNode::default()],
        }
    }

    fn insert(&mut self, text: &str, id: TokenId) {
        let mut node = 0usize;
        for ch in text.chars() {
            node = match self.nodes[node]
                .children
                .binary_search_by_key(&ch, |&(c, _)| c)
            {
                Ok(i) => self.nodes[node].children[i].1 as usize,
                Err(i) => {
                    let next = self.nodes.len();
                    self.nodes.push(TrieNode::default());
                    self.nodes[node].children.insert(i, (ch, next as u32));
                    next
                }
            };
        }
        self.nodes[node].token = Some(id);
    }

    /// Longest token that prefixes `text`: (id, byte length).
    fn longest_match(&self, text: &str) -> Option<(TokenId, usize)> {
        let mut node = 0usize;
        let mut best = None;
        for (offset, ch) in text.char_indices() {
            match self.nodes[node]
                .children
                .binary_search_by_key(&ch, |&(c, _)| c)
            {
                Ok(i) => node = self.nodes[node].children[i].1 as usize,
                Err(_) => break,
            }
            if let Some(id) = self.nodes[node].token {
                best = Some((id, offset + ch.len_utf8()));
            }
        }
        best
    }
}

/// One segment of encoded text: the token id and the byte range of source
/// text it covers. Escaped characters yield two pieces with equal ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Piece {
    pub id: TokenId,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    entries: Vec<TokenEntry>,
    trie: Trie,
    layout: Layout,
    ngram_count: usize,
}

fn validate_ngram(text: &str) -> Result<(), VocabError> {
    let n = text.chars().count();
    if !(2..=MAX_NGRAM_CHARS).contains(&n) {
        return Err(VocabError::IllegalNgram {
            text: text.to_string(),
        });
    }
    Ok(())
}

impl Vocab {
    /// Build a built-in profile vocabulary with n-grams assigned to slots in
    /// list order.
    pub fn build<S: AsRef<str>>(ngrams: &[S], profile: Profile) -> Result<Self, VocabError> {
        let capacity = profile.ngram_capacity();
        if ngrams.len() > capacity {
            return Err(VocabError::CapacityExceeded {
                requested: ngrams.len(),
                capacity,
            });
        }
        let mut seen = HashSet::with_capacity(ngrams.len());
        for ng in ngrams {
            let ng = ng.as_ref();
            validate_ngram(ng)?;
            if !seen.insert(ng) {
                return Err(VocabError::DuplicateToken(ng.to_string()));
            }
        }

        let size = profile.vocab_size();
        let mut entries: Vec<TokenEntry> = (0..size as u32)
            .map(|id| {
                let (kind, text) = if HIGH_SURROGATES.contains(&id) || LOW_SURROGATES.contains(&id)
                {
                    (TokenKind::SurrogateEscape, String::new())
                } else if (PUA_START..=PUA_END).contains(&id) || id >= PLANE1_START {
                    (TokenKind::Special, String::new())
                } else {
                    let ch = char::from_u32(id).expect("non-surrogate BMP value");
                    (TokenKind::Codepoint, ch.to_string())
                };
                TokenEntry { id, kind, text }
            })
            .collect();

        let mut trie = Trie::new();
        for (i, ng) in ngrams.iter().enumerate() {
            let id = profile.ngram_slot(i);
            let entry = &mut entries[id as usize];
            entry.kind = TokenKind::Ngram;
            entry.text = ng.as_ref().to_string();
            trie.insert(ng.as_ref(), id);
        }
        Ok(Self {
            entries,
            trie,
            layout: Layout::Unicode(profile),
            ngram_count: ngrams.len(),
        })
    }

    /// Wrap an external tokenizer's id-ordered token strings.
    pub fn import_external<S: AsRef<str>>(texts: &[S]) -> Result<Self, VocabError> {
        if texts.len() > MAX_EXTERNAL_VOCAB {
            return Err(VocabError::TooManyTokens(texts.len()));
        }
        let mut trie = Trie::new();
        let mut seen = HashSet::with_capacity(texts.len());
        let mut entries = Vec::with_capacity(texts.len());
        let mut ngram_count = 0;
        for (i, text) in texts.iter().enumerate() {
            let text = text.as_ref();
            if text.is_empty() {
                return Err(VocabError::EmptyToken(i));
            }
            if !seen.insert(text) {
                return Err(VocabError::DuplicateToken(text.to_string()));
            }
            let mut chars = text.chars();
            let single = match (chars.next(), chars.next()) {
                (Some(c), None) => Some(c),
                _ => None,
            };
            let kind = match single {
                Some(c) if c as usize == i => TokenKind::Codepoint,
                _ => {
                    ngram_count += 1;
                    TokenKind::Ngram
                }
            };
            trie.insert(text, i as TokenId);
            entries.push(TokenEntry {
                id: i as TokenId,
                kind,
                text: text.to_string(),
            });
        }
        Ok(Self {
            entries,
            trie,
            layout: Layout::External,
            ngram_count,
        })
    }

    /// A small external-style vocabulary for desk-scale training: PAD
    /// (`U+0000`) at id 0, then every distinct character of `corpus` in
    /// codepoint order, then the most frequent corpus n-grams until `size`
    /// tokens exist.
    pub fn compact_from_corpus(corpus: &str, size: usize) -> Result<Self, VocabError> {
        let mut chars: Vec<char> = corpus
            .chars()
            .filter(|&c| c != '\0')
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        chars.sort_unstable();
        let mut texts: Vec<String> = Vec::with_capacity(size);
        texts.push("\0".to_string());
        texts.extend(chars.iter().map(|c| c.to_string()));
        if texts.len() > size {
            return Err(VocabError::CapacityExceeded {
                requested: texts.len(),
                capacity: size,
            });
        }
        let room = size - texts.len();
        texts.extend(mine_ngrams(corpus, room));
        Self::import_external(&texts)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn ngram_count(&self) -> usize {
        self.ngram_count
    }

    pub fn entries(&self) -> &[TokenEntry] {
        &self.entries
    }

    pub fn entry(&self, id: TokenId) -> Option<&TokenEntry> {
        self.entries.get(id as usize)
    }

    /// Id of a codepoint or n-gram token with exactly this text.
    pub fn id_of(&self, text: &str) -> Option<TokenId> {
        match self.trie.longest_match(text) {
            Some((id, len)) if len == text.len() => Some(id),
            _ => {
                let mut chars = text.chars();
                match (self.layout, chars.next(), chars.next()) {
                    (Layout::Unicode(_), Some(c), None) => {
                        let cp = c as u32;
                        (cp < 0x10000 && !(PUA_START..=PUA_END).contains(&cp)).then_some(cp)
                    }
                    _ => None,
                }
            }
        }
    }

    /// Segment text into tokens with their source byte ranges.
    pub fn encode_pieces(&self, text: &str) -> Result<Vec<Piece>, VocabError> {
        let mut pieces = Vec::with_capacity(text.len());
        let mut pos = 0;
        while pos < text.len() {
            let rest = &text[pos..];
            if let Some((id, len)) = self.trie.longest_match(rest) {
                pieces.push(Piece {
                    id,
                    start: pos,
                    end: pos + len,
                });
                pos += len;
                continue;
            }
            let ch = rest.chars().next().expect("non-empty rest");
            let end = pos + ch.len_utf8();
            match self.layout {
                Layout::External => {
                    return Err(VocabError::Unencodable { ch, offset: pos });
                }
                Layout::Unicode(_) => {
                    for id in fallback_ids(ch) {
                        pieces.push(Piece { id, start: pos, end });
                    }
                }
            }
            pos = end;
        }
        Ok(pieces)
    }

    /// Encode text to token ids. Total for built-in profiles; external
    /// vocabularies fail on characters none of their tokens can cover.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        Ok(self.encode_pieces(text)?.into_iter().map(|p| p.id).collect())
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let mut out = String::with_capacity(ids.len());
        let mut i = 0;
        while i < ids.len() {
            let id = ids[i];
            let entry = self
                .entries
                .get(id as usize)
                .ok_or(VocabError::IdOutOfRange {
                    id,
                    vocab_size: self.entries.len(),
                })?;
            if entry.kind != TokenKind::SurrogateEscape {
                out.push_str(&entry.text);
                i += 1;
                continue;
            }
            let unpaired = VocabError::UnpairedSurrogate { id, pos: i };
            let Some(&next) = ids.get(i + 1) else {
                return Err(unpaired);
            };
            if !LOW_SURROGATES.contains(&next) {
                return Err(unpaired);
            }
            let cp = if HIGH_SURROGATES.contains(&id) {
                0x10000 + ((id - 0xD800) << 10) + (next - 0xDC00)
            } else {
                let cp = PUA_START + ((id - 0xDC00) << 10) + (next - 0xDC00);
                if cp > PUA_END {
                    return Err(unpaired);
                }
                cp
            };
            out.push(char::from_u32(cp).expect("valid scalar from escape pair"));
            i += 2;
        }
        Ok(out)
    }

    /// Scalar characters of `corpus` divided by its token count.
    pub fn avg_chars_per_token(&self, corpus: &str) -> Result<f64, VocabError> {
        if corpus.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let tokens = self.encode(corpus)?.len();
        Ok(corpus.chars().count() as f64 / tokens as f64)
    }

    /// The text used to render a token's glyph image, as raw code values.
    /// Escape ids render as their own code unit; unused slots render as
    /// nothing.
    pub fn visual_codes(&self, id: TokenId) -> Vec<u32> {
        match self.entries.get(id as usize) {
            Some(e) if e.kind == TokenKind::SurrogateEscape => vec![e.id],
            Some(e) => e.text.chars().map(|c| c as u32).collect(),
            None => Vec::new(),
        }
    }

    /// Write the vocabulary as JSON Lines, one token per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), VocabError> {
        for entry in &self.entries {
            serde_json::to_writer(&mut out, entry).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(source: R) -> Result<Self, VocabError> {
        let mut entries = Vec::new();
        for (n, line) in source.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TokenEntry =
                serde_json::from_str(&line).map_err(|e| VocabError::BadFile {
                    line: n + 1,
                    message: e.to_string(),
                })?;
            if entry.id as usize != entries.len() {
                return Err(VocabError::BadFile {
                    line: n + 1,
                    message: format!("expected id {}, found {}", entries.len(), entry.id),
                });
            }
            entries.push(entry);
        }
        Self::from_entries(entries)
    }

    fn from_entries(entries: Vec<TokenEntry>) -> Result<Self, VocabError> {
        let bad = |message: String| VocabError::BadFile { line: 0, message };
        if let Ok(profile) = Profile::from_vocab_size(entries.len()) {
            let looks_unicode = entries
                .get(0xD800)
                .is_some_and(|e| e.kind == TokenKind::SurrogateEscape);
            if looks_unicode {
                let ngrams: Vec<&str> = (0..profile.ngram_capacity())
                    .map(|i| &entries[profile.ngram_slot(i) as usize])
                    .take_while(|e| e.kind == TokenKind::Ngram)
                    .map(|e| e.text.as_str())
                    .collect();
                let vocab = Self::build(&ngrams, profile)?;
                if vocab.entries != entries {
                    return Err(bad("entries do not match the built-in id layout".into()));
                }
                return Ok(vocab);
            }
        }
        let texts: Vec<&str> = entries.iter().map(|e| e.text.as_str()).collect();
        let vocab = Self::import_external(&texts)?;
        if vocab.entries != entries {
            return Err(bad("token kinds inconsistent with an external vocabulary".into()));
        }
        Ok(vocab)
    }
}

/// Direct ids for a character that no n-gram covers.
fn fallback_ids(ch: char) -> impl Iterator<Item = TokenId> {
    let cp = ch as u32;
    let (first, second) = if cp >= 0x10000 {
        let mut units = [0u16; 2];
        ch.encode_utf16(&mut units);
        (units[0] as u32, Some(units[1] as u32))
    } else if (PUA_START..=PUA_END).contains(&cp) {
        let off = cp - PUA_START;
        (0xDC00 + (off >> 10), Some(0xDC00 + (off & 0x3FF)))
    } else {
        (cp, None)
    };
    std::iter::once(first).chain(second)
}

/// Most frequent substrings of 2..=8 characters, ties broken by text.
/// Substrings containing control characters are not counted.
pub fn mine_ngrams(corpus: &str, top_k: usize) -> Vec<String> {
    if top_k == 0 {
        return Vec::new();
    }
    let bounds: Vec<usize> = corpus
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(corpus.len()))
        .collect();
    let chars: Vec<char> = corpus.chars().collect();
    let mut counts: HashMap<&str, u32> = HashMap::new();
    for start in 0..chars.len() {
        if chars[start].is_control() {
            continue;
        }
        for len in 2..=MAX_NGRAM_CHARS {
            let end = start + len;
            if end > chars.len() || chars[end - 1].is_control() {
                break;
            }
            *counts.entry(&corpus[bounds[start]..bounds[end]]).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, u32)> = counts.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked
        .into_iter()
        .take(top_k)
        .map(|(s, _)| s.to_string())
        .collect()
}

/// Read an n-gram list: one n-gram per line, order is priority.
pub fn read_ngram_list(text: &str) -> Vec<String> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn write_ngram_list<S: AsRef<str>>(ngrams: &[S]) -> String {
    let mut out = String::new();
    for ng in ngrams {
        out.push_str(ng.as_ref());
        out.push('\n');
    }
    out
}
