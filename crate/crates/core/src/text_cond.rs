//! Tokenization, rare-token identifiers and the condition encoder.
//!
//! The encoder is a learned embedding table with mean pooling. Ids are laid
//! out as `[caption words | reserved rare range | null]`; the corpus generator
//! only ever emits caption words, so rare ids are never seen in pretraining.

use rand::Rng;

use crate::error::{Error, Result};
use crate::util::rng_stream;

pub const MAX_TOKENS: usize = 16;
pub const COND_DIM: usize = 64;
pub const RARE_RANGE: usize = 64;
pub const RARE_TOKEN_COUNT: usize = 3;

/// Every word the caption grammar can produce.
pub const CAPTION_WORDS: &[&str] = &[
    "a",
    "and",
    "on",
    "background",
    "solid",
    "outlined",
    "circle",
    "square",
    "triangle",
    "black",
    "white",
    "red",
    "green",
    "blue",
    "yellow",
    "cyan",
    "magenta",
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.len() > MAX_TOKENS {
            return Err(Error::Length {
                len: ids.len(),
                max: MAX_TOKENS,
            });
        }
        Ok(TokenSeq { ids })
    }

    pub fn empty() -> Self {
        TokenSeq::default()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    rare_len: u32,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new(CAPTION_WORDS.iter().map(|w| w.to_string()).collect(), RARE_RANGE as u32)
    }
}

impl Vocabulary {
    pub fn new(words: Vec<String>, rare_len: u32) -> Self {
        Vocabulary { words, rare_len }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    /// `[R_lo, R_hi)`.
    pub fn rare_range(&self) -> std::ops::Range<u32> {
        let lo = self.words.len() as u32;
        lo..lo + self.rare_len
    }

    pub fn null_id(&self) -> u32 {
        self.rare_range().end
    }

    pub fn size(&self) -> usize {
        self.null_id() as usize + 1
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn is_caption_id(&self, id: u32) -> bool {
        (id as usize) < self.words.len()
    }

    /// One id per whitespace-separated word, truncated at [`MAX_TOKENS`].
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::new();
        let mut unknown = Vec::new();
        for word in text.split_whitespace() {
            match self.id(word) {
                Some(id) => ids.push(id),
                None => unknown.push(word.to_string()),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownToken(unknown));
        }
        ids.truncate(MAX_TOKENS);
        Ok(TokenSeq { ids })
    }

    /// Three distinct ids from the reserved rare range, chosen by `seed`.
    pub fn rare_tokens(&self, seed: u64) -> Result<TokenSeq> {
        let range = self.rare_range();
        let span = range.len();
        if span < RARE_TOKEN_COUNT {
            return Err(Error::Config(format!(
                "rare range holds {span} ids, need at least {RARE_TOKEN_COUNT}"
            )));
        }
        let mut rng = rng_stream(seed, 0x7a7e);
        let picks = rand::seq::index::sample(&mut rng, span, RARE_TOKEN_COUNT);
        let ids = picks.iter().map(|i| range.start + i as u32).collect();
        Ok(TokenSeq { ids })
    }
}

/// `c⁽ᵇ⁾` followed by `c`.
pub fn concat_condition(rare: &TokenSeq, prompt: &TokenSeq) -> Result<TokenSeq> {
    let mut ids = rare.ids.clone();
    ids.extend_from_slice(&prompt.ids);
    TokenSeq::new(ids)
}

/// Dense condition vector fed to the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct CondVector(pub Vec<f64>);

impl CondVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Row-major `vocab_size × dim` table. The last row is the null condition.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    /// Entries drawn uniformly from `[-√3, √3]` (unit variance).
    pub fn random(rows: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng_stream(seed, 0xe3b);
        let bound = 3f64.sqrt();
        let data = (0..rows * dim).map(|_| rng.random_range(-bound..bound)).collect();
        EmbeddingTable { rows, dim, data }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape(format!("{rows}x{dim}"), format!("{} values", data.len())));
        }
        Ok(EmbeddingTable { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, id: u32) -> Result<&[f64]> {
        let i = id as usize;
        if i >= self.rows {
            return Err(Error::Index { id, rows: self.rows });
        }
        Ok(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    fn null_id(&self) -> u32 {
        (self.rows - 1) as u32
    }

    pub fn null_condition(&self) -> CondVector {
        CondVector(self.data[(self.rows - 1) * self.dim..].to_vec())
    }

    /// Mean of the token rows; the empty sequence maps to the null row.
    pub fn encode(&self, seq: &TokenSeq) -> Result<CondVector> {
        if seq.is_empty() {
            return Ok(self.null_condition());
        }
        let mut acc = vec![0.0; self.dim];
        for &id in seq.ids() {
            for (a, v) in acc.iter_mut().zip(self.row(id)?) {
                *a += v;
            }
        }
        let n = seq.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(CondVector(acc))
    }

    /// Scatter a gradient w.r.t. the pooled vector back onto the rows that
    /// produced it (the empty sequence routes to the null row).
    pub fn accumulate_grad(&self, seq: &TokenSeq, grad_cond: &[f64], grad: &mut [f64]) {
        let null = [self.null_id()];
        let ids: &[u32] = if seq.is_empty() { &null } else { seq.ids() };
        let scale = 1.0 / ids.len() as f64;
        for &id in ids {
            let row = &mut grad[id as usize * self.dim..(id as usize + 1) * self.dim];
            for (g, d) in row.iter_mut().zip(grad_cond) {
                *g += scale * d;
            }
        }
    }
}
