//! Byte-level tokenization, corpus splits and deterministic batching.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WmError};

pub type TokenId = u32;

/// Byte-level vocabulary: ids 0..=255 are raw bytes, then three specials.
pub struct Vocab;

impl Vocab {
    pub const BYTES: usize = 256;
    pub const BOS: TokenId = 256;
    pub const EOS: TokenId = 257;
    pub const PAD: TokenId = 258;
    pub const SIZE: usize = 259;

    pub fn encode(text: &[u8]) -> Vec<TokenId> {
        text.iter().map(|&b| b as TokenId).collect()
    }

    /// Inverse of [`Vocab::encode`]. Special ids decode to nothing; ids past
    /// the vocabulary are an error.
    pub fn decode(ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8),
                Self::BOS | Self::EOS | Self::PAD => {}
                _ => return Err(WmError::TokenOutOfRange { id, vocab: Self::SIZE }),
            }
        }
        Ok(out)
    }

    pub fn decode_lossy(ids: &[TokenId]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Heldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Heldout => "heldout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub heldout: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, val: 0.1, heldout: 0.1 }
    }
}

/// On-disk corpus manifest. File paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub files: Vec<PathBuf>,
    #[serde(default)]
    pub splits: SplitFractions,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub path: PathBuf,
    pub bytes: usize,
}

/// Immutable token stream with contiguous, disjoint train/val/heldout splits.
#[derive(Debug, Clone)]
pub struct Corpus {
    tokens: Vec<TokenId>,
    sources: Vec<SourceEntry>,
    train: Range<usize>,
    val: Range<usize>,
    heldout: Range<usize>,
    seed: u64,
}

impl Corpus {
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| WmError::io(path, e))?;
        let manifest: CorpusManifest = serde_json::from_slice(&raw)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut bytes = Vec::new();
        let mut sources = Vec::new();
        for f in &manifest.files {
            let p = if f.is_absolute() { f.clone() } else { base.join(f) };
            let content = std::fs::read(&p).map_err(|e| WmError::io(&p, e))?;
            sources.push(SourceEntry { path: f.clone(), bytes: content.len() });
            bytes.extend_from_slice(&content);
        }
        let mut c = Self::from_bytes(&bytes, manifest.splits, manifest.seed)?;
        c.sources = sources;
        Ok(c)
    }

    pub fn from_bytes(bytes: &[u8], fractions: SplitFractions, seed: u64) -> Result<Self> {
        let SplitFractions { train, val, heldout } = fractions;
        let total = train + val + heldout;
        if [train, val, heldout].iter().any(|f| !(0.0..=1.0).contains(f)) || (total - 1.0).abs() > 1e-9 {
            return Err(WmError::Config(format!("split fractions must be in [0,1] and sum to 1, got {fractions:?}")));
        }
        let tokens = Vocab::encode(bytes);
        let n = tokens.len();
        let a = ((n as f64) * train).round() as usize;
        let b = (((n as f64) * (train + val)).round() as usize).clamp(a, n);
        Ok(Corpus {
            tokens,
            sources: vec![SourceEntry { path: PathBuf::from("<memory>"), bytes: bytes.len() }],
            train: 0..a,
            val: a..b,
            heldout: b..n,
            seed,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn sources(&self) -> &[SourceEntry] {
        &self.sources
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Heldout => self.heldout.clone(),
        }
    }

    pub fn split(&self, split: Split) -> &[TokenId] {
        &self.tokens[self.range(split)]
    }

    /// Endless deterministic stream of `[batch × seq_len]` windows from one
    /// split. Each epoch draws a fresh offset and shuffles the
    /// non-overlapping windows it induces.
    pub fn batch_windows(&self, split: Split, seq_len: usize, batch: usize, seed: u64) -> Result<BatchIter<'_>> {
        let data = self.split(split);
        if seq_len == 0 || batch == 0 {
            return Err(WmError::InvalidArgument("seq_len and batch must be positive".into()));
        }
        if data.len() < batch * seq_len {
            return Err(WmError::InsufficientTokens {
                split: split.name().into(),
                need: batch * seq_len,
                have: data.len(),
            });
        }
        Ok(BatchIter {
            data,
            seq_len,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
            starts: Vec::new(),
            cursor: 0,
            epoch: 0,
        })
    }

    /// `count` prompts of `len` tokens drawn uniformly from a split.
    pub fn sample_prompts(&self, split: Split, count: usize, len: usize, seed: u64) -> Result<Vec<Vec<TokenId>>> {
        let data = self.split(split);
        if data.len() < len + 1 {
            return Err(WmError::InsufficientTokens { split: split.name().into(), need: len + 1, have: data.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..count)
            .map(|_| {
                let s = rng.random_range(0..=data.len() - len);
                data[s..s + len].to_vec()
            })
            .collect())
    }
}

/// One block of token windows, row-major `[batch × seq_len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<TokenId>,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<TokenId>]) -> Result<Self> {
        let seq_len = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || seq_len == 0 || rows.iter().any(|r| r.len() != seq_len) {
            return Err(WmError::shape("token_batch", "rows must be non-empty and equally long"));
        }
        Ok(TokenBatch { batch: rows.len(), seq_len, ids: rows.concat() })
    }

    pub fn row(&self, b: usize) -> &[TokenId] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[TokenId]> {
        self.ids.chunks(self.seq_len)
    }
}

pub struct BatchIter<'a> {
    data: &'a [TokenId],
    seq_len: usize,
    batch: usize,
    rng: ChaCha8Rng,
    starts: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl BatchIter<'_> {
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn refill(&mut self) {
        let max_offset = (self.data.len() - self.seq_len * self.batch).min(self.seq_len - 1);
        let offset = self.rng.random_range(0..=max_offset);
        self.starts = (offset..=self.data.len() - self.seq_len).step_by(self.seq_len).collect();
        self.starts.shuffle(&mut self.rng);
        self.cursor = 0;
        self.epoch += 1;
    }
}

impl Iterator for BatchIter<'_> {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        let mut ids = Vec::with_capacity(self.batch * self.seq_len);
        for _ in 0..self.batch {
            if self.cursor >= self.starts.len() {
                self.refill();
            }
            let s = self.starts[self.cursor];
            self.cursor += 1;
            ids.extend_from_slice(&self.data[s..s + self.seq_len]);
        }
        Some(TokenBatch { batch: self.batch, seq_len: self.seq_len, ids })
    }
}
