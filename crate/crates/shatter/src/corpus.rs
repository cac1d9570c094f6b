//! Desk-scale corpus ingestion: whitespace tokenizer with a frequency-capped
//! vocabulary, greedy packing into fixed-length sequences, and a versioned
//! binary token cache.

use crate::attention::PadMask;
use crate::encoder::{CLS_ID, PAD_ID, SEP_ID, SPECIAL_TOKENS};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

pub const SPECIAL_NAMES: [&str; SPECIAL_TOKENS] = ["[CLS]", "[SEP]", "[PAD]", "[MASK]"];

/// Tokenized documents plus the id table. Ids are dense in [0, vocab) with
/// the four special ids reserved up front.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Vec<u32>>,
    pub vocab: Vec<String>,
    /// Tokens outside the capped vocabulary are dropped; this counts them.
    pub dropped_tokens: u64,
}

/// A fixed-length input: tokens padded with [PAD] and the matching validity
/// mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub tokens: Vec<usize>,
    pub pad: PadMask,
}

impl Corpus {
    /// Lowercase, split on whitespace, rank tokens by frequency (ties by
    /// first appearance) and keep the `vocab_size - 4` most frequent.
    pub fn from_lines<'a>(lines: impl Iterator<Item = &'a str>, vocab_size: usize) -> Result<Self> {
        if vocab_size <= SPECIAL_TOKENS {
            return Err(Error::Config(format!(
                "vocab size {vocab_size} leaves no room for content tokens"
            )));
        }
        let mut counts: HashMap<String, (u64, usize)> = HashMap::new();
        let mut order = 0usize;
        let mut docs_text: Vec<Vec<String>> = Vec::new();
        for line in lines {
            let toks: Vec<String> = line.split_whitespace().map(|t| t.to_lowercase()).collect();
            if toks.is_empty() {
                continue;
            }
            for t in &toks {
                let e = counts.entry(t.clone()).or_insert((0, order));
                e.0 += 1;
                if e.0 == 1 {
                    order += 1;
                }
            }
            docs_text.push(toks);
        }
        if docs_text.is_empty() {
            return Err(Error::Data("corpus has no nonempty documents".into()));
        }
        let mut ranked: Vec<(&String, &(u64, usize))> = counts.iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        let keep = vocab_size - SPECIAL_TOKENS;
        let mut vocab: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        vocab.extend(ranked.iter().take(keep).map(|(t, _)| (*t).clone()));
        let lookup: HashMap<&str, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        let mut dropped = 0u64;
        let documents: Vec<Vec<u32>> = docs_text
            .iter()
            .map(|doc| {
                doc.iter()
                    .filter_map(|t| {
                        let id = lookup.get(t.as_str()).copied();
                        if id.is_none() {
                            dropped += 1;
                        }
                        id
                    })
                    .collect()
            })
            .collect();
        Ok(Corpus {
            documents,
            vocab,
            dropped_tokens: dropped,
        })
    }

    /// Tokenize other text under this corpus's vocabulary (validation sets
    /// must share the training id table).
    pub fn tokenize_with<'a>(&self, lines: impl Iterator<Item = &'a str>) -> Result<Corpus> {
        let lookup: HashMap<&str, u32> = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        let mut dropped = 0u64;
        let mut documents = Vec::new();
        for line in lines {
            let doc: Vec<u32> = line
                .split_whitespace()
                .filter_map(|t| {
                    let id = lookup.get(t.to_lowercase().as_str()).copied();
                    if id.is_none() {
                        dropped += 1;
                    }
                    id
                })
                .collect();
            if !doc.is_empty() {
                documents.push(doc);
            }
        }
        if documents.is_empty() {
            return Err(Error::Data("validation text shares no vocabulary".into()));
        }
        Ok(Corpus {
            documents,
            vocab: self.vocab.clone(),
            dropped_tokens: dropped,
        })
    }

    /// UTF-8 plain text, one document per line.
    pub fn from_text_file(path: &Path, vocab_size: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
        Self::from_lines(text.lines(), vocab_size)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(|d| d.len()).sum()
    }

    /// Greedy packing: the token stream is cut into [CLS] + (l-2) content +
    /// [SEP] chunks; the trailing partial chunk is padded. Chunks with fewer
    /// than 2 content tokens are skipped.
    pub fn pack(&self, l: usize) -> Result<Vec<PackedSequence>> {
        if l < 4 {
            return Err(Error::Config(format!("packing needs l >= 4, got {l}")));
        }
        let content_len = l - 2;
        let stream: Vec<u32> = self.documents.iter().flatten().copied().collect();
        let mut out = Vec::new();
        for chunk in stream.chunks(content_len) {
            if chunk.len() < 2 {
                continue;
            }
            let mut tokens = Vec::with_capacity(l);
            tokens.push(CLS_ID);
            tokens.extend(chunk.iter().map(|&t| t as usize));
            tokens.push(SEP_ID);
            let valid = tokens.len();
            tokens.resize(l, PAD_ID);
            out.push(PackedSequence {
                tokens,
                pad: PadMask::prefix(l, valid),
            });
        }
        if out.is_empty() {
            return Err(Error::Data("corpus too small to pack one sequence".into()));
        }
        Ok(out)
    }

    /// Versioned binary cache: magic, source hash, vocab strings, id
    /// arrays (LE). `source_hash` identifies the text (and cap) this cache
    /// was built from, so stale caches are detected on load.
    pub fn write_cache(&self, path: &Path, source_hash: u64) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        push_u32(&mut buf, CACHE_VERSION);
        push_u64(&mut buf, source_hash);
        push_u64(&mut buf, self.dropped_tokens);
        push_u32(&mut buf, self.vocab.len() as u32);
        for t in &self.vocab {
            push_u32(&mut buf, t.len() as u32);
            buf.extend_from_slice(t.as_bytes());
        }
        push_u32(&mut buf, self.documents.len() as u32);
        for doc in &self.documents {
            push_u32(&mut buf, doc.len() as u32);
            for &id in doc {
                push_u32(&mut buf, id);
            }
        }
        crate::manifest::write_atomic(path, &buf)
    }

    pub fn read_cache(path: &Path) -> Result<(Self, u64)> {
        let mut raw = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(|e| Error::Data(format!("cannot read cache {}: {e}", path.display())))?;
        let mut r = Reader { raw: &raw, pos: 0 };
        if r.bytes(CACHE_MAGIC.len())? != CACHE_MAGIC {
            return Err(Error::Data("not a token cache (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::Data(format!("unsupported cache version {version}")));
        }
        let source_hash = r.u64()?;
        let dropped = r.u64()?;
        let vocab_len = r.u32()? as usize;
        let mut vocab = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            let n = r.u32()? as usize;
            let s = String::from_utf8(r.bytes(n)?.to_vec())
                .map_err(|_| Error::Data("cache vocab is not UTF-8".into()))?;
            vocab.push(s);
        }
        let doc_count = r.u32()? as usize;
        let mut documents = Vec::with_capacity(doc_count);
        for _ in 0..doc_count {
            let n = r.u32()? as usize;
            let mut doc = Vec::with_capacity(n);
            for _ in 0..n {
                doc.push(r.u32()?);
            }
            documents.push(doc);
        }
        Ok((
            Corpus {
                documents,
                vocab,
                dropped_tokens: dropped,
            },
            source_hash,
        ))
    }
}

const CACHE_MAGIC: &[u8] = b"SHTC";
const CACHE_VERSION: u32 = 1;

pub fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub struct Reader<'a> {
    pub raw: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(raw: &'a [u8]) -> Self {
        Reader { raw, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.raw.len() {
            return Err(Error::Data("truncated binary file".into()));
        }
        let s = &self.raw[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
}

/// Deterministic toy text with strong local order structure: each word is
/// followed by its chain successor most of the time, so predicting a masked
/// word requires knowing which neighbor is on which side. Selected with the
/// corpus source `builtin:toy`.
pub fn generate_toy_text(lines: usize, words: usize, seed: u64) -> String {
    let mut rng = crate::rng::Rng::with_stream(seed, 0x7e47);
    let successor = |w: usize| (w * 7 + 3) % words;
    let mut out = String::new();
    for _ in 0..lines {
        let len = 8 + rng.below(9);
        let mut w = rng.below(words);
        for i in 0..len {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&format!("w{w:03}"));
            w = if rng.uniform() < 0.85 {
                successor(w)
            } else {
                rng.below(words)
            };
        }
        out.push('\n');
    }
    out
}

/// FNV-1a over file bytes, for recording data hashes in run manifests.
pub fn fnv1a_file(path: &Path) -> Result<u64> {
    let raw = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot hash {}: {e}", path.display())))?;
    Ok(fnv1a(&raw))
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl PackedSequence {
    pub fn all_valid(tokens: Vec<usize>) -> Self {
        let l = tokens.len();
        PackedSequence {
            tokens,
            pad: PadMask::all_valid(l),
        }
    }
}
