//! Subword vocabulary trained by frequency-greedy pair merging.
//!
//! Text is split into chunks before every space, so a piece may start with a
//! space but never contain one elsewhere; words after the first carry their
//! boundary as a leading space (`" cat"`). Encoding is greedy longest match,
//! and decoding is plain concatenation, which makes the round trip exact for
//! any text whose characters the vocabulary covers.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOT: u32 = 2;
pub const EOS: u32 = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[BOS]", "[EOT]", "[EOS]"];

/// Desk-scale default vocabulary size.
pub const DEFAULT_VOCAB_SIZE: usize = 256;
/// Size used for full-scale runs.
pub const FULL_SCALE_VOCAB_SIZE: usize = 1024;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary size {size} cannot hold the {alphabet}-symbol alphabet plus 4 specials")]
    SizeTooSmall { size: usize, alphabet: usize },
    #[error("character {0:?} is not covered by the vocabulary")]
    UnknownChar(char),
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
    corpus_hash: String,
}

fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c == ' ' && i > start {
            out.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

pub fn corpus_hash<S: AsRef<str>>(corpus: &[S]) -> String {
    let mut h = Sha256::new();
    for line in corpus {
        h.update(line.as_ref().as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Vocabulary {
    /// Trains a vocabulary of at most `size` entries (specials included).
    /// Merging stops early once no adjacent pair is left. Frequency ties go
    /// to the lexicographically smallest `(left, right)` pair.
    pub fn build<S: AsRef<str>>(corpus: &[S], size: usize) -> Result<Self, TokenizerError> {
        if corpus.iter().all(|s| s.as_ref().is_empty()) {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut chunk_counts: BTreeMap<&str, u64> = BTreeMap::new();
        for line in corpus {
            for c in chunks(line.as_ref()) {
                *chunk_counts.entry(c).or_insert(0) += 1;
            }
        }
        let mut alphabet: Vec<String> = chunk_counts
            .keys()
            .flat_map(|c| c.chars())
            .collect::<std::collections::BTreeSet<char>>()
            .into_iter()
            .map(String::from)
            .collect();
        alphabet.sort();
        if size < alphabet.len() + SPECIALS.len() {
            return Err(TokenizerError::SizeTooSmall { size, alphabet: alphabet.len() });
        }

        let mut words: Vec<(Vec<String>, u64)> =
            chunk_counts.iter().map(|(c, &n)| (c.chars().map(String::from).collect(), n)).collect();
        let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        pieces.extend(alphabet);

        while pieces.len() < size {
            let mut pairs: BTreeMap<(&str, &str), u64> = BTreeMap::new();
            for (syms, n) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((&w[0], &w[1])).or_insert(0) += n;
                }
            }
            // BTreeMap iteration is lexicographic, so the first maximum wins ties.
            let mut best: Option<((&str, &str), u64)> = None;
            for (&pair, &n) in &pairs {
                if best.is_none_or(|(_, b)| n > b) {
                    best = Some((pair, n));
                }
            }
            let Some(((l, r), _)) = best else { break };
            let (l, r) = (l.to_owned(), r.to_owned());
            let merged = format!("{l}{r}");
            for (syms, _) in &mut words {
                let mut i = 0;
                let mut out = Vec::with_capacity(syms.len());
                while i < syms.len() {
                    if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(std::mem::take(&mut syms[i]));
                        i += 1;
                    }
                }
                *syms = out;
            }
            if !pieces.contains(&merged) {
                pieces.push(merged);
            }
        }
        Self::from_pieces(pieces, corpus_hash(corpus))
    }

    fn from_pieces(pieces: Vec<String>, corpus_hash: String) -> Result<Self, TokenizerError> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(*s) {
                return Err(TokenizerError::Format(format!("special {s} must have id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() || index.insert(p.clone(), i as u32).is_some() {
                return Err(TokenizerError::Format(format!("empty or duplicate piece {p:?}")));
            }
        }
        let max_piece_chars = pieces[SPECIALS.len()..].iter().map(|p| p.chars().count()).max().unwrap_or(1);
        Ok(Self { pieces, index, max_piece_chars, corpus_hash })
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied().filter(|&i| i as usize >= SPECIALS.len())
    }

    /// Greedy longest-match segmentation. Never emits special ids.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut ids = Vec::with_capacity(chars.len() / 2 + 1);
        let mut i = 0;
        while i < chars.len() {
            let mut found = None;
            let longest = self.max_piece_chars.min(chars.len() - i);
            for len in (1..=longest).rev() {
                let start = chars[i].0;
                let end = chars.get(i + len).map_or(text.len(), |c| c.0);
                if let Some(id) = self.id_of(&text[start..end]) {
                    found = Some((id, len));
                    break;
                }
            }
            let Some((id, len)) = found else { return Err(TokenizerError::UnknownChar(chars[i].1)) };
            ids.push(id);
            i += len;
        }
        Ok(ids)
    }

    /// Concatenates pieces, dropping special tokens.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            let piece = self.piece(id).ok_or(TokenizerError::IdOutOfRange { id, size: self.size() })?;
            if (id as usize) >= SPECIALS.len() {
                out.push_str(piece);
            }
        }
        Ok(out)
    }

    /// Header line, then one JSON-quoted piece per line, specials first.
    pub fn write(&self, mut w: impl Write) -> Result<(), TokenizerError> {
        writeln!(w, "#vocab size={} corpus_sha256={}", self.size(), self.corpus_hash)?;
        for p in &self.pieces {
            writeln!(w, "{}", serde_json::to_string(p).expect("string serialises"))?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self, TokenizerError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| TokenizerError::Format("missing header".into()))??;
        let mut size = None;
        let mut hash = None;
        for field in header.strip_prefix("#vocab ").ok_or_else(|| TokenizerError::Format("bad header".into()))?.split(' ')
        {
            match field.split_once('=') {
                Some(("size", v)) => size = v.parse::<usize>().ok(),
                Some(("corpus_sha256", v)) => hash = Some(v.to_owned()),
                _ => return Err(TokenizerError::Format(format!("unknown header field {field:?}"))),
            }
        }
        let size = size.ok_or_else(|| TokenizerError::Format("header lacks size".into()))?;
        let mut pieces = Vec::with_capacity(size);
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            pieces.push(serde_json::from_str::<String>(&line).map_err(|e| TokenizerError::Format(e.to_string()))?);
        }
        if pieces.len() != size {
            return Err(TokenizerError::Format(format!("header says {size} pieces, found {}", pieces.len())));
        }
        Self::from_pieces(pieces, hash.unwrap_or_default())
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
