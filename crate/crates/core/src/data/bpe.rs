//! Byte-level byte-pair encoding.
//!
//! Ids `0..256` are raw bytes, followed by the special tokens
//! (end-of-document, padding, separator, then `n_virtual` soft-prompt
//! slots), followed by learned merges in the order they were learned.
//! Text is first split into chunks (an optional leading space plus a run of
//! word characters, an optional leading space plus a run of punctuation, or
//! a run of whitespace); merges never cross chunk boundaries.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;

use crate::error::{ensure, Error, Result};

pub const BYTE_TOKENS: u32 = 256;
pub const EOD: u32 = 256;
pub const PAD: u32 = 257;
pub const SEP: u32 = 258;
pub const VIRTUAL_BASE: u32 = 259;

/// Soft-prompt slots reserved by default.
pub const DEFAULT_VIRTUAL: u32 = 16;

/// Desk-scale vocabulary size.
pub const DEFAULT_VOCAB_SIZE: usize = 512;
/// Vocabulary size of the full-scale presets.
pub const FULL_SCALE_VOCAB_SIZE: usize = 42_384;

const FILE_HEADER: &str = "sparsedense-vocab 1";

fn pretokenizer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r" ?\w+| ?[^\s\w]+|\s+").expect("valid pattern"))
}

/// Splits text into merge-isolated chunks; concatenating them gives the input back.
pub fn pretokenize(text: &str) -> impl Iterator<Item = &str> {
    pretokenizer().find_iter(text).map(|m| m.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    n_virtual: u32,
    merges: Vec<(u32, u32)>,
    /// Byte expansion per id; empty for specials.
    pieces: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

impl Vocab {
    fn base(n_virtual: u32) -> Self {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.extend((0..3 + n_virtual).map(|_| Vec::new()));
        Vocab {
            n_virtual,
            merges: Vec::new(),
            pieces,
            ranks: HashMap::new(),
        }
    }

    /// Rebuilds a vocabulary from its merge list.
    pub fn from_merges(n_virtual: u32, merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut v = Self::base(n_virtual);
        for (a, b) in merges {
            v.push_merge(a, b)?;
        }
        Ok(v)
    }

    fn push_merge(&mut self, a: u32, b: u32) -> Result<u32> {
        let id = self.len() as u32;
        for t in [a, b] {
            ensure!(
                (t as usize) < self.pieces.len() && !self.is_special(t),
                "merge ({a}, {b}) references {t}, which is not an earlier byte or merged token"
            );
        }
        let mut piece = self.pieces[a as usize].clone();
        piece.extend_from_slice(&self.pieces[b as usize]);
        self.pieces.push(piece);
        self.merges.push((a, b));
        self.ranks.insert((a, b), self.merges.len() as u32 - 1);
        Ok(id)
    }

    /// Bytes, specials and virtual slots: the floor for any target size.
    pub fn base_size(n_virtual: u32) -> usize {
        (VIRTUAL_BASE + n_virtual) as usize
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn n_virtual(&self) -> u32 {
        self.n_virtual
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn first_merge_id(&self) -> u32 {
        VIRTUAL_BASE + self.n_virtual
    }

    pub fn is_special(&self, id: u32) -> bool {
        (BYTE_TOKENS..self.first_merge_id()).contains(&id)
    }

    /// Id of soft-prompt slot `j`.
    pub fn virtual_id(&self, j: u32) -> Option<u32> {
        (j < self.n_virtual).then_some(VIRTUAL_BASE + j)
    }

    pub fn is_virtual(&self, id: u32) -> bool {
        (VIRTUAL_BASE..VIRTUAL_BASE + self.n_virtual).contains(&id)
    }

    pub fn special_name(&self, id: u32) -> Option<String> {
        match id {
            EOD => Some("<|eod|>".into()),
            PAD => Some("<|pad|>".into()),
            SEP => Some("<|sep|>".into()),
            _ if self.is_virtual(id) => Some(format!("<|v{}|>", id - VIRTUAL_BASE)),
            _ => None,
        }
    }

    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            let new_id = self.first_merge_id() + rank;
            ids = merge_pair(&ids, pair, new_id);
        }
        out.extend(ids);
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2);
        let mut cache: HashMap<&str, Vec<u32>> = HashMap::new();
        for chunk in pretokenize(text) {
            let ids = cache.entry(chunk).or_insert_with(|| {
                let mut v = Vec::new();
                self.encode_chunk(chunk.as_bytes(), &mut v);
                v
            });
            out.extend_from_slice(ids);
        }
        out
    }

    /// Encodes many texts in parallel; output order follows input order.
    pub fn encode_all<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Vec<Vec<u32>> {
        texts.par_iter().map(|t| self.encode(t.as_ref())).collect()
    }

    /// Raw bytes of a token sequence; special tokens are rendered by name.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if let Some(name) = self.special_name(id) {
                out.extend_from_slice(name.as_bytes());
                continue;
            }
            let piece = self.piece(id).ok_or(Error::Index {
                what: "token id",
                index: id as usize,
                bound: self.len(),
            })?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Versioned text form: header, merge rules in learned order, special table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{FILE_HEADER}").unwrap();
        writeln!(s, "virtual {}", self.n_virtual).unwrap();
        writeln!(s, "merges {}", self.merges.len()).unwrap();
        for (a, b) in &self.merges {
            writeln!(s, "{a} {b}").unwrap();
        }
        let specials: Vec<u32> = (BYTE_TOKENS..self.first_merge_id()).collect();
        writeln!(s, "specials {}", specials.len()).unwrap();
        for id in specials {
            writeln!(s, "{id} {}", self.special_name(id).unwrap()).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("vocab file", d);
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| bad(format!("missing {what}")));
        let header = next("header")?;
        if header.trim() != FILE_HEADER {
            return Err(bad(format!("unsupported header {header:?}")));
        }
        let field = |line: &str, key: &str| -> Result<u64> {
            line.strip_prefix(key)
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| bad(format!("expected `{key} <n>`, got {line:?}")))
        };
        let n_virtual = field(next("virtual count")?, "virtual ")? as u32;
        let n_merges = field(next("merge count")?, "merges ")?;
        let mut merges = Vec::with_capacity(n_merges as usize);
        for i in 0..n_merges {
            let line = next("merge rule")?;
            let mut it = line.split_whitespace().map(str::parse::<u32>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => merges.push((a, b)),
                _ => return Err(bad(format!("merge rule {i}: {line:?}"))),
            }
        }
        let vocab = Self::from_merges(n_virtual, merges)?;
        let n_specials = field(next("special count")?, "specials ")?;
        if n_specials != (vocab.first_merge_id() - BYTE_TOKENS) as u64 {
            return Err(bad(format!("special table has {n_specials} entries")));
        }
        for _ in 0..n_specials {
            let line = next("special entry")?;
            let (id, name) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("special entry {line:?}")))?;
            let id: u32 = id.parse().map_err(|_| bad(format!("special id {id:?}")))?;
            if vocab.special_name(id).as_deref() != Some(name) {
                return Err(bad(format!("special {id} named {name:?}")));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn merge_pair(ids: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Learns merges until the vocabulary reaches `target_size` or no adjacent
/// pair occurs at least twice.
///
/// Each step merges the most frequent pair; equal counts go to the pair
/// whose byte expansions are lexicographically smallest.
pub fn learn_bpe<S: AsRef<str>>(texts: &[S], target_size: usize, n_virtual: u32) -> Result<Vocab> {
    let base = Vocab::base_size(n_virtual);
    ensure!(
        target_size >= base,
        "target vocabulary {target_size} is below the {base} base symbols"
    );
    let mut vocab = Vocab::base(n_virtual);

    let mut chunk_counts: HashMap<&str, usize> = HashMap::new();
    for t in texts {
        for c in pretokenize(t.as_ref()) {
            *chunk_counts.entry(c).or_default() += 1;
        }
    }
    let mut chunks: Vec<(&str, usize)> = chunk_counts.into_iter().collect();
    chunks.sort_unstable();
    let mut words: Vec<Vec<u32>> = chunks
        .iter()
        .map(|(c, _)| c.bytes().map(u32::from).collect())
        .collect();
    let freq: Vec<usize> = chunks.iter().map(|&(_, n)| n).collect();

    let mut pair_counts: HashMap<(u32, u32), usize> = HashMap::new();
    let mut occurs: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    for (w, ids) in words.iter().enumerate() {
        for p in ids.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += freq[w];
            occurs.entry((p[0], p[1])).or_default().insert(w);
        }
    }

    while vocab.len() < target_size {
        let best = pair_counts
            .iter()
            .filter(|(_, &n)| n >= 2)
            .min_by(|(pa, na), (pb, nb)| {
                nb.cmp(na).then_with(|| {
                    let key = |p: &(u32, u32)| (vocab.pieces[p.0 as usize].as_slice(), vocab.pieces[p.1 as usize].as_slice());
                    key(pa).cmp(&key(pb))
                })
            })
            .map(|(&p, _)| p);
        let Some(pair) = best else { break };
        let new_id = vocab.push_merge(pair.0, pair.1)?;

        let touched = occurs.remove(&pair).unwrap_or_default();
        for w in touched {
            for p in words[w].windows(2) {
                let key = (p[0], p[1]);
                if let Some(n) = pair_counts.get_mut(&key) {
                    *n -= freq[w];
                    if *n == 0 {
                        pair_counts.remove(&key);
                    }
                }
                if key != pair {
                    if let Some(set) = occurs.get_mut(&key) {
                        set.remove(&w);
                    }
                }
            }
            words[w] = merge_pair(&words[w], pair, new_id);
            for p in words[w].windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += freq[w];
                occurs.entry((p[0], p[1])).or_default().insert(w);
            }
        }
        pair_counts.remove(&pair);
    }
    Ok(vocab)
}
