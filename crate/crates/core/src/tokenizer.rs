//! Byte-fallback BPE vocabulary.
//!
//! Ids 0–3 are the special tokens, ids 4–259 the 256 single bytes, and ids
//! from 260 up are learned merges in the order they were learned. Encoding
//! repeatedly merges the adjacent pair whose concatenation has the lowest id
//! in the vocabulary, so a vocabulary file alone fully determines encoding.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const IMAGE: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<image>"];
const BYTE_BASE: u32 = 4;
pub const MIN_VOCAB: usize = 260;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    /// Byte content of each id; empty for specials.
    pieces: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, u32>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ByteClass {
    Word,
    Space,
    Other,
}

fn class(b: u8) -> ByteClass {
    if b.is_ascii_alphanumeric() || b >= 0x80 {
        ByteClass::Word
    } else if b == b' ' {
        ByteClass::Space
    } else {
        ByteClass::Other
    }
}

/// Splits text into merge-independent chunks: a space attaches to whatever
/// follows it, word bytes group together, every other byte stands alone.
fn pretokenize(text: &[u8]) -> Vec<&[u8]> {
    let mut chunks = Vec::new();
    let mut start = 0;
    for i in 1..text.len() {
        let cur = &text[start..i];
        let b = text[i];
        let joins = cur != b" "
            && b != b' '
            && class(b) == ByteClass::Word
            && class(cur[cur.len() - 1]) == ByteClass::Word;
        let after_space = cur == b" " && b != b' ';
        if !(joins || after_space) {
            chunks.push(cur);
            start = i;
        }
    }
    if start < text.len() {
        chunks.push(&text[start..]);
    }
    chunks
}

impl Vocabulary {
    /// Specials and the 256 byte tokens, no merges.
    pub fn bytes_only() -> Self {
        let mut pieces: Vec<Vec<u8>> = SPECIALS.iter().map(|_| Vec::new()).collect();
        let mut lookup = HashMap::new();
        for b in 0..=255u8 {
            lookup.insert(vec![b], pieces.len() as u32);
            pieces.push(vec![b]);
        }
        Vocabulary { pieces, lookup }
    }

    /// Learns a vocabulary of at most `target_size` ids by greedy pair
    /// merging. The most frequent adjacent pair is merged first; ties go to
    /// the pair with the smaller ids. Merging stops early once no pair occurs
    /// at least twice.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, target_size: usize) -> Result<Self> {
        if target_size < MIN_VOCAB {
            return Err(Error::Contract(format!(
                "vocabulary size {target_size} is below the minimum of {MIN_VOCAB}"
            )));
        }
        let mut counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
        for text in corpus {
            for chunk in pretokenize(text.as_bytes()) {
                *counts.entry(chunk.to_vec()).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut vocab = Self::bytes_only();
        let mut words: Vec<(Vec<u32>, u64)> = counts
            .into_iter()
            .map(|(w, c)| (w.iter().map(|&b| BYTE_BASE + b as u32).collect(), c))
            .collect();

        while vocab.len() < target_size {
            let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
            for (ids, c) in &words {
                for w in ids.windows(2) {
                    *pairs.entry((w[0], w[1])).or_insert(0) += c;
                }
            }
            let Some((&best, &count)) = pairs
                .iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            else {
                break;
            };
            if count < 2 {
                break;
            }
            let mut piece = vocab.pieces[best.0 as usize].clone();
            piece.extend_from_slice(&vocab.pieces[best.1 as usize]);
            let id = match vocab.lookup.get(&piece) {
                Some(&id) => id,
                None => {
                    let id = vocab.pieces.len() as u32;
                    vocab.lookup.insert(piece.clone(), id);
                    vocab.pieces.push(piece);
                    id
                }
            };
            for (ids, _) in &mut words {
                merge_pair(ids, best, id);
            }
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn is_special(id: u32) -> bool {
        id < BYTE_BASE
    }

    /// Encodes text; never produces special ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len());
        for chunk in pretokenize(bytes) {
            let mut ids: Vec<u32> = chunk.iter().map(|&b| BYTE_BASE + b as u32).collect();
            loop {
                let mut best: Option<(usize, u32)> = None;
                for i in 0..ids.len().saturating_sub(1) {
                    let mut piece = self.pieces[ids[i] as usize].clone();
                    piece.extend_from_slice(&self.pieces[ids[i + 1] as usize]);
                    if let Some(&id) = self.lookup.get(&piece) {
                        if best.is_none_or(|(_, b)| id < b) {
                            best = Some((i, id));
                        }
                    }
                }
                let Some((i, id)) = best else { break };
                ids[i] = id;
                ids.remove(i + 1);
            }
            out.extend(ids);
        }
        out
    }

    /// Concatenated bytes of non-special ids.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .filter_map(|&id| self.pieces.get(id as usize))
            .flatten()
            .copied()
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    /// Printable form of one token, as used in vocabulary files.
    pub fn token_text(&self, id: u32) -> Option<String> {
        if Self::is_special(id) {
            return SPECIALS.get(id as usize).map(|s| s.to_string());
        }
        self.pieces.get(id as usize).map(|p| escape(p))
    }

    /// One token per line; the id is the zero-based line number.
    pub fn to_lines(&self) -> Vec<String> {
        (0..self.len() as u32).map(|id| self.token_text(id).expect("id in range")).collect()
    }

    pub fn from_lines<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        if lines.len() < MIN_VOCAB {
            return Err(Error::Format(format!(
                "vocabulary has {} entries, need at least {MIN_VOCAB}",
                lines.len()
            )));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if lines[i].as_ref() != *s {
                return Err(Error::Format(format!("line {}: expected special token {s}", i + 1)));
            }
        }
        let mut vocab = Self::bytes_only();
        for (i, line) in lines.iter().enumerate().take(MIN_VOCAB).skip(BYTE_BASE as usize) {
            let piece = unescape(line.as_ref()).map_err(|m| Error::Format(format!("line {}: {m}", i + 1)))?;
            if piece != vocab.pieces[i] {
                return Err(Error::Format(format!("line {}: expected byte token {}", i + 1, i - 4)));
            }
        }
        for (i, line) in lines.iter().enumerate().skip(MIN_VOCAB) {
            let piece = unescape(line.as_ref()).map_err(|m| Error::Format(format!("line {}: {m}", i + 1)))?;
            if piece.len() < 2 {
                return Err(Error::Format(format!("line {}: merged token shorter than two bytes", i + 1)));
            }
            if vocab.lookup.insert(piece.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("line {}: duplicate token", i + 1)));
            }
            vocab.pieces.push(piece);
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_lines().join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        Self::from_lines(&lines)
    }
}

fn merge_pair(ids: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            out.push(id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}

fn escape(bytes: &[u8]) -> String {
    let mut s = String::new();
    for &b in bytes {
        if (0x21..=0x7e).contains(&b) && b != b'\\' {
            s.push(b as char);
        } else {
            let _ = write!(s, "\\x{b:02x}");
        }
    }
    s
}

fn unescape(s: &str) -> std::result::Result<Vec<u8>, String> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            let hex = s
                .get(i + 2..i + 4)
                .filter(|_| bytes.get(i + 1) == Some(&b'x'))
                .ok_or_else(|| format!("bad escape at column {}", i + 1))?;
            out.push(u8::from_str_radix(hex, 16).map_err(|_| format!("bad hex escape {hex:?}"))?);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        return Err("empty token".into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn most_frequent_pair_merges_first() {
        let v = Vocabulary::build(["aaaa"], 261).unwrap();
        assert_eq!(v.len(), 261);
        assert_eq!(v.token_text(260).unwrap(), "aa");
        assert_eq!(v.encode("aaaa"), vec![260, 260]);
    }

    #[test]
    fn small_target_rejected() {
        assert!(matches!(Vocabulary::build(["abc"], 100), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(Vocabulary::build(Vec::<&str>::new(), 300), Err(Error::Data(_))));
        assert!(matches!(Vocabulary::build([""], 300), Err(Error::Data(_))));
    }

    #[test]
    fn round_trips_caption() {
        let v = Vocabulary::build(["a red circle above a blue square", "a green triangle"], 300).unwrap();
        let ids = v.encode("a red circle");
        assert!(ids.len() < "a red circle".len());
        assert!(ids.iter().all(|&id| !Vocabulary::is_special(id)));
        assert_eq!(v.decode(&ids), "a red circle");
    }

    #[test]
    fn pretokenize_attaches_spaces() {
        let chunks = pretokenize(b"a red, blue\nx  y");
        let expect: Vec<&[u8]> = vec![b"a", b" red", b",", b" blue", b"\n", b"x", b" ", b" y"];
        assert_eq!(chunks, expect);
    }

    #[test]
    fn file_lines_round_trip() {
        let v = Vocabulary::build(["hello world\\ \n hello\tworld"], 280).unwrap();
        let back = Vocabulary::from_lines(&v.to_lines()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn malformed_file_rejected() {
        let v = Vocabulary::build(["ab ab ab"], 270).unwrap();
        let mut lines = v.to_lines();
        lines[0] = "<oops>".into();
        assert!(matches!(Vocabulary::from_lines(&lines), Err(Error::Format(_))));
        let mut lines = v.to_lines();
        let dup = lines[260].clone();
        lines.push(dup);
        assert!(Vocabulary::from_lines(&lines).is_err());
    }

    fn corpus_vocab() -> Vocabulary {
        Vocabulary::build(
            ["the quick brown fox jumps over the lazy dog", "USER: what color?\nASSISTANT: red"],
            330,
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let v = corpus_vocab();
            let ids = v.encode_bytes(&bytes);
            prop_assert!(ids.iter().all(|&id| !Vocabulary::is_special(id)));
            prop_assert_eq!(v.decode_bytes(&ids), bytes);
        }
    }
}
