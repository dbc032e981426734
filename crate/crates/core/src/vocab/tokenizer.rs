//! Deterministic byte-level BPE.
//!
//! Ids `0..256` are raw bytes, `256..260` the special tokens, and learned
//! merges follow from 260 in the order they were learned.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Result, VocabError};

pub const CLS: u32 = 256;
pub const SEP: u32 = 257;
pub const PAD: u32 = 258;
pub const UNK: u32 = 259;
pub const FIRST_MERGE_ID: u32 = 260;
pub const MIN_VOCAB_SIZE: usize = FIRST_MERGE_ID as usize;

const FORMAT_VERSION: u32 = 1;

/// Words, punctuation runs and whitespace runs; a single leading space
/// attaches to the following word. Covers every character, so splitting is
/// lossless.
static PRE_TOKENIZE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s?\w+|\s?[^\w\s]+|\s+").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub cls: u32,
    pub sep: u32,
    pub pad: u32,
    pub unk: u32,
}

impl Default for SpecialIds {
    fn default() -> Self {
        Self {
            cls: CLS,
            sep: SEP,
            pad: PAD,
            unk: UNK,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    alphabet_size: u32,
    special_ids: SpecialIds,
    merges: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TokenizerFile", into = "TokenizerFile")]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    token_bytes: Vec<Vec<u8>>,
}

impl TryFrom<TokenizerFile> for Tokenizer {
    type Error = VocabError;

    fn try_from(f: TokenizerFile) -> Result<Self> {
        if f.version != FORMAT_VERSION {
            return Err(VocabError::Invalid(format!(
                "unsupported tokenizer version {}",
                f.version
            )));
        }
        if f.alphabet_size != 256 || f.special_ids != SpecialIds::default() {
            return Err(VocabError::Invalid("unexpected alphabet or special ids".into()));
        }
        let mut tok = Self::byte_level();
        for (i, &(l, r)) in f.merges.iter().enumerate() {
            let limit = FIRST_MERGE_ID + i as u32;
            let ok = |id: u32| id < limit && !(CLS..FIRST_MERGE_ID).contains(&id);
            if !ok(l) || !ok(r) {
                return Err(VocabError::Invalid(format!("merge {i} references an unknown id")));
            }
            tok.push_merge(l, r);
        }
        Ok(tok)
    }
}

impl From<Tokenizer> for TokenizerFile {
    fn from(t: Tokenizer) -> Self {
        Self {
            version: FORMAT_VERSION,
            alphabet_size: 256,
            special_ids: SpecialIds::default(),
            merges: t.merges,
        }
    }
}

/// Heap key: highest count first, then the lexicographically smallest
/// (left bytes, right bytes) pair.
#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    key: Reverse<(Vec<u8>, Vec<u8>)>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| self.key.cmp(&other.key))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn merge_word(word: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

impl Tokenizer {
    /// Tokenizer with no merges: one token per byte.
    pub fn byte_level() -> Self {
        let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        token_bytes.extend(std::iter::repeat_n(Vec::new(), 4));
        Self {
            merges: Vec::new(),
            ranks: HashMap::new(),
            token_bytes,
        }
    }

    fn push_merge(&mut self, l: u32, r: u32) -> u32 {
        let id = FIRST_MERGE_ID + self.merges.len() as u32;
        let mut bytes = self.token_bytes[l as usize].clone();
        bytes.extend_from_slice(&self.token_bytes[r as usize]);
        self.token_bytes.push(bytes);
        self.ranks.insert((l, r), self.merges.len() as u32);
        self.merges.push((l, r));
        id
    }

    /// Learns up to `vocab_size - 260` merges, greedily taking the most
    /// frequent adjacent pair (ties: lexicographically smallest bytes).
    /// Stops early when no pair remains.
    pub fn train<'a>(corpus: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<Self> {
        if vocab_size < MIN_VOCAB_SIZE {
            return Err(VocabError::VocabSizeTooSmall(vocab_size));
        }
        let mut word_counts: HashMap<&str, i64> = HashMap::new();
        let mut any_text = false;
        for text in corpus {
            any_text |= !text.is_empty();
            for m in PRE_TOKENIZE.find_iter(text) {
                *word_counts.entry(m.as_str()).or_default() += 1;
            }
        }
        if !any_text {
            return Err(VocabError::EmptyCorpus);
        }
        let mut entries: Vec<(&str, i64)> = word_counts.into_iter().collect();
        entries.sort_unstable();
        let freqs: Vec<i64> = entries.iter().map(|e| e.1).collect();
        let mut words: Vec<Vec<u32>> = entries
            .iter()
            .map(|(w, _)| w.bytes().map(u32::from).collect())
            .collect();

        let mut tok = Self::byte_level();
        let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
        let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (wi, w) in words.iter().enumerate() {
            for p in w.windows(2) {
                let pair = (p[0], p[1]);
                *pair_counts.entry(pair).or_default() += freqs[wi];
                where_.entry(pair).or_default().insert(wi);
            }
        }
        let candidate = |tok: &Tokenizer, pair: (u32, u32), count: i64| Candidate {
            count,
            key: Reverse((
                tok.token_bytes[pair.0 as usize].clone(),
                tok.token_bytes[pair.1 as usize].clone(),
            )),
            pair,
        };
        let mut heap: BinaryHeap<Candidate> = pair_counts.iter().map(|(&pair, &c)| candidate(&tok, pair, c)).collect();

        let target = vocab_size - MIN_VOCAB_SIZE;
        while tok.merges.len() < target {
            let Some(best) = heap.pop() else { break };
            let current = pair_counts.get(&best.pair).copied().unwrap_or(0);
            if current <= 0 {
                continue;
            }
            if current != best.count {
                heap.push(candidate(&tok, best.pair, current));
                continue;
            }
            let new_id = tok.push_merge(best.pair.0, best.pair.1);
            let mut affected: Vec<usize> = where_.remove(&best.pair).unwrap_or_default().into_iter().collect();
            affected.sort_unstable();
            let mut touched: HashSet<(u32, u32)> = HashSet::new();
            for wi in affected {
                let f = freqs[wi];
                let w = &mut words[wi];
                for p in w.windows(2) {
                    let pair = (p[0], p[1]);
                    *pair_counts.get_mut(&pair).unwrap() -= f;
                    touched.insert(pair);
                }
                merge_word(w, best.pair, new_id);
                for p in w.windows(2) {
                    let pair = (p[0], p[1]);
                    *pair_counts.entry(pair).or_default() += f;
                    where_.entry(pair).or_default().insert(wi);
                    touched.insert(pair);
                }
            }
            let mut touched: Vec<_> = touched.into_iter().collect();
            touched.sort_unstable();
            for pair in touched {
                let c = pair_counts[&pair];
                if c > 0 {
                    heap.push(candidate(&tok, pair, c));
                }
            }
        }
        Ok(tok)
    }

    pub fn vocab_size(&self) -> usize {
        MIN_VOCAB_SIZE + self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn special_ids(&self) -> SpecialIds {
        SpecialIds::default()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = word.bytes().map(u32::from).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_word(&mut ids, pair, FIRST_MERGE_ID + rank);
        }
        out.extend_from_slice(&ids);
    }

    /// Content token ids for `text`, without special tokens.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 3);
        for m in PRE_TOKENIZE.find_iter(text) {
            self.encode_word(m.as_str(), &mut out);
        }
        out
    }

    /// Inverse of [`tokenize`](Self::tokenize). Special tokens are skipped;
    /// ids outside the vocabulary decode as U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            match id {
                CLS | SEP | PAD => {}
                UNK => bytes.extend_from_slice("\u{FFFD}".as_bytes()),
                _ => match self.token_bytes.get(id as usize) {
                    Some(b) => bytes.extend_from_slice(b),
                    None => bytes.extend_from_slice("\u{FFFD}".as_bytes()),
                },
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Which end of an over-long component survives truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    #[default]
    HeadOnly,
    TailOnly,
}

/// `[CLS] content… [SEP] PAD…` with a mask that is true on real tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of unmasked (real) positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Content tokens between CLS and SEP.
    pub fn content(&self) -> &[u32] {
        &self.ids[1..self.real_len() - 1]
    }

    /// The same sequence with trailing padding removed.
    pub fn trimmed(&self) -> TokenSequence {
        let n = self.real_len();
        TokenSequence {
            ids: self.ids[..n].to_vec(),
            mask: vec![true; n],
        }
    }

    /// The same sequence padded (or trimmed) to `len` positions.
    pub fn padded_to(&self, len: usize) -> TokenSequence {
        let n = self.real_len();
        assert!(len >= n, "cannot pad {n} real tokens into {len} positions");
        let mut ids = self.ids[..n].to_vec();
        ids.resize(len, PAD);
        let mut mask = vec![true; n];
        mask.resize(len, false);
        TokenSequence { ids, mask }
    }
}

/// Tokenizes `text` into exactly `max_len` positions, keeping the first
/// (head) or last (tail) `max_len - 2` content tokens.
///
/// # Panics
/// If `max_len < 2`.
pub fn encode(tok: &Tokenizer, text: &str, max_len: usize, strategy: Truncation) -> TokenSequence {
    assert!(max_len >= 2, "max_len must leave room for CLS and SEP");
    let content = tok.tokenize(text);
    let budget = max_len - 2;
    let kept = if content.len() <= budget {
        &content[..]
    } else {
        match strategy {
            Truncation::HeadOnly => &content[..budget],
            Truncation::TailOnly => &content[content.len() - budget..],
        }
    };
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend_from_slice(kept);
    ids.push(SEP);
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mut mask = vec![true; real];
    mask.resize(max_len, false);
    TokenSequence { ids, mask }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn floor_vocab_is_pure_bytes() {
        let tok = Tokenizer::train(["hello hello"], 260).unwrap();
        assert!(tok.merges().is_empty());
        assert_eq!(tok.tokenize("hi"), vec![b'h' as u32, b'i' as u32]);
    }

    #[test]
    fn below_floor_is_rejected() {
        assert!(matches!(
            Tokenizer::train(["x"], 259),
            Err(VocabError::VocabSizeTooSmall(259))
        ));
        assert!(matches!(Tokenizer::train([""], 300), Err(VocabError::EmptyCorpus)));
    }

    #[test]
    fn single_merge_on_aaaa() {
        let tok = Tokenizer::train(["aaaa"], 261).unwrap();
        let a = b'a' as u32;
        assert_eq!(tok.merges(), &[(a, a)]);
        assert_eq!(tok.tokenize("aaaa"), vec![260, 260]);
        assert_eq!(tok.tokenize("aaa"), vec![260, a]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // (a,b) and (c,d) both occur twice; (a,b) sorts first
        let tok = Tokenizer::train(["cd", "ab", "cd", "ab"], 261).unwrap();
        assert_eq!(tok.merges(), &[(b'a' as u32, b'b' as u32)]);
    }

    #[test]
    fn most_frequent_pair_wins() {
        let tok = Tokenizer::train(["xy xy xy ab"], 262).unwrap();
        let (x, y, sp) = (b'x' as u32, b'y' as u32, b' ' as u32);
        assert_eq!(tok.merges()[0], (x, y));
        // " xy" occurs twice
        assert_eq!(tok.merges()[1], (sp, 260));
    }

    #[test]
    fn training_is_deterministic() {
        let text = "fn main() { let x = vec![1, 2, 3]; println!(\"{:?}\", x); }\n".repeat(20);
        let a = Tokenizer::train([text.as_str()], 400).unwrap();
        let b = Tokenizer::train([text.as_str()], 400).unwrap();
        assert_eq!(a.merges(), b.merges());
    }

    #[test]
    fn incremental_training_matches_naive_recount() {
        let text = "the cat sat on the mat; the bat ate the rat. that hat!";
        let tok = Tokenizer::train([text], 300).unwrap();
        // naive oracle: recount every pair after each merge
        let mut words: Vec<(Vec<u32>, i64)> = Vec::new();
        let mut counts: HashMap<&str, i64> = HashMap::new();
        for m in PRE_TOKENIZE.find_iter(text) {
            *counts.entry(m.as_str()).or_default() += 1;
        }
        for (w, c) in counts {
            words.push((w.bytes().map(u32::from).collect(), c));
        }
        let mut oracle = Tokenizer::byte_level();
        for _ in 0..40 {
            let mut pc: HashMap<(u32, u32), i64> = HashMap::new();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pc.entry((p[0], p[1])).or_default() += c;
                }
            }
            let Some(best) = pc
                .iter()
                .map(|(&p, &c)| {
                    let key = (
                        oracle.token_bytes[p.0 as usize].clone(),
                        oracle.token_bytes[p.1 as usize].clone(),
                    );
                    (Reverse(c), key, p)
                })
                .min()
            else {
                break;
            };
            let id = oracle.push_merge(best.2 .0, best.2 .1);
            for (w, _) in &mut words {
                merge_word(w, best.2, id);
            }
        }
        assert_eq!(tok.merges(), oracle.merges());
    }

    #[test]
    fn empty_text_encoding() {
        let tok = Tokenizer::byte_level();
        let seq = encode(&tok, "", 4, Truncation::HeadOnly);
        assert_eq!(seq.ids, vec![CLS, SEP, PAD, PAD]);
        assert_eq!(seq.mask, vec![true, true, false, false]);
    }

    #[test]
    fn json_round_trip() {
        let tok = Tokenizer::train(["some text with some words, some repeated"], 280).unwrap();
        let json = serde_json::to_string(&tok).unwrap();
        let back: Tokenizer = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tok);
        let bad = r#"{"version":1,"alphabet_size":256,"special_ids":{"cls":256,"sep":257,"pad":258,"unk":259},"merges":[[97,300]]}"#;
        assert!(serde_json::from_str::<Tokenizer>(bad).is_err());
    }

    #[test]
    fn decode_skips_specials_and_replaces_unknown() {
        let tok = Tokenizer::byte_level();
        assert_eq!(tok.decode(&[CLS, b'o' as u32, b'k' as u32, SEP, PAD]), "ok");
        assert_eq!(tok.decode(&[UNK, 99_999]), "\u{FFFD}\u{FFFD}");
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(text in "\\PC{0,80}", extra in "[a-z \n\t{}();]{0,60}") {
            let corpus = format!("{text}{extra}{text}");
            let tok = Tokenizer::train([corpus.as_str()], 300).unwrap();
            prop_assert_eq!(tok.decode(&tok.tokenize(&text)), text.clone());
            prop_assert!(tok.tokenize(&text).iter().all(|&id| (id as usize) < tok.vocab_size() && !(CLS..FIRST_MERGE_ID).contains(&id)));
        }

        #[test]
        fn sequence_shape_invariants(text in "[a-z ]{0,40}", max_len in 2usize..20, tail in any::<bool>()) {
            let tok = Tokenizer::byte_level();
            let strategy = if tail { Truncation::TailOnly } else { Truncation::HeadOnly };
            let seq = encode(&tok, &text, max_len, strategy);
            prop_assert_eq!(seq.ids.len(), max_len);
            prop_assert_eq!(seq.mask.len(), max_len);
            let real = seq.real_len();
            prop_assert!(seq.mask[..real].iter().all(|&m| m) && seq.mask[real..].iter().all(|&m| !m));
            prop_assert_eq!(seq.ids[0], CLS);
            prop_assert_eq!(seq.ids[real - 1], SEP);
            prop_assert!(seq.ids[real..].iter().all(|&i| i == PAD));
            if text.len() <= max_len - 2 {
                let other = if tail { Truncation::HeadOnly } else { Truncation::TailOnly };
                prop_assert_eq!(&seq, &encode(&tok, &text, max_len, other));
            }
        }
    }
}
