//! Greedy pair-merge tokenizer.
//!
//! Text is split into chunks before every space character (so a chunk is an
//! optional leading space plus the following non-space run); merges never
//! cross a chunk boundary. Training repeatedly merges the most frequent
//! adjacent symbol pair, breaking ties by the lexicographically smallest
//! `(left, right)` pair. Encoding applies the learned merges in order, each
//! one left to right over every chunk.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::char_level::decode_with;
use crate::tokenizer::vocab::{TokenSeq, Vocab, BOS, EOS, UNK};

pub type Merge = (String, String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairTokenizer {
    vocab: Vocab,
    merges: Vec<Merge>,
}

fn chunks(text: &str) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for c in text.chars() {
        if c == ' ' || out.is_empty() {
            out.push(Vec::new());
        }
        out.last_mut().expect("pushed above").push(c.to_string());
    }
    out
}

fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    if symbols.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Learns up to `num_merges` merges; stops early once no pair occurs twice.
pub fn train_merges<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<Vec<Merge>> {
    if num_merges == 0 {
        return Err(Error::InvalidArgument("num_merges must be at least 1".into()));
    }
    let mut words: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for line in corpus {
        for chunk in chunks(line.as_ref()) {
            *words.entry(chunk).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, usize)> = words.into_iter().collect();
    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (symbols, freq) in &words {
            for pair in symbols.windows(2) {
                *counts.entry((&pair[0], &pair[1])).or_default() += freq;
            }
        }
        // BTreeMap iterates pairs in lexicographic order, so the first maximum wins ties
        let mut best: Option<((&str, &str), usize)> = None;
        for (pair, count) in counts {
            if best.map_or(true, |(_, c)| count > c) {
                best = Some((pair, count));
            }
        }
        let merge = match best {
            Some(((l, r), count)) if count >= 2 => (l.to_string(), r.to_string()),
            _ => break,
        };
        for (symbols, _) in &mut words {
            apply_merge(symbols, &merge.0, &merge.1);
        }
        merges.push(merge);
    }
    Ok(merges)
}

impl PairTokenizer {
    /// Vocab is the character alphabet of `corpus` followed by merged tokens in merge order.
    pub fn new(mut vocab: Vocab, merges: Vec<Merge>) -> Result<Self> {
        for (l, r) in &merges {
            if vocab.id(l).is_none() || vocab.id(r).is_none() {
                return Err(Error::format("merge list", format!("merge ({l:?}, {r:?}) uses unknown symbols")));
            }
            vocab.push(format!("{l}{r}"));
        }
        Ok(Self { vocab, merges })
    }

    pub fn train<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<Self> {
        let merges = train_merges(corpus, num_merges)?;
        Self::new(Vocab::from_alphabet(corpus)?, merges)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        if text.is_empty() {
            return Err(Error::Empty("cannot encode empty text".into()));
        }
        let n = text.chars().count();
        let mut ids = vec![BOS];
        let mut spans = vec![(0, 0)];
        let mut offset = 0;
        for mut chunk in chunks(text) {
            for (l, r) in &self.merges {
                apply_merge(&mut chunk, l, r);
            }
            for sym in chunk {
                let width = sym.chars().count();
                ids.push(self.vocab.id(&sym).unwrap_or(UNK));
                spans.push((offset, offset + width));
                offset += width;
            }
        }
        ids.push(EOS);
        spans.push((n, n));
        Ok(TokenSeq {
            ids,
            spans,
            vocab_size: self.vocab.len(),
        })
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        decode_with(&self.vocab, ids)
    }

    /// `left<TAB>right` per line.
    pub fn merges_to_text(&self) -> String {
        self.merges.iter().map(|(l, r)| format!("{l}\t{r}\n")).collect()
    }

    pub fn merges_from_text(text: &str) -> Result<Vec<Merge>> {
        text.lines()
            .enumerate()
            .map(|(k, line)| {
                line.split_once('\t')
                    .map(|(l, r)| (l.to_string(), r.to_string()))
                    .ok_or_else(|| Error::format("merges file", format!("line {} has no tab", k + 1)))
            })
            .collect()
    }

    /// Writes the base alphabet vocab and the merge list.
    pub fn save(&self, alphabet_path: &Path, merges_path: &Path) -> Result<()> {
        let base = self.base_vocab()?;
        base.save(alphabet_path)?;
        std::fs::write(merges_path, self.merges_to_text())?;
        Ok(())
    }

    pub fn load(alphabet_path: &Path, merges_path: &Path) -> Result<Self> {
        let base = Vocab::load(alphabet_path)?;
        if !merges_path.exists() {
            return Err(Error::MissingArtifact(merges_path.to_path_buf()));
        }
        let merges = Self::merges_from_text(&std::fs::read_to_string(merges_path)?)?;
        Self::new(base, merges)
    }

    /// The single-character prefix of the vocab (everything before the first merged token).
    fn base_vocab(&self) -> Result<Vocab> {
        let n_base = self
            .vocab
            .tokens()
            .iter()
            .enumerate()
            .position(|(id, t)| !Vocab::is_special(id) && t.chars().count() > 1)
            .unwrap_or(self.vocab.len());
        Vocab::from_tokens(self.vocab.tokens()[..n_base].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::CharTokenizer;

    #[test]
    fn single_candidate_merge() {
        assert_eq!(train_merges(&["aaaa"], 1).unwrap(), vec![("a".into(), "a".into())]);
    }

    #[test]
    fn most_frequent_pair_first() {
        let m = train_merges(&["abab", "abab"], 2).unwrap();
        assert_eq!(m[0], ("a".into(), "b".into()));
    }

    #[test]
    fn stops_without_repeated_pairs() {
        let m = train_merges(&["abcd"], 5).unwrap();
        assert!(m.is_empty());
        assert!(train_merges(&["ab"], 0).is_err());
    }

    #[test]
    fn forced_single_merge_encoding() {
        let vocab = Vocab::from_alphabet(&["ab"]).unwrap();
        let t = PairTokenizer::new(vocab, vec![("a".into(), "b".into())]).unwrap();
        let ab = t.vocab().id("ab").unwrap();
        let seq = t.encode("abab").unwrap();
        assert_eq!(seq.ids, vec![BOS, ab, ab, EOS]);
        assert_eq!(seq.spans, vec![(0, 0), (0, 2), (2, 4), (4, 4)]);
    }

    #[test]
    fn empty_merge_list_matches_char_encoding() {
        let corpus = ["the cat sat", "a hat"];
        let chars = CharTokenizer::from_corpus(&corpus).unwrap();
        let pairs = PairTokenizer::new(Vocab::from_alphabet(&corpus).unwrap(), vec![]).unwrap();
        for text in ["the hat", "sat a cat", "zz"] {
            assert_eq!(pairs.encode(text).unwrap(), chars.encode(text).unwrap());
        }
    }

    #[test]
    fn merges_respect_space_boundaries() {
        let t = PairTokenizer::train(&["ab ab ab ab"], 10).unwrap();
        for (l, r) in t.merges() {
            assert!(!r.starts_with(' '), "merge crosses a chunk: {l:?}+{r:?}");
        }
        assert_eq!(t.decode(&t.encode("ab ab").unwrap().ids), "ab ab");
    }

    #[test]
    fn merges_text_roundtrip() {
        let t = PairTokenizer::train(&["ab ab ab ab", "ba ba"], 10).unwrap();
        assert_eq!(PairTokenizer::merges_from_text(&t.merges_to_text()).unwrap(), t.merges());
        assert!(PairTokenizer::merges_from_text("nope\n").is_err());
    }
}
