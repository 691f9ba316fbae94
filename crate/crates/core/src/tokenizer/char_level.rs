use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::vocab::{TokenSeq, Vocab, BOS, EOS, UNK};

/// One token per character; unknown characters map to `unk`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharTokenizer {
    vocab: Vocab,
}

impl CharTokenizer {
    pub fn new(vocab: Vocab) -> Self {
        Self { vocab }
    }

    pub fn from_corpus<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        Ok(Self::new(Vocab::from_alphabet(corpus)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(Vocab::load(path)?))
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// `[bos, c₁, …, cₙ, eos]`.
    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        if text.is_empty() {
            return Err(Error::Empty("cannot encode empty text".into()));
        }
        let mut seq = self.encode_body(text);
        let n = text.chars().count();
        seq.ids.insert(0, BOS);
        seq.spans.insert(0, (0, 0));
        seq.ids.push(EOS);
        seq.spans.push((n, n));
        Ok(seq)
    }

    /// Characters of `text` without framing tokens.
    pub fn encode_body(&self, text: &str) -> TokenSeq {
        let mut buf = [0u8; 4];
        let (ids, spans) = text
            .chars()
            .enumerate()
            .map(|(k, c)| {
                let id = self.vocab.id(c.encode_utf8(&mut buf)).unwrap_or(UNK);
                (id, (k, k + 1))
            })
            .unzip();
        TokenSeq {
            ids,
            spans,
            vocab_size: self.vocab.len(),
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        decode_with(&self.vocab, ids)
    }
}

pub(crate) fn decode_with(vocab: &Vocab, ids: &[usize]) -> String {
    let mut out = String::new();
    for &id in ids {
        match id {
            UNK => out.push('\u{FFFD}'),
            id if Vocab::is_special(id) => {}
            id => out.push_str(vocab.token(id).unwrap_or("\u{FFFD}")),
        }
    }
    out
}
