use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Token strings of the reserved ids, in id order. Padding is the empty string.
pub const SPECIAL_TOKENS: [&str; 4] = ["", "<bos>", "<eos>", "<unk>"];

/// Dense id ↔ token-string table. Ids `0..4` are pad, bos, eos, unk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Validates the special prefix, non-emptiness and uniqueness.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::format("vocab", "must start with pad, bos, eos, unk"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if id != PAD && tok.is_empty() {
                return Err(Error::format("vocab", format!("empty token at id {id}")));
            }
            if tok.contains('\n') {
                return Err(Error::format("vocab", format!("newline in token {id}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::format("vocab", format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Specials followed by every distinct character of `corpus`, sorted by code point.
    pub fn from_alphabet<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        let chars: BTreeSet<char> = corpus.iter().flat_map(|l| l.as_ref().chars()).collect();
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(chars.into_iter().map(String::from));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    /// Appends `token` unless present; returns its id.
    pub(crate) fn push(&mut self, token: String) -> usize {
        if let Some(id) = self.id(&token) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// One token per line, pad first as an empty line.
    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body = text
            .strip_suffix('\n')
            .ok_or_else(|| Error::format("vocab file", "missing trailing newline"))?;
        Self::from_tokens(body.split('\n').map(String::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Token ids of one text under one tokenizer, with the character span each
/// token covers (`bos` is `(0, 0)`, `eos` is `(n, n)`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
    pub vocab_size: usize,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Sequence truncated to its first `n` tokens.
    pub fn prefix(&self, n: usize) -> TokenSeq {
        TokenSeq {
            ids: self.ids[..n].to_vec(),
            spans: self.spans[..n].to_vec(),
            vocab_size: self.vocab_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_vocab_layout() {
        let v = Vocab::from_alphabet(&["ba", "c a"]).unwrap();
        assert_eq!(v.len(), 4 + 4);
        assert_eq!(v.id(" "), Some(4));
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.token(BOS), Some("<bos>"));
    }

    #[test]
    fn text_roundtrip_keeps_spaces() {
        let mut v = Vocab::from_alphabet(&["ab c"]).unwrap();
        v.push(" c".into());
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id(" c"), Some(v.len() - 1));
    }

    #[test]
    fn rejects_malformed() {
        assert!(Vocab::from_tokens(vec!["x".into()]).is_err());
        let mut toks: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        toks.push(String::new());
        assert!(Vocab::from_tokens(toks.clone()).is_err());
        toks.pop();
        toks.push("<bos>".into());
        assert!(Vocab::from_tokens(toks).is_err());
    }
}
