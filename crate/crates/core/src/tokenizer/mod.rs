//! Two deliberately incompatible tokenizers over the same text: a character
//! tokenizer for the student and a greedy pair-merge tokenizer for the teacher.

mod char_level;
mod pair;
mod vocab;

pub use char_level::CharTokenizer;
pub use pair::{train_merges, Merge, PairTokenizer};
pub use vocab::{TokenSeq, Vocab, BOS, EOS, PAD, SPECIAL_TOKENS, UNK};
