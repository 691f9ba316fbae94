use ctkd_core::tokenizer::{CharTokenizer, PairTokenizer};
use ctkd_core::train::corpus::generate_corpus;
use ctkd_core::train::Config;
use proptest::prelude::*;

fn default_corpus_texts() -> Vec<String> {
    let cfg = Config::default();
    generate_corpus(&cfg.corpus, cfg.seed).unwrap().train.iter().map(|e| e.text()).collect()
}

#[test]
fn default_merges_shorten_the_corpus() {
    let cfg = Config::default();
    let texts = default_corpus_texts();
    let stok = CharTokenizer::from_corpus(&texts).unwrap();
    let ttok = PairTokenizer::train(&texts, cfg.tokenizer.merges).unwrap();
    assert_eq!(ttok.merges().len(), cfg.tokenizer.merges);
    let (mut s, mut t) = (0usize, 0usize);
    for text in &texts {
        let (sl, tl) = (stok.encode(text).unwrap().len(), ttok.encode(text).unwrap().len());
        assert!(tl <= sl);
        s += sl;
        t += tl;
    }
    assert!((t as f64) / (s as f64) < 0.85, "ratio {}", t as f64 / s as f64);
    assert_ne!(stok.vocab().len(), ttok.vocab().len());
}

#[test]
fn merge_training_is_reproducible() {
    let texts = default_corpus_texts();
    let a = PairTokenizer::train(&texts, 24).unwrap();
    let b = PairTokenizer::train(&texts, 24).unwrap();
    assert_eq!(a.merges_to_text(), b.merges_to_text());
    assert_eq!(a.vocab(), b.vocab());
}

proptest! {
    #[test]
    fn pair_encoding_round_trips_and_never_lengthens(
        texts in proptest::collection::vec("[a-d ]{1,24}", 1..8),
        merges in 0usize..12,
    ) {
        let stok = CharTokenizer::from_corpus(&texts).unwrap();
        let ttok = PairTokenizer::train(&texts, merges.max(1)).unwrap();
        for text in &texts {
            let chars = stok.encode(text).unwrap();
            let pairs = ttok.encode(text).unwrap();
            prop_assert!(pairs.len() <= chars.len());
            prop_assert_eq!(ttok.decode(&pairs.ids), text.clone());
            prop_assert_eq!(stok.decode(&chars.ids), text.clone());
        }
    }
}
