//! Seeded synthetic instruction→response corpus.
//!
//! Each prompt is `"<task> w1 w2 … wk ="` and its response is
//! `" r1 r2 …"`, so the full training text is `prompt + response` and the
//! response starts right after the prompt's last character. Tasks:
//!
//! | task  | response                         |
//! |-------|----------------------------------|
//! | copy  | the items in order               |
//! | rev   | the items reversed               |
//! | first | the first item                   |
//! | last  | the last item                    |
//! | dup   | every item written twice         |
//!
//! Items are drawn with replacement from the first `words` entries of
//! [`WORD_INVENTORY`]; prompts are unique across the whole corpus.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::train::config::CorpusConfig;

pub const CORPUS_VERSION: u32 = 1;

pub const WORD_INVENTORY: [&str; 24] = [
    "red", "blue", "cat", "dog", "sun", "moon", "tree", "fish", "bird", "star", "rock", "leaf", "milk",
    "rain", "wind", "gold", "corn", "frog", "lamp", "rope", "salt", "wolf", "kite", "bell",
];

pub const TASKS: [&str; 5] = ["copy", "rev", "first", "last", "dup"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: String,
    pub response: String,
}

impl Example {
    pub fn text(&self) -> String {
        format!("{}{}", self.prompt, self.response)
    }

    /// Reference answer as scored by ROUGE-L.
    pub fn reference(&self) -> &str {
        self.response.trim()
    }

    /// Length of the prompt in characters; text positions at or beyond it
    /// belong to the response.
    pub fn prompt_chars(&self) -> usize {
        self.prompt.chars().count()
    }
}

pub fn respond(task: &str, items: &[&str]) -> Result<String> {
    let out: Vec<&str> = match task {
        "copy" => items.to_vec(),
        "rev" => items.iter().rev().copied().collect(),
        "first" => items.first().into_iter().copied().collect(),
        "last" => items.last().into_iter().copied().collect(),
        "dup" => items.iter().flat_map(|w| [*w, *w]).collect(),
        other => return Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
    };
    Ok(out.iter().map(|w| format!(" {w}")).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Split sizes: `floor(n·train_fraction)`, `floor(n·valid_fraction)`, rest to test.
pub fn split_sizes(cfg: &CorpusConfig) -> (usize, usize, usize) {
    let n = cfg.examples;
    let train = (n as f64 * cfg.train_fraction).floor() as usize;
    let valid = (n as f64 * cfg.valid_fraction).floor() as usize;
    (train, valid, n - train - valid)
}

pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    if cfg.words > WORD_INVENTORY.len() {
        return Err(Error::InvalidArgument(format!(
            "corpus.words = {} exceeds the inventory of {}",
            cfg.words,
            WORD_INVENTORY.len()
        )));
    }
    let words = &WORD_INVENTORY[..cfg.words];
    let mut rng = Rng::new(seed).fork(0xC0);
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(cfg.examples);
    let budget = cfg.examples.saturating_mul(50).max(1000);
    for _ in 0..budget {
        if all.len() == cfg.examples {
            break;
        }
        let task = TASKS[rng.below(TASKS.len())];
        let k = cfg.min_items + rng.below(cfg.max_items - cfg.min_items + 1);
        let items: Vec<&str> = (0..k).map(|_| words[rng.below(words.len())]).collect();
        let prompt = format!("{task} {} =", items.join(" "));
        if !seen.insert(prompt.clone()) {
            continue;
        }
        let response = respond(task, &items)?;
        all.push(Example { prompt, response });
    }
    if all.len() < cfg.examples {
        return Err(Error::InvalidArgument(format!(
            "only {} distinct prompts available, {} requested",
            all.len(),
            cfg.examples
        )));
    }
    let (n_train, n_valid, _) = split_sizes(cfg);
    let test = all.split_off(n_train + n_valid);
    let valid = all.split_off(n_train);
    Ok(Corpus { train: all, valid, test })
}

pub fn examples_to_tsv(examples: &[Example]) -> String {
    examples.iter().map(|e| format!("{}\t{}\n", e.prompt, e.response)).collect()
}

pub fn examples_from_tsv(text: &str) -> Result<Vec<Example>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let (prompt, response) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("corpus", format!("line {} has no tab", i + 1)))?;
            Ok(Example {
                prompt: prompt.to_string(),
                response: response.to_string(),
            })
        })
        .collect()
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    examples_from_tsv(&std::fs::read_to_string(path)?)
}
