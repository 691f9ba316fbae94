//! Sampling-based ROUGE-L evaluation and the structure-distance study.

use crate::error::{Error, Result};
use crate::lm::{generate, TransformerLm};
use crate::numerics::Rng;
use crate::tokenizer::{CharTokenizer, PairTokenizer};
use crate::train::config::EvalConfig;
use crate::train::corpus::Example;
use crate::train::metrics::{pool_words, rouge_l, structure_distance, word_ranges, StructureDistance};

/// Samples a response to `example.prompt` and returns it trimmed.
pub fn generate_response(
    model: &TransformerLm,
    tokenizer: &CharTokenizer,
    example: &Example,
    rng: &mut Rng,
    cfg: &EvalConfig,
) -> Result<String> {
    let mut prompt = tokenizer.encode(&example.prompt)?.ids;
    prompt.pop(); // drop eos
    let ids = generate(model, &prompt, cfg.max_new_tokens, rng, cfg.temperature, cfg.top_p)?;
    Ok(tokenizer.decode(&ids[prompt.len()..]).trim().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub seed: u64,
    pub index: usize,
    pub rouge_l: f64,
    pub candidate: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// `(seed, mean ROUGE-L)` in seed order.
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("seed,index,rouge_l,candidate\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:?},{:?}\n", r.seed, r.index, r.rouge_l, r.candidate));
        }
        out
    }
}

/// FNV-1a, used to key each example's sampling stream by its prompt.
pub fn prompt_key(prompt: &str) -> u64 {
    prompt.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Scores up to `cfg.max_examples` examples once per seed. An example under
/// seed `s` samples from `Rng::new(s).fork(prompt_key(prompt))`, so its
/// score does not depend on where it sits in the evaluation set.
pub fn evaluate(
    model: &TransformerLm,
    tokenizer: &CharTokenizer,
    examples: &[Example],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let n = if cfg.max_examples == 0 {
        examples.len()
    } else {
        cfg.max_examples.min(examples.len())
    };
    if n == 0 {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut rows = Vec::with_capacity(n * cfg.seeds.len());
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let base = Rng::new(seed);
        let mut sum = 0.0;
        for (index, ex) in examples[..n].iter().enumerate() {
            let candidate = generate_response(model, tokenizer, ex, &mut base.fork(prompt_key(&ex.prompt)), cfg)?;
            let score = rouge_l(&candidate, ex.reference(), cfg.rouge_beta);
            sum += score;
            rows.push(EvalRow {
                seed,
                index,
                rouge_l: score,
                candidate,
            });
        }
        per_seed.push((seed, sum / n as f64));
    }
    let mean = per_seed.iter().map(|(_, m)| m).sum::<f64>() / per_seed.len() as f64;
    Ok(EvalReport { rows, per_seed, mean })
}

/// Word-pooled structure distance between student and teacher on one text.
pub fn text_structure_distance(
    student: &TransformerLm,
    student_tok: &CharTokenizer,
    teacher: &TransformerLm,
    teacher_tok: &PairTokenizer,
    text: &str,
) -> Result<StructureDistance> {
    let words = word_ranges(text);
    let s = student_tok.encode(text)?;
    let t = teacher_tok.encode(text)?;
    let hs = pool_words(&student.forward(&s.ids)?.hidden, &s, &words)?;
    let ht = pool_words(&teacher.forward(&t.ids)?.hidden, &t, &words)?;
    structure_distance(&hs, &ht)
}

/// Distances for the full texts of up to `limit` examples.
pub fn structure_study(
    student: &TransformerLm,
    student_tok: &CharTokenizer,
    teacher: &TransformerLm,
    teacher_tok: &PairTokenizer,
    examples: &[Example],
    limit: usize,
) -> Result<Vec<StructureDistance>> {
    examples
        .iter()
        .take(limit)
        .map(|ex| text_structure_distance(student, student_tok, teacher, teacher_tok, &ex.text()))
        .collect()
}
