use crate::error::{Error, Result};
use crate::lm::TransformerLm;
use crate::numerics::{softmax_into, Rng};
use crate::tokenizer::EOS;

/// Keeps the smallest set of most-probable tokens whose mass reaches
/// `top_p` (at least one token); everything else is zeroed. Ties are
/// ordered by token id.
pub fn nucleus_filter(probs: &[f64], top_p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &k in &order {
        kept[k] = probs[k];
        mass += probs[k];
        if mass >= top_p {
            break;
        }
    }
    kept
}

/// Ancestral sampling with temperature and nucleus filtering. Returns the
/// prompt followed by the sampled tokens; stops after `eos`, after
/// `max_new` tokens, or when the context is full.
pub fn generate(
    model: &TransformerLm,
    prompt: &[usize],
    max_new: usize,
    rng: &mut Rng,
    temperature: f64,
    top_p: f64,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Empty("generation prompt".into()));
    }
    if prompt.len() >= model.config().context {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + 1,
            context: model.config().context,
        });
    }
    if !(temperature > 0.0) || !(top_p > 0.0) {
        return Err(Error::InvalidArgument("temperature and top_p must be positive".into()));
    }
    let mut ids = prompt.to_vec();
    let mut probs = vec![0.0; model.vocab_size()];
    for _ in 0..max_new {
        if ids.len() >= model.config().context {
            break;
        }
        let trace = model.forward(&ids)?;
        softmax_into(trace.logits.row(ids.len() - 1), temperature, &mut probs);
        let next = rng.categorical(&nucleus_filter(&probs, top_p));
        ids.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;

    fn model() -> TransformerLm {
        TransformerLm::new(LmConfig {
            vocab_size: 6,
            width: 8,
            layers: 1,
            heads: 2,
            context: 12,
            seed: 5,
            init_std: 0.8,
            embeddings_include_positions: false,
        })
        .unwrap()
    }

    #[test]
    fn nucleus_keeps_mode_for_tiny_p() {
        assert_eq!(nucleus_filter(&[0.1, 0.6, 0.3], 1e-9), vec![0.0, 0.6, 0.0]);
        assert_eq!(nucleus_filter(&[0.1, 0.6, 0.3], 0.8), vec![0.0, 0.6, 0.3]);
        assert_eq!(nucleus_filter(&[0.5, 0.5], 1.0), vec![0.5, 0.5]);
    }

    #[test]
    fn tiny_top_p_is_greedy() {
        let m = model();
        let prompt = [1, 4, 5];
        let mut rng = Rng::new(0);
        let out = generate(&m, &prompt, 5, &mut rng, 1.0, 1e-9).unwrap();
        let mut ids = prompt.to_vec();
        for &next in &out[3..] {
            let t = m.forward(&ids).unwrap();
            let row = t.logits.row(ids.len() - 1);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
            assert_eq!(next, argmax);
            ids.push(next);
        }
    }

    #[test]
    fn same_seed_same_continuation() {
        let m = model();
        let a = generate(&m, &[1, 3], 8, &mut Rng::new(9), 1.0, 1.0).unwrap();
        let b = generate(&m, &[1, 3], 8, &mut Rng::new(9), 1.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_next_token_matches_softmax() {
        let m = model();
        let prompt = [1, 4, 3];
        let t = m.forward(&prompt).unwrap();
        let mut exact = vec![0.0; 6];
        softmax_into(t.logits.row(2), 1.0, &mut exact);
        let mut counts = vec![0usize; 6];
        let mut rng = Rng::new(77);
        let n = 10_000;
        for _ in 0..n {
            let out = generate(&m, &prompt, 1, &mut rng, 1.0, 1.0).unwrap();
            counts[out[3]] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&exact)
            .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn prompt_must_leave_room() {
        let m = model();
        assert!(generate(&m, &[1; 12], 1, &mut Rng::new(0), 1.0, 1.0).is_err());
    }
}
