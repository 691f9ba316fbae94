//! ROUGE-L and representation-structure distances.

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, ValueGrid};
use crate::tokenizer::TokenSeq;

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure over whitespace tokens, `F = (1+β²)RP / (R + β²P)`.
/// An empty side scores 0.
pub fn rouge_l(candidate: &str, reference: &str, beta: f64) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * rec * p / (rec + b2 * p)
}

/// Character ranges `[start, end)` of the whitespace-separated words in `text`.
pub fn word_ranges(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.chars().enumerate() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, text.chars().count()));
    }
    out
}

/// Mean of the hidden rows of tokens whose span overlaps each word.
/// `hidden` row `k` belongs to token `k` of `seq`.
pub fn pool_words(hidden: &ValueGrid, seq: &TokenSeq, words: &[(usize, usize)]) -> Result<ValueGrid> {
    if hidden.rows() != seq.len() {
        return Err(Error::shape("pooled hidden rows", seq.len(), hidden.rows()));
    }
    let mut out = ValueGrid::zeros(words.len(), hidden.cols());
    for (w, &(ws, we)) in words.iter().enumerate() {
        let members: Vec<usize> = seq
            .spans
            .iter()
            .enumerate()
            .filter(|(_, &(s, e))| s.max(ws) < e.min(we))
            .map(|(k, _)| k)
            .collect();
        if members.is_empty() {
            return Err(Error::InvalidArgument(format!("word {w} has no covering token")));
        }
        let row = out.row_mut(w);
        for &k in &members {
            for (acc, v) in row.iter_mut().zip(hidden.row(k)) {
                *acc += v;
            }
        }
        for v in row.iter_mut() {
            *v /= members.len() as f64;
        }
    }
    Ok(out)
}

/// `M(i,j) = hᵢ·hⱼ / (‖hᵢ‖‖hⱼ‖)`.
pub fn cosine_structure(h: &ValueGrid) -> ValueGrid {
    let norms: Vec<f64> = h.rows_iter().map(norm).collect();
    ValueGrid::from_fn(h.rows(), h.rows(), |i, j| dot(h.row(i), h.row(j)) / (norms[i] * norms[j]))
}

/// `M(i,j) = hᵢ·hⱼ / Σ_k hᵢ·h_k`.
pub fn product_structure(h: &ValueGrid) -> ValueGrid {
    let gram = h.matmul_t(h).expect("square gram");
    let sums = gram.row_sums();
    ValueGrid::from_fn(h.rows(), h.rows(), |i, j| gram[(i, j)] / sums[i])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureDistance {
    pub cosine: f64,
    pub product: f64,
}

fn l1(a: &ValueGrid, b: &ValueGrid) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).sum()
}

/// L1 distances between the structure matrices of two word-aligned
/// hidden-state sequences (same number of rows, any widths).
pub fn structure_distance(student: &ValueGrid, teacher: &ValueGrid) -> Result<StructureDistance> {
    if student.rows() != teacher.rows() {
        return Err(Error::shape("structure positions", teacher.rows(), student.rows()));
    }
    if student.rows() < 2 {
        return Err(Error::InvalidArgument("structure distance needs at least two positions".into()));
    }
    Ok(StructureDistance {
        cosine: l1(&cosine_structure(student), &cosine_structure(teacher)),
        product: l1(&product_structure(student), &product_structure(teacher)),
    })
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", "a b c", 1.2), 1.0);
        assert_eq!(rouge_l("a b", "c d", 1.2), 0.0);
        assert_eq!(lcs_len(&["a", "b", "c", "d"], &["a", "c", "d", "e"]), 3);
        assert!((rouge_l("a b c d", "a c d e", 1.2) - 0.75).abs() < 1e-15);
        assert_eq!(rouge_l("", "a", 1.2), 0.0);
    }

    #[test]
    fn rouge_weights_recall_with_beta() {
        // P = 1, R = 1/2: F = (1+β²)·R·P / (R + β²·P)
        let f = rouge_l("a", "a b", 1.2);
        let want = (1.0 + 1.44) * 0.5 / (0.5 + 1.44);
        assert!((f - want).abs() < 1e-15);
    }

    #[test]
    fn word_ranges_and_pooling() {
        assert_eq!(word_ranges("ab  c d"), vec![(0, 2), (4, 5), (6, 7)]);
        let seq = TokenSeq {
            ids: vec![1, 5, 6, 7, 2],
            spans: vec![(0, 0), (0, 1), (1, 2), (2, 4), (4, 4)],
            vocab_size: 8,
        };
        let h = ValueGrid::from_fn(5, 2, |r, c| (r * 2 + c) as f64);
        let p = pool_words(&h, &seq, &word_ranges("ab c")).unwrap();
        assert_eq!(p.row(0), &[3.0, 4.0]);
        assert_eq!(p.row(1), &[6.0, 7.0]);
    }

    #[test]
    fn identical_states_have_zero_distance() {
        let h = Rng::new(1).normal_grid(5, 4, 1.0);
        let d = structure_distance(&h, &h).unwrap();
        assert_eq!((d.cosine, d.product), (0.0, 0.0));
        let m = cosine_structure(&h);
        for i in 0..5 {
            assert!((m[(i, i)] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn three_positions_match_scalar_recomputation() {
        let mut rng = Rng::new(2);
        let s = rng.normal_grid(3, 2, 1.0);
        let t = rng.normal_grid(3, 5, 1.0);
        let d = structure_distance(&s, &t).unwrap();
        let cos = |h: &ValueGrid, i: usize, j: usize| {
            let (a, b) = (h.row(i), h.row(j));
            let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            ab / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let prod = |h: &ValueGrid, i: usize, j: usize| {
            let ip = |a: usize, b: usize| h.row(a).iter().zip(h.row(b)).map(|(x, y)| x * y).sum::<f64>();
            ip(i, j) / (0..3).map(|k| ip(i, k)).sum::<f64>()
        };
        let (mut dc, mut dp) = (0.0, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                dc += (cos(&s, i, j) - cos(&t, i, j)).abs();
                dp += (prod(&s, i, j) - prod(&t, i, j)).abs();
            }
        }
        assert!((d.cosine - dc).abs() < 1e-10);
        assert!((d.product - dp).abs() < 1e-10);
    }

    #[test]
    fn too_few_positions() {
        let h = ValueGrid::filled(1, 3, 1.0);
        assert!(structure_distance(&h, &h).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
