//! Entropy-based token weights and the token-level distillation losses.
//!
//! Student positions are weighted by normalized student entropy times the
//! teacher→student confidence gate (the row maximum of `p^{t→s}`); teacher
//! positions by one minus the normalized teacher entropy. Weights are
//! rescaled to sum to the number of response positions in their space and
//! are treated as constants by the backward pass.

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_row, ValueGrid};

/// Probabilities are clamped here before taking logs inside KL terms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Raw weight sums below this fall back to all-ones weights.
pub const ZERO_SUM: f64 = 1e-12;
const NEG_TOL: f64 = 1e-9;
const ROW_SUM_TOL: f64 = 1e-6;

/// `−Σ p log p` per row, natural log, `0·log 0 = 0`.
pub fn entropy_rows(p: &ValueGrid) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(p.rows());
    for (r, row) in p.rows_iter().enumerate() {
        let mut sum = 0.0;
        let mut h = 0.0;
        for (c, &v) in row.iter().enumerate() {
            if v < -NEG_TOL || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("invalid probability {v} at ({r}, {c})")));
            }
            sum += v;
            if v > 0.0 {
                h -= v * v.ln();
            }
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidArgument(format!("row {r} sums to {sum}, not 1")));
        }
        out.push(h);
    }
    Ok(out)
}

/// Entropy divided by `log V`, in `[0, 1]`.
pub fn normalized_entropy_rows(p: &ValueGrid) -> Result<Vec<f64>> {
    if p.cols() < 2 {
        return Err(Error::InvalidArgument("normalized entropy needs at least two classes".into()));
    }
    let log_v = (p.cols() as f64).ln();
    Ok(entropy_rows(p)?.into_iter().map(|h| h / log_v).collect())
}

/// Raw (pre-normalization) student weights with their ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentWeights {
    pub entropy: Vec<f64>,
    pub gate: Vec<f64>,
    pub raw: Vec<f64>,
}

/// `w_i = Ĥˢ_i · max_v p^{t→s}_{i,v}`; with `use_gate = false` the gate is
/// reported but not applied.
pub fn student_weights(p_student: &ValueGrid, p_ts: &ValueGrid, use_gate: bool) -> Result<StudentWeights> {
    if p_student.shape() != p_ts.shape() {
        return Err(Error::shape(
            "p_ts",
            format!("{:?}", p_student.shape()),
            format!("{:?}", p_ts.shape()),
        ));
    }
    let entropy = normalized_entropy_rows(p_student)?;
    entropy_rows(p_ts)?;
    let gate: Vec<f64> = p_ts
        .rows_iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let raw = entropy
        .iter()
        .zip(&gate)
        .map(|(h, g)| if use_gate { h * g } else { *h })
        .collect();
    Ok(StudentWeights { entropy, gate, raw })
}

/// `w_j = 1 − Hᵗ_j / log Vᵗ`, clamped into `[0, 1]` against rounding.
pub fn teacher_weights(p_teacher: &ValueGrid) -> Result<Vec<f64>> {
    Ok(normalized_entropy_rows(p_teacher)?
        .into_iter()
        .map(|h| (1.0 - h).clamp(0.0, 1.0))
        .collect())
}

/// Rescales `raw` to sum to `target_sum`; all ones if the raw sum is ~0.
pub fn normalize_weights(raw: &[f64], target_sum: usize) -> Result<Vec<f64>> {
    if let Some((i, v)) = raw.iter().enumerate().find(|(_, v)| **v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("raw weight {v} at position {i}")));
    }
    let sum: f64 = raw.iter().sum();
    if sum < ZERO_SUM {
        return Ok(vec![1.0; raw.len()]);
    }
    let k = target_sum as f64 / sum;
    Ok(raw.iter().map(|v| v * k).collect())
}

/// Normalizes over masked positions only; unmasked positions get weight 0.
pub fn normalize_masked(raw: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if raw.len() != mask.len() {
        return Err(Error::shape("weight mask", raw.len(), mask.len()));
    }
    let picked: Vec<f64> = raw.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
    let normed = normalize_weights(&picked, picked.len())?;
    let mut it = normed.into_iter();
    Ok(mask.iter().map(|&m| if m { it.next().unwrap_or(0.0) } else { 0.0 }).collect())
}

fn mask_count(mask: &[bool], what: &str) -> Result<usize> {
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::Empty(format!("{what} mask selects no positions")));
    }
    Ok(n)
}

/// Mean cross-entropy of `softmax(logits)` against `targets` over masked
/// rows, with its gradient.
pub fn masked_cross_entropy(logits: &ValueGrid, targets: &[usize], mask: &[bool]) -> Result<(f64, ValueGrid)> {
    let (rows, cols) = logits.shape();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::shape("cross-entropy targets", rows, targets.len().min(mask.len())));
    }
    let n = mask_count(mask, "cross-entropy")? as f64;
    let mut grad = ValueGrid::zeros(rows, cols);
    let mut loss = 0.0;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let y = targets[r];
        if y >= cols {
            return Err(Error::InvalidArgument(format!("target {y} out of range for {cols} classes")));
        }
        let lp = log_softmax_row(logits.row(r), 1.0);
        loss -= lp[y];
        let g = grad.row_mut(r);
        for (c, v) in g.iter_mut().enumerate() {
            *v = lp[c].exp() / n;
        }
        g[y] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// One `KL(q ‖ p)` with `q = softmax(ref_logits/τ)`, `p = softmax(logits/τ)`,
/// logs clamped at [`PROB_FLOOR`]. Returns the value and the gradients with
/// respect to both logit rows.
fn kl_row(ref_logits: &[f64], logits: &[f64], tau: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let v = logits.len();
    let floor = PROB_FLOOR.ln();
    let lq = log_softmax_row(ref_logits, tau);
    let lp = log_softmax_row(logits, tau);
    let q: Vec<f64> = lq.iter().map(|x| x.exp()).collect();
    let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
    let cq: Vec<f64> = lq.iter().map(|x| x.max(floor)).collect();
    let cp: Vec<f64> = lp.iter().map(|x| x.max(floor)).collect();
    let value: f64 = (0..v).map(|k| q[k] * (cq[k] - cp[k])).sum();

    // d/dz of −Σ q_k·cp_k where cp_k = log p_k unless clamped
    let live: f64 = (0..v).filter(|&k| lp[k] > floor).map(|k| q[k]).sum();
    let d_logits: Vec<f64> = (0..v)
        .map(|j| {
            let own = if lp[j] > floor { q[j] } else { 0.0 };
            (p[j] * live - own) / tau
        })
        .collect();

    // d/dq_k = cq_k − cp_k + 1[unclamped], then back through softmax(y/τ)
    let g: Vec<f64> = (0..v)
        .map(|k| cq[k] - cp[k] + if lq[k] > floor { 1.0 } else { 0.0 })
        .collect();
    let mean: f64 = (0..v).map(|k| q[k] * g[k]).sum();
    let d_ref: Vec<f64> = (0..v).map(|k| q[k] * (g[k] - mean) / tau).collect();
    (value, d_ref, d_logits)
}

/// Logit grids for one sequence in both spaces.
#[derive(Debug, Clone, Copy)]
pub struct KdInputs<'a> {
    /// Student logits `S × Vˢ`.
    pub student: &'a ValueGrid,
    /// Teacher-to-student logits `S × Vˢ`.
    pub teacher_to_student: &'a ValueGrid,
    /// Teacher logits `T × Vᵗ` (constant).
    pub teacher: &'a ValueGrid,
    /// Student-to-teacher logits `T × Vᵗ`.
    pub student_to_teacher: &'a ValueGrid,
    /// Gold next tokens in the student vocabulary.
    pub student_targets: &'a [usize],
    pub student_mask: &'a [bool],
    pub teacher_mask: &'a [bool],
    pub temperature: f64,
}

/// Loss values, per-position diagnostics and logit gradients.
#[derive(Debug, Clone)]
pub struct KdLosses {
    pub kd_student: f64,
    pub kd_teacher: f64,
    pub ce_teacher_to_student: f64,
    pub kl_student: Vec<f64>,
    pub kl_teacher: Vec<f64>,
    /// Gradient of the student-space KL term at the student logits.
    pub d_student: ValueGrid,
    /// Gradient of the student-space KL term at the teacher-to-student logits.
    pub d_teacher_to_student: ValueGrid,
    /// Gradient of the teacher-to-student cross-entropy at its logits.
    pub d_ce_teacher_to_student: ValueGrid,
    /// Gradient of the teacher-space KL term at the student-to-teacher logits.
    pub d_student_to_teacher: ValueGrid,
}

impl KdLosses {
    pub fn weighted_total(&self) -> f64 {
        self.kd_student + self.kd_teacher + self.ce_teacher_to_student
    }
}

/// Weighted KL in both spaces plus the teacher-to-student cross-entropy.
/// `student_weights`/`teacher_weights` must already be normalized.
pub fn weighted_kd_losses(x: &KdInputs, student_weights: &[f64], teacher_weights: &[f64]) -> Result<KdLosses> {
    let (s, vs) = x.student.shape();
    let (t, vt) = x.teacher.shape();
    if !(x.temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", x.temperature)));
    }
    for (name, g, shape) in [
        ("teacher_to_student logits", x.teacher_to_student, (s, vs)),
        ("student_to_teacher logits", x.student_to_teacher, (t, vt)),
    ] {
        if g.shape() != shape {
            return Err(Error::shape(name, format!("{shape:?}"), format!("{:?}", g.shape())));
        }
    }
    for (name, len, want) in [
        ("student weights", student_weights.len(), s),
        ("student mask", x.student_mask.len(), s),
        ("teacher weights", teacher_weights.len(), t),
        ("teacher mask", x.teacher_mask.len(), t),
    ] {
        if len != want {
            return Err(Error::shape(name, want, len));
        }
    }
    let ns = mask_count(x.student_mask, "student")? as f64;
    let nt = mask_count(x.teacher_mask, "teacher")? as f64;
    let tau = x.temperature;

    let mut d_student = ValueGrid::zeros(s, vs);
    let mut d_ts = ValueGrid::zeros(s, vs);
    let mut d_st = ValueGrid::zeros(t, vt);
    let mut kl_student = vec![0.0; s];
    let mut kl_teacher = vec![0.0; t];
    let mut kd_student = 0.0;
    let mut kd_teacher = 0.0;

    for i in 0..s {
        if !x.student_mask[i] {
            continue;
        }
        let (kl, d_ref, d_p) = kl_row(x.teacher_to_student.row(i), x.student.row(i), tau);
        kl_student[i] = kl;
        let w = student_weights[i];
        kd_student += w * kl;
        for (dst, v) in d_ts.row_mut(i).iter_mut().zip(&d_ref) {
            *dst += w * v / ns;
        }
        for (dst, v) in d_student.row_mut(i).iter_mut().zip(&d_p) {
            *dst += w * v / ns;
        }
    }
    for j in 0..t {
        if !x.teacher_mask[j] {
            continue;
        }
        let (kl, _, d_p) = kl_row(x.teacher.row(j), x.student_to_teacher.row(j), tau);
        kl_teacher[j] = kl;
        let w = teacher_weights[j];
        kd_teacher += w * kl;
        for (dst, v) in d_st.row_mut(j).iter_mut().zip(&d_p) {
            *dst += w * v / nt;
        }
    }
    let (ce_ts, d_ce) = masked_cross_entropy(x.teacher_to_student, x.student_targets, x.student_mask)?;

    Ok(KdLosses {
        kd_student: kd_student / ns,
        kd_teacher: kd_teacher / nt,
        ce_teacher_to_student: ce_ts,
        kl_student,
        kl_teacher,
        d_student,
        d_teacher_to_student: d_ts,
        d_ce_teacher_to_student: d_ce,
        d_student_to_teacher: d_st,
    })
}
