//! Cross-model attention (CMA) between a student and a teacher sequence,
//! and the linear projectors that move representations between the two
//! hidden spaces.
//!
//! With student width `d_S` and teacher width `d_T`:
//!
//! ```text
//! Q   = [E_in ‖ E_tgt] · P_q                       S × 2d_T
//! K   = [N(Et_in) ‖ N(Et_tgt)]                     T × 2d_T
//! V   = (N(Et_tgt) + N(H_t)) · P_v                 T × d_S
//! A   = softmax_rows(Q Kᵀ / √(2d_T))               S × T
//! a   = softmax_rows(K Qᵀ / √(2d_T))               T × S
//! h̃ᵗˢ = A V                                        S × d_S  → student head
//! h̃ˢᵗ = a (H_s P_st)                               T × d_T  → teacher head
//! Ẽᵗ = Et W_eᵀ,  H̃ᵗ = H_t W_hᵀ                      T × d_S
//! ```
//!
//! `N(x)` divides each row by its standard deviation plus [`NORM_EPS`].
//! Teacher-side inputs are constants; gradients flow to the student inputs,
//! the student head and every projector.

use crate::error::{Error, Result};
use crate::lm::Checkpoint;
use crate::numerics::{softmax_rows, Rng, ValueGrid};

pub const NORM_EPS: f64 = 1e-6;
pub const PROJECTOR_PREFIX: &str = "projector/";

/// Trainable projectors. Every matrix is applied as `x · P` except
/// `w_e`/`w_h`, which are stored `d_S × d_T` and applied as `x · Wᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorSet {
    pub w_e: ValueGrid,
    pub w_h: ValueGrid,
    /// `2d_S × 2d_T`
    pub p_q: ValueGrid,
    /// `d_T × d_S`
    pub p_v: ValueGrid,
    /// `d_S × d_T`
    pub p_st: ValueGrid,
}

impl ProjectorSet {
    /// Gaussian init with standard deviation `1/√fan_in`.
    pub fn new(student_width: usize, teacher_width: usize, rng: &mut Rng) -> Result<Self> {
        if student_width == 0 || teacher_width == 0 {
            return Err(Error::InvalidArgument("projector widths must be positive".into()));
        }
        let (ds, dt) = (student_width, teacher_width);
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            w_e: rng.normal_grid(ds, dt, std(dt)),
            w_h: rng.normal_grid(ds, dt, std(dt)),
            p_q: rng.normal_grid(2 * ds, 2 * dt, std(2 * ds)),
            p_v: rng.normal_grid(dt, ds, std(dt)),
            p_st: rng.normal_grid(ds, dt, std(ds)),
        })
    }

    pub fn student_width(&self) -> usize {
        self.w_e.rows()
    }

    pub fn teacher_width(&self) -> usize {
        self.w_e.cols()
    }

    /// Copy whose hidden-state alignment projector is `P_vᵀ`.
    pub fn with_tied_hidden(&self) -> Self {
        Self {
            w_h: self.p_v.transpose(),
            ..self.clone()
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_e: ValueGrid::zeros(self.w_e.rows(), self.w_e.cols()),
            w_h: ValueGrid::zeros(self.w_h.rows(), self.w_h.cols()),
            p_q: ValueGrid::zeros(self.p_q.rows(), self.p_q.cols()),
            p_v: ValueGrid::zeros(self.p_v.rows(), self.p_v.cols()),
            p_st: ValueGrid::zeros(self.p_st.rows(), self.p_st.cols()),
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &ValueGrid)> {
        vec![
            ("w_e", &self.w_e),
            ("w_h", &self.w_h),
            ("p_q", &self.p_q),
            ("p_v", &self.p_v),
            ("p_st", &self.p_st),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ValueGrid> {
        vec![&mut self.w_e, &mut self.w_h, &mut self.p_q, &mut self.p_v, &mut self.p_st]
    }

    pub fn add_assign(&mut self, other: &ProjectorSet) -> Result<()> {
        let others: Vec<ValueGrid> = other.named_tensors().into_iter().map(|(_, g)| g.clone()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(&others) {
            dst.add_assign(src)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.scale(alpha);
        }
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        for (name, t) in self.named_tensors() {
            ck.push(format!("{PROJECTOR_PREFIX}{name}"), t.clone());
        }
    }

    pub fn from_checkpoint(student_width: usize, teacher_width: usize, ck: &Checkpoint) -> Result<Self> {
        let mut out = Self::new(student_width, teacher_width, &mut Rng::new(0))?;
        let names: Vec<&str> = out.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, dst) in names.into_iter().zip(out.tensors_mut()) {
            let src = ck.get(&format!("{PROJECTOR_PREFIX}{name}"))?;
            if src.shape() != dst.shape() {
                return Err(Error::shape(
                    format!("{PROJECTOR_PREFIX}{name}"),
                    format!("{:?}", dst.shape()),
                    format!("{:?}", src.shape()),
                ));
            }
            *dst = src.clone();
        }
        Ok(out)
    }
}

/// Row-wise `x / (std(x) + ε)` with the population standard deviation.
pub fn normalize_rows(x: &ValueGrid) -> ValueGrid {
    let mut out = x.clone();
    let d = x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let s = var.sqrt() + NORM_EPS;
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Sequences entering the attention. Rows of the student grids are the
/// `S` model input positions; `*_targets` hold the embeddings of the tokens
/// each position predicts.
#[derive(Debug, Clone, Copy)]
pub struct CmaInputs<'a> {
    pub student_inputs: &'a ValueGrid,
    pub student_targets: &'a ValueGrid,
    pub student_hidden: &'a ValueGrid,
    pub teacher_inputs: &'a ValueGrid,
    pub teacher_targets: &'a ValueGrid,
    pub teacher_hidden: &'a ValueGrid,
}

impl CmaInputs<'_> {
    fn check(&self, proj: &ProjectorSet) -> Result<(usize, usize)> {
        let s = self.student_inputs.rows();
        let t = self.teacher_inputs.rows();
        if s == 0 || t == 0 {
            return Err(Error::Empty(format!("cross-model attention with S={s}, T={t}")));
        }
        let (ds, dt) = (proj.student_width(), proj.teacher_width());
        for (name, g, rows, cols) in [
            ("student_inputs", self.student_inputs, s, ds),
            ("student_targets", self.student_targets, s, ds),
            ("student_hidden", self.student_hidden, s, ds),
            ("teacher_inputs", self.teacher_inputs, t, dt),
            ("teacher_targets", self.teacher_targets, t, dt),
            ("teacher_hidden", self.teacher_hidden, t, dt),
        ] {
            if g.shape() != (rows, cols) {
                return Err(Error::shape(name, format!("{:?}", (rows, cols)), format!("{:?}", g.shape())));
            }
        }
        Ok((s, t))
    }
}

/// Forward state of one CMA evaluation.
#[derive(Debug, Clone)]
pub struct CmaTrace {
    /// Teacher→student alignment, `S × T`, rows sum to 1.
    pub attention: ValueGrid,
    /// Student→teacher alignment, `T × S`, rows sum to 1.
    pub attention_st: ValueGrid,
    /// `h̃ᵗˢ`, `S × d_S`.
    pub aligned_ts: ValueGrid,
    /// `h̃ˢᵗ`, `T × d_T`.
    pub aligned_st: ValueGrid,
    q_in: ValueGrid,
    k: ValueGrid,
    v_in: ValueGrid,
    v: ValueGrid,
    st_in: ValueGrid,
    student_hidden: ValueGrid,
    scale: f64,
}

pub fn build_cma(inputs: &CmaInputs, proj: &ProjectorSet) -> Result<CmaTrace> {
    inputs.check(proj)?;
    let q_in = inputs.student_inputs.hconcat(inputs.student_targets)?;
    let q = q_in.matmul(&proj.p_q)?;
    let k = normalize_rows(inputs.teacher_inputs).hconcat(&normalize_rows(inputs.teacher_targets))?;
    let mut v_in = normalize_rows(inputs.teacher_targets);
    v_in.add_assign(&normalize_rows(inputs.teacher_hidden))?;
    let v = v_in.matmul(&proj.p_v)?;
    let scale = 1.0 / (2.0 * proj.teacher_width() as f64).sqrt();
    let scores = q.matmul_t(&k)?.scaled(scale);
    let attention = softmax_rows(&scores, 1.0)?;
    let attention_st = softmax_rows(&scores.transpose(), 1.0)?;
    let aligned_ts = attention.matmul(&v)?;
    let st_in = inputs.student_hidden.matmul(&proj.p_st)?;
    let aligned_st = attention_st.matmul(&st_in)?;
    Ok(CmaTrace {
        attention,
        attention_st,
        aligned_ts,
        aligned_st,
        q_in,
        k,
        v_in,
        v,
        st_in,
        student_hidden: inputs.student_hidden.clone(),
        scale,
    })
}

/// Logits of the two cross-space distributions: `h̃ᵗˢ` through the student
/// head and `h̃ˢᵗ` through the (frozen) teacher head.
pub fn project_dual(
    trace: &CmaTrace,
    student_head: &ValueGrid,
    teacher_head: &ValueGrid,
) -> Result<(ValueGrid, ValueGrid)> {
    if student_head.rows() != trace.aligned_ts.cols() {
        return Err(Error::shape("student head", trace.aligned_ts.cols(), student_head.rows()));
    }
    if teacher_head.rows() != trace.aligned_st.cols() {
        return Err(Error::shape("teacher head", trace.aligned_st.cols(), teacher_head.rows()));
    }
    Ok((trace.aligned_ts.matmul(student_head)?, trace.aligned_st.matmul(teacher_head)?))
}

/// Gradients produced by [`cma_backward`]. The teacher head gets none.
#[derive(Debug, Clone)]
pub struct CmaGrads {
    pub projectors: ProjectorSet,
    pub student_inputs: ValueGrid,
    pub student_targets: ValueGrid,
    pub student_hidden: ValueGrid,
    pub student_head: ValueGrid,
}

fn softmax_rows_backward(y: &ValueGrid, dy: &ValueGrid) -> ValueGrid {
    let mut dx = ValueGrid::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dr = dy.row(r);
        let inner: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = yr[c] * (dr[c] - inner);
        }
    }
    dx
}

/// Back-propagates gradients at the two cross-space logit grids.
pub fn cma_backward(
    trace: &CmaTrace,
    proj: &ProjectorSet,
    student_head: &ValueGrid,
    teacher_head: &ValueGrid,
    d_logits_ts: &ValueGrid,
    d_logits_st: &ValueGrid,
) -> Result<CmaGrads> {
    let (s, t) = trace.attention.shape();
    if d_logits_ts.shape() != (s, student_head.cols()) {
        return Err(Error::shape(
            "d_logits_ts",
            format!("{:?}", (s, student_head.cols())),
            format!("{:?}", d_logits_ts.shape()),
        ));
    }
    if d_logits_st.shape() != (t, teacher_head.cols()) {
        return Err(Error::shape(
            "d_logits_st",
            format!("{:?}", (t, teacher_head.cols())),
            format!("{:?}", d_logits_st.shape()),
        ));
    }
    let ds = proj.student_width();
    let mut grads = proj.zeros_like();

    let student_head_grad = trace.aligned_ts.t_matmul(d_logits_ts)?;
    let d_ts = d_logits_ts.matmul_t(student_head)?;
    let d_st = d_logits_st.matmul_t(teacher_head)?;

    // h̃ᵗˢ = A V
    let d_attention = d_ts.matmul_t(&trace.v)?;
    let d_v = trace.attention.t_matmul(&d_ts)?;
    grads.p_v = trace.v_in.t_matmul(&d_v)?;

    // h̃ˢᵗ = a (H_s P_st)
    let d_attention_st = d_st.matmul_t(&trace.st_in)?;
    let d_st_in = trace.attention_st.t_matmul(&d_st)?;
    grads.p_st = trace.student_hidden.t_matmul(&d_st_in)?;
    let d_student_hidden = d_st_in.matmul_t(&proj.p_st)?;

    // both alignments share the score matrix M = Q Kᵀ · scale
    let mut d_scores = softmax_rows_backward(&trace.attention, &d_attention);
    d_scores.add_assign(&softmax_rows_backward(&trace.attention_st, &d_attention_st).transpose())?;
    d_scores.scale(trace.scale);
    let d_q = d_scores.matmul(&trace.k)?;
    grads.p_q = trace.q_in.t_matmul(&d_q)?;
    let d_q_in = d_q.matmul_t(&proj.p_q)?;

    Ok(CmaGrads {
        projectors: grads,
        student_inputs: d_q_in.slice_cols(0, ds),
        student_targets: d_q_in.slice_cols(ds, 2 * ds),
        student_hidden: d_student_hidden,
        student_head: student_head_grad,
    })
}

/// `(Ẽᵗ, H̃ᵗ) = (Et W_eᵀ, H_t W_hᵀ)`, both `T × d_S`.
pub fn project_teacher_reprs(
    teacher_embeddings: &ValueGrid,
    teacher_hidden: &ValueGrid,
    proj: &ProjectorSet,
) -> Result<(ValueGrid, ValueGrid)> {
    Ok((
        teacher_embeddings.matmul_t(&proj.w_e)?,
        teacher_hidden.matmul_t(&proj.w_h)?,
    ))
}

/// Gradients of `W_e` and `W_h` given upstream gradients at `Ẽᵗ` and `H̃ᵗ`.
pub fn project_teacher_reprs_backward(
    teacher_embeddings: &ValueGrid,
    teacher_hidden: &ValueGrid,
    d_embeddings: &ValueGrid,
    d_hidden: &ValueGrid,
) -> Result<(ValueGrid, ValueGrid)> {
    Ok((
        d_embeddings.t_matmul(teacher_embeddings)?,
        d_hidden.t_matmul(teacher_hidden)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    struct Fixture {
        si: ValueGrid,
        st: ValueGrid,
        sh: ValueGrid,
        ti: ValueGrid,
        tt: ValueGrid,
        th: ValueGrid,
        proj: ProjectorSet,
        s_head: ValueGrid,
        t_head: ValueGrid,
    }

    fn fixture(seed: u64, s: usize, t: usize) -> Fixture {
        let (ds, dt, vs, vt) = (3, 4, 5, 6);
        let mut rng = Rng::new(seed);
        Fixture {
            si: rng.normal_grid(s, ds, 1.0),
            st: rng.normal_grid(s, ds, 1.0),
            sh: rng.normal_grid(s, ds, 1.0),
            ti: rng.normal_grid(t, dt, 1.0),
            tt: rng.normal_grid(t, dt, 1.0),
            th: rng.normal_grid(t, dt, 1.0),
            proj: ProjectorSet::new(ds, dt, &mut rng).unwrap(),
            s_head: rng.normal_grid(ds, vs, 1.0),
            t_head: rng.normal_grid(dt, vt, 1.0),
        }
    }

    impl Fixture {
        fn inputs(&self) -> CmaInputs<'_> {
            CmaInputs {
                student_inputs: &self.si,
                student_targets: &self.st,
                student_hidden: &self.sh,
                teacher_inputs: &self.ti,
                teacher_targets: &self.tt,
                teacher_hidden: &self.th,
            }
        }

        /// Scalar test objective: weighted sums of both logit grids.
        fn objective(&self, w_ts: &ValueGrid, w_st: &ValueGrid) -> f64 {
            let tr = build_cma(&self.inputs(), &self.proj).unwrap();
            let (a, b) = project_dual(&tr, &self.s_head, &self.t_head).unwrap();
            dot_grid(&a, w_ts) + dot_grid(&b, w_st)
        }
    }

    fn dot_grid(a: &ValueGrid, b: &ValueGrid) -> f64 {
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn attention_rows_are_stochastic() {
        for seed in 0..100 {
            let f = fixture(seed, 1 + (seed as usize % 5), 1 + (seed as usize % 4));
            let tr = build_cma(&f.inputs(), &f.proj).unwrap();
            for r in tr.attention.row_sums().into_iter().chain(tr.attention_st.row_sums()) {
                assert!((r - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_query_gives_uniform_rows() {
        let mut f = fixture(1, 3, 4);
        f.proj.p_q.fill(0.0);
        let tr = build_cma(&f.inputs(), &f.proj).unwrap();
        for v in tr.attention.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_positions() {
        let f = fixture(2, 1, 1);
        let tr = build_cma(&f.inputs(), &f.proj).unwrap();
        assert_eq!(tr.attention.as_slice(), &[1.0]);
        assert_eq!(tr.attention_st.as_slice(), &[1.0]);
    }

    #[test]
    fn empty_sequences_rejected() {
        let f = fixture(3, 2, 2);
        let empty = ValueGrid::zeros(0, 4);
        let mut inputs = f.inputs();
        inputs.teacher_inputs = &empty;
        assert!(matches!(build_cma(&inputs, &f.proj), Err(Error::Empty(_))));
    }

    #[test]
    fn identity_attention_copies_values() {
        let f = fixture(4, 3, 3);
        let mut tr = build_cma(&f.inputs(), &f.proj).unwrap();
        tr.attention = ValueGrid::identity(3);
        let mixed = tr.attention.matmul(&tr.v).unwrap();
        assert_eq!(mixed, tr.v);
    }

    #[test]
    fn teacher_projection_contracts() {
        let mut rng = Rng::new(5);
        let e = rng.normal_grid(4, 3, 1.0);
        let h = rng.normal_grid(4, 3, 1.0);
        let mut proj = ProjectorSet::new(3, 3, &mut rng).unwrap();
        proj.w_e = ValueGrid::identity(3);
        proj.w_h.fill(0.0);
        let (pe, ph) = project_teacher_reprs(&e, &h, &proj).unwrap();
        assert_eq!(pe, e);
        assert_eq!(ph, ValueGrid::zeros(4, 3));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let f = fixture(10 + seed, 4, 3);
            let mut rng = Rng::new(99 + seed);
            let w_ts = rng.normal_grid(4, 5, 1.0);
            let w_st = rng.normal_grid(3, 6, 1.0);
            let tr = build_cma(&f.inputs(), &f.proj).unwrap();
            let g = cma_backward(&tr, &f.proj, &f.s_head, &f.t_head, &w_ts, &w_st).unwrap();

            let check = |analytic: &ValueGrid, numeric: ValueGrid, name: &str| {
                let err = max_relative_error(analytic, &numeric).unwrap();
                assert!(err < 1e-4, "{name}: {err}");
            };
            macro_rules! fd {
                ($field:ident, $target:expr, $name:expr) => {{
                    let n = finite_diff_grad(
                        |x| {
                            let mut f2 = Fixture { $field: x.clone(), ..fixture(10 + seed, 4, 3) };
                            f2.proj = f.proj.clone();
                            f2.objective(&w_ts, &w_st)
                        },
                        &f.$field,
                        1e-5,
                    )
                    .unwrap();
                    check($target, n, $name);
                }};
            }
            fd!(si, &g.student_inputs, "student_inputs");
            fd!(st, &g.student_targets, "student_targets");
            fd!(sh, &g.student_hidden, "student_hidden");
            fd!(s_head, &g.student_head, "student_head");

            for (idx, name) in ["p_q", "p_v", "p_st"].into_iter().enumerate() {
                let base = f.proj.named_tensors()[idx + 2].1.clone();
                let n = finite_diff_grad(
                    |x| {
                        let mut f2 = fixture(10 + seed, 4, 3);
                        f2.proj = f.proj.clone();
                        *f2.proj.tensors_mut().remove(idx + 2) = x.clone();
                        f2.objective(&w_ts, &w_st)
                    },
                    &base,
                    1e-5,
                )
                .unwrap();
                check(g.projectors.named_tensors()[idx + 2].1, n, name);
            }
        }
    }

    #[test]
    fn teacher_head_is_not_updated() {
        let f = fixture(20, 3, 3);
        let tr = build_cma(&f.inputs(), &f.proj).unwrap();
        let g = cma_backward(&tr, &f.proj, &f.s_head, &f.t_head, &ValueGrid::filled(3, 5, 1.0), &ValueGrid::filled(3, 6, 1.0)).unwrap();
        assert!(g.student_hidden.max_abs() > 0.0);
        // CmaGrads carries no teacher-head field; the head is only read.
        assert_eq!(f.t_head, fixture(20, 3, 3).t_head);
    }

    #[test]
    fn teacher_projection_backward() {
        let mut rng = Rng::new(30);
        let e = rng.normal_grid(3, 4, 1.0);
        let h = rng.normal_grid(3, 4, 1.0);
        let proj = ProjectorSet::new(2, 4, &mut rng).unwrap();
        let w1 = rng.normal_grid(3, 2, 1.0);
        let w2 = rng.normal_grid(3, 2, 1.0);
        let (ge, gh) = project_teacher_reprs_backward(&e, &h, &w1, &w2).unwrap();
        let n = finite_diff_grad(
            |w| dot_grid(&e.matmul_t(w).unwrap(), &w1),
            &proj.w_e,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&ge, &n).unwrap() < 1e-6);
        let n = finite_diff_grad(|w| dot_grid(&h.matmul_t(w).unwrap(), &w2), &proj.w_h, 1e-5).unwrap();
        assert!(max_relative_error(&gh, &n).unwrap() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip() {
        let proj = ProjectorSet::new(3, 5, &mut Rng::new(4)).unwrap();
        let mut ck = Checkpoint::new(serde_json::Value::Null);
        proj.to_checkpoint(&mut ck);
        let back = ProjectorSet::from_checkpoint(3, 5, &ck).unwrap();
        assert_eq!(back, proj);
        assert!(ProjectorSet::from_checkpoint(3, 4, &ck).is_err());
    }
}
