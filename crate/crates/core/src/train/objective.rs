//! Per-sequence distillation objective and its analytic gradient.
//!
//! ```text
//! total = λ_CE·CE + λ_WKD·(KDˢᵗᵘ + KDᵗᵉᵃ + CEᵗˢ) + λ_DTW·(nDTW_E + nDTW_H)
//! ```
//!
//! Every term has its own coefficient in [`Coefficients`] so that each can
//! be isolated for gradient checks. Terms with a zero coefficient are not
//! evaluated at all; with only `CE` active the teacher is never touched.

use serde::{Deserialize, Serialize};

use crate::cma::{build_cma, cma_backward, project_dual, project_teacher_reprs, project_teacher_reprs_backward};
use crate::cma::{CmaInputs, ProjectorSet};
use crate::error::{Error, Result};
use crate::lm::{accumulate_token_embedding_grad, LmParams, TransformerLm};
use crate::numerics::{softmax_rows, ValueGrid};
use crate::softdtw::{build_band, dtw_loss_with_band, BandParams, BandSpec};
use crate::tokenizer::{CharTokenizer, PairTokenizer, TokenSeq};
use crate::train::config::{StudentWeighting, TeacherWeighting, TrainConfig};
use crate::train::corpus::Example;
use crate::weighting::{
    masked_cross_entropy, normalize_masked, student_weights, teacher_weights, weighted_kd_losses, KdInputs,
};

/// One example tokenized both ways. Model inputs are `ids[..n-1]` and
/// targets `ids[1..]`; masks mark positions whose target is response text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub student_ids: Vec<usize>,
    pub teacher_ids: Vec<usize>,
    pub student_mask: Vec<bool>,
    pub teacher_mask: Vec<bool>,
}

fn response_mask(seq: &TokenSeq, prompt_chars: usize) -> Vec<bool> {
    seq.spans[1..].iter().map(|&(_, end)| end > prompt_chars).collect()
}

impl EncodedExample {
    pub fn new(example: &Example, student_tok: &CharTokenizer, teacher_tok: &PairTokenizer) -> Result<Self> {
        let text = example.text();
        let s = student_tok.encode(&text)?;
        let t = teacher_tok.encode(&text)?;
        Self::from_parts(&s, &t, example.prompt_chars())
    }

    pub fn from_parts(student: &TokenSeq, teacher: &TokenSeq, prompt_chars: usize) -> Result<Self> {
        if student.len() < 2 || teacher.len() < 2 {
            return Err(Error::Empty("example needs at least one target token in each tokenization".into()));
        }
        Ok(Self {
            student_ids: student.ids.clone(),
            teacher_ids: teacher.ids.clone(),
            student_mask: response_mask(student, prompt_chars),
            teacher_mask: response_mask(teacher, prompt_chars),
        })
    }

    pub fn student_inputs(&self) -> &[usize] {
        &self.student_ids[..self.student_ids.len() - 1]
    }

    pub fn student_targets(&self) -> &[usize] {
        &self.student_ids[1..]
    }

    pub fn teacher_inputs(&self) -> &[usize] {
        &self.teacher_ids[..self.teacher_ids.len() - 1]
    }

    pub fn teacher_targets(&self) -> &[usize] {
        &self.teacher_ids[1..]
    }
}

/// Frozen-teacher tensors for one example.
#[derive(Debug, Clone)]
pub struct TeacherView {
    pub embeddings: ValueGrid,
    pub target_embeddings: ValueGrid,
    pub hidden: ValueGrid,
    pub logits: ValueGrid,
}

impl TeacherView {
    pub fn compute(teacher: &TransformerLm, example: &EncodedExample) -> Result<Self> {
        let trace = teacher.forward(example.teacher_inputs())?;
        Ok(Self {
            target_embeddings: teacher.token_embeddings(example.teacher_targets())?,
            embeddings: trace.embeddings,
            hidden: trace.hidden,
            logits: trace.logits,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Ce,
    KdStudent,
    KdTeacher,
    CeTeacherToStudent,
    NdtwEmbed,
    NdtwHidden,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::Ce,
        LossTerm::KdStudent,
        LossTerm::KdTeacher,
        LossTerm::CeTeacherToStudent,
        LossTerm::NdtwEmbed,
        LossTerm::NdtwHidden,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Ce => "ce",
            LossTerm::KdStudent => "kd_student",
            LossTerm::KdTeacher => "kd_teacher",
            LossTerm::CeTeacherToStudent => "ce_teacher_to_student",
            LossTerm::NdtwEmbed => "ndtw_embed",
            LossTerm::NdtwHidden => "ndtw_hidden",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub ce: f64,
    pub kd_student: f64,
    pub kd_teacher: f64,
    pub ce_teacher_to_student: f64,
    pub ndtw_embed: f64,
    pub ndtw_hidden: f64,
}

impl Coefficients {
    pub fn from_lambdas(lambda_ce: f64, lambda_wkd: f64, lambda_dtw: f64) -> Self {
        Self {
            ce: lambda_ce,
            kd_student: lambda_wkd,
            kd_teacher: lambda_wkd,
            ce_teacher_to_student: lambda_wkd,
            ndtw_embed: lambda_dtw,
            ndtw_hidden: lambda_dtw,
        }
    }

    /// Coefficient 1 on `term`, 0 elsewhere.
    pub fn only(term: LossTerm) -> Self {
        let mut c = Self::from_lambdas(0.0, 0.0, 0.0);
        *c.get_mut(term) = 1.0;
        c
    }

    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Ce => self.ce,
            LossTerm::KdStudent => self.kd_student,
            LossTerm::KdTeacher => self.kd_teacher,
            LossTerm::CeTeacherToStudent => self.ce_teacher_to_student,
            LossTerm::NdtwEmbed => self.ndtw_embed,
            LossTerm::NdtwHidden => self.ndtw_hidden,
        }
    }

    fn get_mut(&mut self, term: LossTerm) -> &mut f64 {
        match term {
            LossTerm::Ce => &mut self.ce,
            LossTerm::KdStudent => &mut self.kd_student,
            LossTerm::KdTeacher => &mut self.kd_teacher,
            LossTerm::CeTeacherToStudent => &mut self.ce_teacher_to_student,
            LossTerm::NdtwEmbed => &mut self.ndtw_embed,
            LossTerm::NdtwHidden => &mut self.ndtw_hidden,
        }
    }

    fn needs_kd(&self) -> bool {
        self.kd_student != 0.0 || self.kd_teacher != 0.0 || self.ce_teacher_to_student != 0.0
    }

    fn needs_dtw(&self) -> bool {
        self.ndtw_embed != 0.0 || self.ndtw_hidden != 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd_student: f64,
    pub kd_teacher: f64,
    pub ce_teacher_to_student: f64,
    pub ndtw_embed: f64,
    pub ndtw_hidden: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "ce,kd_student,kd_teacher,ce_teacher_to_student,ndtw_embed,ndtw_hidden,total";

    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Ce => self.ce,
            LossTerm::KdStudent => self.kd_student,
            LossTerm::KdTeacher => self.kd_teacher,
            LossTerm::CeTeacherToStudent => self.ce_teacher_to_student,
            LossTerm::NdtwEmbed => self.ndtw_embed,
            LossTerm::NdtwHidden => self.ndtw_hidden,
        }
    }

    pub fn recombine(&self, c: &Coefficients) -> f64 {
        LossTerm::ALL.iter().map(|&t| c.get(t) * self.get(t)).sum()
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, alpha: f64) {
        self.ce += alpha * other.ce;
        self.kd_student += alpha * other.kd_student;
        self.kd_teacher += alpha * other.kd_teacher;
        self.ce_teacher_to_student += alpha * other.ce_teacher_to_student;
        self.ndtw_embed += alpha * other.ndtw_embed;
        self.ndtw_hidden += alpha * other.ndtw_hidden;
        self.total += alpha * other.total;
    }

    pub fn to_csv_fields(&self) -> String {
        format!(
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.ce,
            self.kd_student,
            self.kd_teacher,
            self.ce_teacher_to_student,
            self.ndtw_embed,
            self.ndtw_hidden,
            self.total
        )
    }
}

/// Everything about the objective that does not change between steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub coefficients: Coefficients,
    pub temperature: f64,
    pub gamma: f64,
    pub band: BandParams,
    pub student_weighting: StudentWeighting,
    pub teacher_weighting: TeacherWeighting,
    pub detach_cross_space: bool,
    pub tie_hidden_projector: bool,
    pub detach_alignment_targets: bool,
}

impl ObjectiveSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            coefficients: Coefficients::from_lambdas(cfg.lambda_ce, cfg.lambda_wkd, cfg.lambda_dtw),
            temperature: cfg.temperature,
            gamma: cfg.gamma,
            band: cfg.band,
            student_weighting: cfg.student_weighting,
            teacher_weighting: cfg.teacher_weighting,
            detach_cross_space: cfg.detach_cross_space,
            tie_hidden_projector: cfg.tie_hidden_projector,
            detach_alignment_targets: cfg.detach_alignment_targets,
        }
    }

    pub fn uses_teacher(&self) -> bool {
        self.coefficients.needs_kd() || self.coefficients.needs_dtw()
    }

    /// Which projectors can receive gradient, in [`ProjectorSet::named_tensors`]
    /// order. The optimizer leaves the others untouched.
    pub fn trained_projectors(&self) -> [bool; 5] {
        let kd = self.coefficients.needs_kd();
        let align = self.coefficients.needs_dtw() && !self.detach_alignment_targets;
        [
            align,
            align && !self.tie_hidden_projector,
            kd,
            kd || (align && self.tie_hidden_projector),
            kd,
        ]
    }
}

/// The non-differentiated quantities of one evaluation: normalized token
/// weights and the band. Passing them back in holds them fixed, which is
/// what finite-difference checks need.
#[derive(Debug, Clone, Default)]
pub struct Frozen {
    pub student_weights: Option<Vec<f64>>,
    pub teacher_weights: Option<Vec<f64>>,
    pub band: Option<BandSpec>,
}

/// Per-position student-space quantities for the weight dump.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDiagnostics {
    pub entropy: Vec<f64>,
    pub gate: Vec<f64>,
    pub weight: Vec<f64>,
    pub kl: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub student: LmParams,
    pub projectors: ProjectorSet,
}

impl Grads {
    pub fn zeros(student: &TransformerLm, projectors: &ProjectorSet) -> Self {
        Self {
            student: student.params.zeros_like(),
            projectors: projectors.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) -> Result<()> {
        self.student.add_assign(&other.student);
        self.projectors.add_assign(&other.projectors)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.student.scale(alpha);
        self.projectors.scale(alpha);
    }
}

#[derive(Debug, Clone)]
pub struct SequenceLoss {
    pub breakdown: LossBreakdown,
    pub frozen: Frozen,
    pub diagnostics: Option<WeightDiagnostics>,
    pub attention: Option<ValueGrid>,
    pub grads: Option<Grads>,
}

fn finite(value: f64, term: LossTerm) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            term: term.name().to_string(),
        })
    }
}

/// Evaluates the objective on one example; with `with_grads` also returns
/// gradients for the student and projectors. `teacher` is required when any
/// KD or DTW coefficient is nonzero.
pub fn sequence_loss(
    settings: &ObjectiveSettings,
    student: &TransformerLm,
    projectors: &ProjectorSet,
    teacher: Option<(&TransformerLm, &TeacherView)>,
    example: &EncodedExample,
    frozen: Option<&Frozen>,
    with_grads: bool,
) -> Result<SequenceLoss> {
    let c = settings.coefficients;
    let targets = example.student_targets();
    let trace = student.forward(example.student_inputs())?;
    let (s, ds) = trace.hidden.shape();

    let mut bd = LossBreakdown::default();
    let mut out_frozen = Frozen::default();
    let mut diagnostics = None;
    let mut attention = None;

    let (ce, d_ce) = masked_cross_entropy(&trace.logits, targets, &example.student_mask)?;
    bd.ce = finite(ce, LossTerm::Ce)?;
    let mut d_logits = d_ce.scaled(c.ce);
    let mut d_hidden = ValueGrid::zeros(s, ds);
    let mut d_emb = ValueGrid::zeros(s, ds);
    let mut d_targets = ValueGrid::zeros(s, ds);
    let mut d_head = ValueGrid::zeros(ds, student.vocab_size());
    let mut proj_grads = projectors.zeros_like();

    if c.needs_kd() || c.needs_dtw() {
        let (teacher, view) = teacher.ok_or_else(|| {
            Error::InvalidArgument("distillation terms are active but no teacher was supplied".into())
        })?;
        let t = example.teacher_ids.len() - 1;
        if view.hidden.rows() != t || view.logits.rows() != t {
            return Err(Error::shape("teacher view rows", t, view.hidden.rows()));
        }
        let target_emb = student.token_embeddings(targets)?;
        let cma = build_cma(
            &CmaInputs {
                student_inputs: &trace.embeddings,
                student_targets: &target_emb,
                student_hidden: &trace.hidden,
                teacher_inputs: &view.embeddings,
                teacher_targets: &view.target_embeddings,
                teacher_hidden: &view.hidden,
            },
            projectors,
        )?;

        if c.needs_kd() {
            let tau = settings.temperature;
            let (logits_ts, logits_st) = project_dual(&cma, &student.params.head, &teacher.params.head)?;
            let p_s = softmax_rows(&trace.logits, tau)?;
            let p_ts = softmax_rows(&logits_ts, tau)?;
            let sw = student_weights(&p_s, &p_ts, true)?;
            let (ws, wt) = match frozen {
                Some(Frozen {
                    student_weights: Some(ws),
                    teacher_weights: Some(wt),
                    ..
                }) => (ws.clone(), wt.clone()),
                _ => {
                    let raw_s = match settings.student_weighting {
                        StudentWeighting::Unit => vec![1.0; s],
                        StudentWeighting::Entropy => sw.entropy.clone(),
                        StudentWeighting::EntropyGate => sw.raw.clone(),
                    };
                    let raw_t = match settings.teacher_weighting {
                        TeacherWeighting::Unit => vec![1.0; t],
                        TeacherWeighting::Entropy => teacher_weights(&softmax_rows(&view.logits, tau)?)?,
                    };
                    (
                        normalize_masked(&raw_s, &example.student_mask)?,
                        normalize_masked(&raw_t, &example.teacher_mask)?,
                    )
                }
            };
            let kd = weighted_kd_losses(
                &KdInputs {
                    student: &trace.logits,
                    teacher_to_student: &logits_ts,
                    teacher: &view.logits,
                    student_to_teacher: &logits_st,
                    student_targets: targets,
                    student_mask: &example.student_mask,
                    teacher_mask: &example.teacher_mask,
                    temperature: tau,
                },
                &ws,
                &wt,
            )?;
            bd.kd_student = finite(kd.kd_student, LossTerm::KdStudent)?;
            bd.kd_teacher = finite(kd.kd_teacher, LossTerm::KdTeacher)?;
            bd.ce_teacher_to_student = finite(kd.ce_teacher_to_student, LossTerm::CeTeacherToStudent)?;
            if with_grads {
                d_logits.add_scaled(&kd.d_student, c.kd_student)?;
                let mut d_ts = kd.d_ce_teacher_to_student.scaled(c.ce_teacher_to_student);
                if !settings.detach_cross_space {
                    d_ts.add_scaled(&kd.d_teacher_to_student, c.kd_student)?;
                }
                let d_st = kd.d_student_to_teacher.scaled(c.kd_teacher);
                let g = cma_backward(&cma, projectors, &student.params.head, &teacher.params.head, &d_ts, &d_st)?;
                proj_grads.add_assign(&g.projectors)?;
                d_hidden.add_assign(&g.student_hidden)?;
                if !settings.detach_cross_space {
                    d_emb.add_assign(&g.student_inputs)?;
                    d_targets.add_assign(&g.student_targets)?;
                    d_head.add_assign(&g.student_head)?;
                }
            }
            diagnostics = Some(WeightDiagnostics {
                entropy: sw.entropy,
                gate: sw.gate,
                weight: ws.clone(),
                kl: kd.kl_student,
            });
            out_frozen.student_weights = Some(ws);
            out_frozen.teacher_weights = Some(wt);
        }

        if c.needs_dtw() {
            let band = match frozen.and_then(|f| f.band.clone()) {
                Some(b) => b,
                None => build_band(&cma.attention, settings.band)?,
            };
            let tied;
            let dtw_proj = if settings.tie_hidden_projector {
                tied = projectors.with_tied_hidden();
                &tied
            } else {
                projectors
            };
            let (pe, ph) = project_teacher_reprs(&view.embeddings, &view.hidden, dtw_proj)?;
            let dl = dtw_loss_with_band(&trace.embeddings, &pe, &trace.hidden, &ph, band, settings.gamma)?;
            bd.ndtw_embed = finite(dl.embed.value, LossTerm::NdtwEmbed)?;
            bd.ndtw_hidden = finite(dl.hidden.value, LossTerm::NdtwHidden)?;
            if with_grads {
                d_emb.add_scaled(&dl.embed.grad_x, c.ndtw_embed)?;
                d_hidden.add_scaled(&dl.hidden.grad_x, c.ndtw_hidden)?;
                if !settings.detach_alignment_targets {
                    let (gwe, gwh) = project_teacher_reprs_backward(
                        &view.embeddings,
                        &view.hidden,
                        &dl.embed.grad_y.scaled(c.ndtw_embed),
                        &dl.hidden.grad_y.scaled(c.ndtw_hidden),
                    )?;
                    proj_grads.w_e.add_assign(&gwe)?;
                    if settings.tie_hidden_projector {
                        proj_grads.p_v.add_assign(&gwh.transpose())?;
                    } else {
                        proj_grads.w_h.add_assign(&gwh)?;
                    }
                }
            }
            out_frozen.band = Some(dl.band);
        }
        attention = Some(cma.attention);
    }
    bd.total = bd.recombine(&c);
    if !bd.total.is_finite() {
        return Err(Error::NonFiniteLoss { term: "total".into() });
    }

    let grads = if with_grads {
        let (mut g, _) = student.backward(&trace, Some(&d_logits), Some(&d_hidden), Some(&d_emb))?;
        g.head.add_assign(&d_head)?;
        accumulate_token_embedding_grad(&mut g, targets, &d_targets)?;
        Some(Grads {
            student: g,
            projectors: proj_grads,
        })
    } else {
        None
    };
    Ok(SequenceLoss {
        breakdown: bd,
        frozen: out_frozen,
        diagnostics,
        attention,
        grads,
    })
}
