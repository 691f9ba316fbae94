//! Optimization loops: teacher pretraining and student distillation.

use crate::cma::ProjectorSet;
use crate::error::{Error, Result};
use crate::lm::{LmConfig, TransformerLm};
use crate::numerics::Rng;
use crate::train::config::{OptimConfig, PretrainConfig, TrainConfig};
use crate::train::objective::{
    sequence_loss, EncodedExample, Grads, LossBreakdown, ObjectiveSettings, TeacherView, WeightDiagnostics,
};
use crate::train::optim::{clip_global_norm, learning_rate, AdamW};
use crate::weighting::masked_cross_entropy;

/// Stream ids for [`Rng::fork`], so every consumer of the run seed draws
/// from its own sequence.
pub mod streams {
    pub const PROJECTORS: u64 = 7;
    pub const SHUFFLE: u64 = 1000;
}

/// Example order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).fork(streams::SHUFFLE + epoch as u64).shuffle(&mut order);
    order
}

/// Lazily computed teacher tensors, one per training example.
#[derive(Debug)]
pub struct TeacherCache<'a> {
    teacher: &'a TransformerLm,
    views: Vec<Option<TeacherView>>,
    forward_calls: usize,
}

impl<'a> TeacherCache<'a> {
    pub fn new(teacher: &'a TransformerLm, examples: usize) -> Self {
        Self {
            teacher,
            views: vec![None; examples],
            forward_calls: 0,
        }
    }

    pub fn teacher(&self) -> &'a TransformerLm {
        self.teacher
    }

    pub fn forward_calls(&self) -> usize {
        self.forward_calls
    }

    pub fn view(&mut self, index: usize, example: &EncodedExample) -> Result<&TeacherView> {
        if self.views[index].is_none() {
            self.forward_calls += 1;
            self.views[index] = Some(TeacherView::compute(self.teacher, example)?);
        }
        Ok(self.views[index].as_ref().expect("just filled"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub losses: LossBreakdown,
}

impl StepRecord {
    pub fn csv_header() -> String {
        format!("step,epoch,lr,grad_norm,{}", LossBreakdown::CSV_HEADER)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{}",
            self.step,
            self.epoch,
            self.lr,
            self.grad_norm,
            self.losses.to_csv_fields()
        )
    }
}

fn total_steps(examples: usize, batch_size: usize, epochs: usize) -> usize {
    examples.div_ceil(batch_size) * epochs
}

/// Student, projectors and optimizer state for one distillation run.
#[derive(Debug)]
pub struct Distiller<'a> {
    pub settings: ObjectiveSettings,
    pub student: TransformerLm,
    pub projectors: ProjectorSet,
    cfg: TrainConfig,
    teacher: Option<TeacherCache<'a>>,
    opt_model: AdamW,
    opt_proj: AdamW,
    step: usize,
    total_steps: usize,
}

impl<'a> Distiller<'a> {
    /// Fresh student and projectors, both seeded from `seed`.
    pub fn new(
        cfg: &TrainConfig,
        student_config: LmConfig,
        teacher: Option<&'a TransformerLm>,
        examples: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let student = TransformerLm::new(LmConfig { seed, ..student_config })?;
        let teacher_width = teacher.map_or(student.width(), |t| t.width());
        let projectors = ProjectorSet::new(
            student.width(),
            teacher_width,
            &mut Rng::new(seed).fork(streams::PROJECTORS),
        )?;
        Self::from_parts(cfg, student, projectors, teacher, examples)
    }

    pub fn from_parts(
        cfg: &TrainConfig,
        student: TransformerLm,
        projectors: ProjectorSet,
        teacher: Option<&'a TransformerLm>,
        examples: usize,
    ) -> Result<Self> {
        let settings = ObjectiveSettings::from_config(cfg);
        let teacher = if settings.uses_teacher() {
            let t = teacher.ok_or_else(|| {
                Error::InvalidArgument("this objective needs a teacher but none was given".into())
            })?;
            if projectors.teacher_width() != t.width() || projectors.student_width() != student.width() {
                return Err(Error::shape(
                    "projectors",
                    format!("{}×{}", student.width(), t.width()),
                    format!("{}×{}", projectors.student_width(), projectors.teacher_width()),
                ));
            }
            Some(TeacherCache::new(t, examples))
        } else {
            None
        };
        Ok(Self {
            settings,
            student,
            projectors,
            cfg: cfg.clone(),
            teacher,
            opt_model: AdamW::new(cfg.optim.weight_decay),
            opt_proj: AdamW::new(cfg.optim.weight_decay),
            step: 0,
            total_steps: total_steps(examples, cfg.batch_size, cfg.epochs),
        })
    }

    pub fn teacher_forward_calls(&self) -> usize {
        self.teacher.as_ref().map_or(0, |t| t.forward_calls())
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer step on the mean objective over `batch` (indices into
    /// `examples`).
    pub fn step(&mut self, examples: &[EncodedExample], batch: &[usize], epoch: usize) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let mut grads = Grads::zeros(&self.student, &self.projectors);
        let mut losses = LossBreakdown::default();
        let inv = 1.0 / batch.len() as f64;
        for &i in batch {
            let ex = &examples[i];
            let teacher = match self.teacher.as_mut() {
                Some(cache) => {
                    let t = cache.teacher();
                    Some((t, &*cache.view(i, ex)?))
                }
                None => None,
            };
            let out = sequence_loss(&self.settings, &self.student, &self.projectors, teacher, ex, None, true)?;
            losses.add_scaled(&out.breakdown, inv);
            grads.add_assign(out.grads.as_ref().expect("requested gradients"))?;
        }
        grads.scale(inv);
        let mut all: Vec<_> = grads.student.tensors_mut();
        all.extend(grads.projectors.tensors_mut());
        let grad_norm = clip_global_norm(all, self.cfg.optim.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { term: "gradient".into() });
        }

        let o = &self.cfg.optim;
        let lr = learning_rate(o.schedule, o.lr, self.step, self.total_steps, o.warmup_steps);
        let lr_proj = learning_rate(o.schedule, self.cfg.projector_lr, self.step, self.total_steps, o.warmup_steps);
        let g_student: Vec<_> = grads.student.named_tensors().into_iter().map(|(_, g)| g).collect();
        self.opt_model.update(self.student.params.tensors_mut(), &g_student, lr)?;
        if self.settings.uses_teacher() {
            let trained = self.settings.trained_projectors();
            let g_proj: Vec<_> = grads
                .projectors
                .named_tensors()
                .into_iter()
                .zip(trained)
                .filter_map(|((_, g), t)| t.then_some(g))
                .collect();
            let params: Vec<_> = self.projectors.tensors_mut().into_iter().zip(trained).filter_map(|(p, t)| t.then_some(p)).collect();
            self.opt_proj.update(params, &g_proj, lr_proj)?;
        }
        let record = StepRecord {
            step: self.step,
            epoch,
            lr,
            grad_norm,
            losses,
        };
        self.step += 1;
        Ok(record)
    }

    /// Per-position weight diagnostics on one example at current parameters.
    pub fn weight_dump(&mut self, examples: &[EncodedExample], index: usize) -> Result<Option<WeightDiagnostics>> {
        let ex = &examples[index];
        let teacher = match self.teacher.as_mut() {
            Some(cache) => {
                let t = cache.teacher();
                Some((t, &*cache.view(index, ex)?))
            }
            None => return Ok(None),
        };
        let out = sequence_loss(&self.settings, &self.student, &self.projectors, teacher, ex, None, false)?;
        Ok(out.diagnostics)
    }
}

/// Final state of a distillation run.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: TransformerLm,
    pub projectors: ProjectorSet,
    pub records: Vec<StepRecord>,
    pub teacher_forward_calls: usize,
}

/// Runs `cfg.epochs` epochs. `on_epoch` sees the state after every epoch.
pub fn run_distillation(
    cfg: &TrainConfig,
    student_config: LmConfig,
    teacher: Option<&TransformerLm>,
    examples: &[EncodedExample],
    seed: u64,
    mut on_epoch: impl FnMut(usize, &Distiller) -> Result<()>,
) -> Result<DistillOutcome> {
    if examples.is_empty() {
        return Err(Error::Empty("distillation set".into()));
    }
    let mut d = Distiller::new(cfg, student_config, teacher, examples.len(), seed)?;
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(seed, epoch, examples.len());
        for batch in order.chunks(cfg.batch_size) {
            records.push(d.step(examples, batch, epoch)?);
        }
        on_epoch(epoch, &d)?;
    }
    Ok(DistillOutcome {
        teacher_forward_calls: d.teacher_forward_calls(),
        student: d.student,
        projectors: d.projectors,
        records,
    })
}

/// `exp(mean next-token NLL)` over every target token of `sequences`.
pub fn heldout_perplexity(model: &TransformerLm, sequences: &[Vec<usize>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for ids in sequences {
        let n = ids.len() - 1;
        let trace = model.forward(&ids[..n])?;
        let (ce, _) = masked_cross_entropy(&trace.logits, &ids[1..], &vec![true; n])?;
        nll += ce * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Empty("perplexity set".into()));
    }
    Ok((nll / count as f64).exp())
}

/// Perplexity on `valid` of an add-one smoothed unigram model fit to the
/// target tokens of `train`.
pub fn unigram_perplexity(train: &[Vec<usize>], valid: &[Vec<usize>], vocab_size: usize) -> Result<f64> {
    let mut counts = vec![0usize; vocab_size];
    let mut total = 0usize;
    for ids in train {
        for &id in &ids[1..] {
            counts[id] += 1;
            total += 1;
        }
    }
    let denom = (total + vocab_size) as f64;
    let mut nll = 0.0;
    let mut n = 0usize;
    for ids in valid {
        for &id in &ids[1..] {
            nll -= ((counts[id] + 1) as f64 / denom).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("unigram validation set".into()));
    }
    Ok((nll / n as f64).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ppl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub unigram_ppl: f64,
    pub threshold: f64,
    pub initial_valid_ppl: f64,
    pub epochs: Vec<PretrainEpoch>,
}

impl PretrainReport {
    pub fn final_valid_ppl(&self) -> f64 {
        self.epochs.last().map_or(self.initial_valid_ppl, |e| e.valid_ppl)
    }
}

fn optimizer_lr(o: &OptimConfig, step: usize, total: usize) -> f64 {
    learning_rate(o.schedule, o.lr, step, total, o.warmup_steps)
}

/// Trains a language model with plain next-token cross-entropy on whole
/// sequences until held-out perplexity reaches `ppl_ratio ×` the unigram
/// perplexity (after at least `min_epochs`).
pub fn pretrain_teacher(
    cfg: &PretrainConfig,
    config: LmConfig,
    train: &[Vec<usize>],
    valid: &[Vec<usize>],
) -> Result<(TransformerLm, PretrainReport)> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Empty("teacher pretraining data".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || cfg.min_epochs > cfg.max_epochs {
        return Err(Error::InvalidArgument(format!("invalid pretraining schedule {cfg:?}")));
    }
    let seed = config.seed;
    let mut model = TransformerLm::new(config)?;
    let unigram_ppl = unigram_perplexity(train, valid, model.vocab_size())?;
    let threshold = cfg.ppl_ratio * unigram_ppl;
    let initial_valid_ppl = heldout_perplexity(&model, valid)?;
    let mut report = PretrainReport {
        unigram_ppl,
        threshold,
        initial_valid_ppl,
        epochs: Vec::new(),
    };
    let mut opt = AdamW::new(cfg.optim.weight_decay);
    let total = total_steps(train.len(), cfg.batch_size, cfg.max_epochs);
    let mut step = 0;
    for epoch in 0..cfg.max_epochs {
        let order = epoch_order(seed, epoch, train.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.params.zeros_like();
            let mut loss = 0.0;
            for &i in batch {
                let ids = &train[i];
                let n = ids.len() - 1;
                let trace = model.forward(&ids[..n])?;
                let (ce, d) = masked_cross_entropy(&trace.logits, &ids[1..], &vec![true; n])?;
                let (g, _) = model.backward(&trace, Some(&d), None, None)?;
                grads.add_assign(&g);
                loss += ce;
            }
            let inv = 1.0 / batch.len() as f64;
            grads.scale(inv);
            loss *= inv;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { term: "ce".into() });
            }
            clip_global_norm(grads.tensors_mut(), cfg.optim.clip_norm);
            let lr = optimizer_lr(&cfg.optim, step, total);
            let g: Vec<_> = grads.named_tensors().into_iter().map(|(_, g)| g).collect();
            opt.update(model.params.tensors_mut(), &g, lr)?;
            step += 1;
            epoch_loss += loss * batch.len() as f64;
        }
        let valid_ppl = heldout_perplexity(&model, valid)?;
        report.epochs.push(PretrainEpoch {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            valid_ppl,
        });
        if epoch == 0 && !(valid_ppl < initial_valid_ppl) {
            return Err(Error::Diverged(format!(
                "held-out perplexity {valid_ppl} after one epoch is not below the initial {initial_valid_ppl}"
            )));
        }
        if epoch + 1 >= cfg.min_epochs && valid_ppl <= threshold {
            return Ok((model, report));
        }
    }
    Err(Error::Diverged(format!(
        "held-out perplexity {} did not reach {threshold} ({}× unigram {unigram_ppl}) within {} epochs",
        report.final_valid_ppl(),
        cfg.ppl_ratio,
        cfg.max_epochs
    )))
}
