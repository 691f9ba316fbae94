//! Finite-difference check of the full objective on micro instances.
//!
//! Each instance pairs a tiny random student and teacher with two short
//! examples (S ≤ 6, T ≤ 5). For every loss term the analytic gradient is
//! compared with central differences on a random sample of student and
//! projector coordinates; token weights and the band are frozen at the base
//! point.

use crate::cma::ProjectorSet;
use crate::error::Result;
use crate::lm::{LmConfig, TransformerLm};
use crate::numerics::{relative_error, Rng, ValueGrid};
use crate::tokenizer::{BOS, EOS};
use crate::train::config::{StudentWeighting, TeacherWeighting};
use crate::train::objective::{
    sequence_loss, Coefficients, EncodedExample, Frozen, LossTerm, ObjectiveSettings, TeacherView,
};
use crate::softdtw::BandParams;

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

/// What a gradcheck row covers: one term, or the λ-weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Term(LossTerm),
    Total,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Term(t) => t.name(),
            Component::Total => "total",
        }
    }

    pub fn all() -> Vec<Component> {
        LossTerm::ALL.iter().map(|&t| Component::Term(t)).chain([Component::Total]).collect()
    }

    /// Resolves a `--component` filter: a term name, `total`, or one of the
    /// groups `ce`, `kd`, `softdtw`, `all`.
    pub fn select(filter: &str) -> Option<Vec<Component>> {
        use LossTerm::*;
        let picked = match filter {
            "all" => Component::all(),
            "kd" => vec![Component::Term(KdStudent), Component::Term(KdTeacher), Component::Term(CeTeacherToStudent)],
            "softdtw" | "dtw" => vec![Component::Term(NdtwEmbed), Component::Term(NdtwHidden)],
            "total" => vec![Component::Total],
            name => vec![Component::Term(*LossTerm::ALL.iter().find(|t| t.name() == name)?)],
        };
        Some(picked)
    }

    fn coefficients(self, defaults: Coefficients) -> Coefficients {
        match self {
            Component::Term(t) => Coefficients::only(t),
            Component::Total => defaults,
        }
    }
}

/// A tiny student/teacher pair with two examples.
#[derive(Debug, Clone)]
pub struct MicroInstance {
    pub student: TransformerLm,
    pub teacher: TransformerLm,
    pub projectors: ProjectorSet,
    pub examples: Vec<EncodedExample>,
    pub views: Vec<TeacherView>,
}

fn random_ids(rng: &mut Rng, len: usize, vocab: usize) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend((0..len).map(|_| 4 + rng.below(vocab - 4)));
    ids.push(EOS);
    ids
}

fn random_mask(rng: &mut Rng, len: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..len).map(|_| rng.uniform() < 0.7).collect();
    let k = rng.below(len);
    m[k] = true;
    m
}

pub fn micro_instance(seed: u64) -> Result<MicroInstance> {
    let mut rng = Rng::new(seed).fork(0x6C);
    let student = TransformerLm::new(LmConfig {
        vocab_size: 9,
        width: 4,
        layers: 2,
        heads: 2,
        context: 8,
        seed: rng.next_u64(),
        init_std: 0.4,
        embeddings_include_positions: false,
    })?;
    let teacher = TransformerLm::new(LmConfig {
        vocab_size: 11,
        width: 6,
        layers: 1,
        heads: 2,
        context: 8,
        seed: rng.next_u64(),
        init_std: 0.4,
        embeddings_include_positions: false,
    })?;
    let projectors = ProjectorSet::new(4, 6, &mut rng)?;
    let mut examples = Vec::new();
    let mut views = Vec::new();
    for _ in 0..2 {
        // S = body + 1 ≤ 6 and T = body + 1 ≤ 5
        let s_len = 2 + rng.below(4);
        let s_ids = random_ids(&mut rng, s_len, 9);
        let t_len = 1 + rng.below(4);
        let t_ids = random_ids(&mut rng, t_len, 11);
        let ex = EncodedExample {
            student_mask: random_mask(&mut rng, s_ids.len() - 1),
            teacher_mask: random_mask(&mut rng, t_ids.len() - 1),
            student_ids: s_ids,
            teacher_ids: t_ids,
        };
        views.push(TeacherView::compute(&teacher, &ex)?);
        examples.push(ex);
    }
    Ok(MicroInstance {
        student,
        teacher,
        projectors,
        examples,
        views,
    })
}

/// Default objective for checks: entropy-gated weights, banded DTW with a
/// narrow band so the penalty is active on micro lengths.
pub fn check_settings() -> ObjectiveSettings {
    ObjectiveSettings {
        coefficients: Coefficients::from_lambdas(1.0, 1.0, 0.1),
        temperature: 2.0,
        gamma: 0.1,
        band: BandParams {
            base_width: 0.5,
            entropy_sensitivity: 0.5,
            blend: 0.7,
            penalty: 1.0,
        },
        student_weighting: StudentWeighting::EntropyGate,
        teacher_weighting: TeacherWeighting::Entropy,
        detach_cross_space: false,
        detach_alignment_targets: false,
        tie_hidden_projector: true,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentResult {
    pub component: &'static str,
    pub max_rel_err: f64,
    pub coordinates: usize,
    pub seeds: usize,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

fn objective(
    settings: &ObjectiveSettings,
    inst: &MicroInstance,
    student: &TransformerLm,
    projectors: &ProjectorSet,
    examples: &[usize],
    frozen: &[Frozen],
) -> Result<f64> {
    let mut total = 0.0;
    for (&i, f) in examples.iter().zip(frozen) {
        let out = sequence_loss(
            settings,
            student,
            projectors,
            Some((&inst.teacher, &inst.views[i])),
            &inst.examples[i],
            Some(f),
            false,
        )?;
        total += out.breakdown.total;
    }
    Ok(total / examples.len() as f64)
}

fn tensor_mut<'a>(student: &'a mut TransformerLm, proj: &'a mut ProjectorSet, k: usize) -> &'a mut ValueGrid {
    let n_student = student.params.named_tensors().len();
    if k < n_student {
        student.params.tensors_mut().swap_remove(k)
    } else {
        proj.tensors_mut().swap_remove(k - n_student)
    }
}

/// Max relative error of one component on one instance over `samples`
/// random coordinates. Single terms use the first example; the total uses
/// the mean over both.
pub fn check_component(
    inst: &MicroInstance,
    component: Component,
    samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut settings = check_settings();
    settings.coefficients = component.coefficients(settings.coefficients);
    let examples: Vec<usize> = match component {
        Component::Total => vec![0, 1],
        Component::Term(_) => vec![0],
    };
    let mut frozen = Vec::new();
    let mut grads: Option<crate::train::objective::Grads> = None;
    for &i in &examples {
        let out = sequence_loss(
            &settings,
            &inst.student,
            &inst.projectors,
            Some((&inst.teacher, &inst.views[i])),
            &inst.examples[i],
            None,
            true,
        )?;
        let g = out.grads.expect("requested");
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g)?,
            None => grads = Some(g),
        }
        frozen.push(out.frozen);
    }
    let mut grads = grads.expect("at least one example");
    grads.scale(1.0 / examples.len() as f64);
    let analytic: Vec<ValueGrid> = grads
        .student
        .named_tensors()
        .into_iter()
        .map(|(_, g)| g.clone())
        .chain(grads.projectors.named_tensors().into_iter().map(|(_, g)| g.clone()))
        .collect();

    let mut coords: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(k, g)| (0..g.len()).map(move |e| (k, e)))
        .collect();
    rng.shuffle(&mut coords);
    coords.truncate(samples);

    let mut worst: f64 = 0.0;
    for (k, e) in coords {
        let eval_at = |delta: f64| -> Result<f64> {
            let mut s = inst.student.clone();
            let mut p = inst.projectors.clone();
            tensor_mut(&mut s, &mut p, k).as_mut_slice()[e] += delta;
            objective(&settings, inst, &s, &p, &examples, &frozen)
        };
        let numeric = (eval_at(EPS)? - eval_at(-EPS)?) / (2.0 * EPS);
        worst = worst.max(relative_error(analytic[k].as_slice()[e], numeric));
    }
    Ok(worst)
}

/// Runs `components` over `seeds` instances.
pub fn run_suite(components: &[Component], seeds: u64, samples: usize) -> Result<Vec<ComponentResult>> {
    let instances: Vec<MicroInstance> = (0..seeds).map(micro_instance).collect::<Result<_>>()?;
    components
        .iter()
        .map(|&c| {
            let mut worst: f64 = 0.0;
            let mut coordinates = 0;
            for (seed, inst) in instances.iter().enumerate() {
                let mut rng = Rng::new(seed as u64).fork(0x9C);
                let n = if c == Component::Total { samples.max(200) } else { samples };
                worst = worst.max(check_component(inst, c, n, &mut rng)?);
                coordinates += n;
            }
            Ok(ComponentResult {
                component: c.name(),
                max_rel_err: worst,
                coordinates,
                seeds: seeds as usize,
            })
        })
        .collect()
}
