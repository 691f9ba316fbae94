//! Data, objective, optimization and evaluation for distillation runs.

pub mod config;
pub mod corpus;
pub mod distill;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod objective;
pub mod optim;

pub use config::{Config, Mode, TrainConfig};
pub use corpus::{Corpus, Example};
pub use distill::{pretrain_teacher, run_distillation, DistillOutcome, Distiller, StepRecord};
pub use objective::{
    sequence_loss, Coefficients, EncodedExample, Frozen, LossBreakdown, LossTerm, ObjectiveSettings, TeacherView,
};
