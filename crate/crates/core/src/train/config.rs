//! Run configuration, read from TOML. Every field has a default, so a
//! config file only needs the values it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::softdtw::BandParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub tokenizer: TokenizerConfig,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub pretrain: PretrainConfig,
    pub distill: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 17,
            corpus: CorpusConfig::default(),
            tokenizer: TokenizerConfig::default(),
            teacher: ModelConfig {
                width: 64,
                layers: 2,
                heads: 4,
                context: 80,
                init_std: 0.02,
                embeddings_include_positions: false,
            },
            student: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            distill: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.distill.validate()?;
        if self.tokenizer.merges == 0 {
            return Err(Error::InvalidArgument("tokenizer.merges must be positive".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::InvalidArgument("eval.seeds must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Total number of distinct examples before splitting.
    pub examples: usize,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    /// Number of distinct content words drawn from the built-in inventory.
    pub words: usize,
    pub min_items: usize,
    pub max_items: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            examples: 2400,
            train_fraction: 0.8,
            valid_fraction: 0.1,
            words: 12,
            min_items: 2,
            max_items: 4,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.train_fraction > 0.0
            && self.valid_fraction > 0.0
            && self.train_fraction + self.valid_fraction < 1.0
            && self.min_items >= 1
            && self.min_items <= self.max_items
            && self.words >= 2;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid corpus config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub merges: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { merges: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub init_std: f64,
    pub embeddings_include_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            layers: 2,
            heads: 2,
            context: 80,
            init_std: 0.02,
            embeddings_include_positions: false,
        }
    }
}

impl ModelConfig {
    pub fn lm_config(&self, vocab_size: usize, seed: u64) -> LmConfig {
        LmConfig {
            vocab_size,
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            context: self.context,
            seed,
            init_std: self.init_std,
            embeddings_include_positions: self.embeddings_include_positions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    Cosine,
}

/// Optimizer settings shared by teacher pretraining and distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            weight_decay: 0.01,
            warmup_steps: 20,
            clip_norm: 1.0,
            schedule: Schedule::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub min_epochs: usize,
    pub max_epochs: usize,
    /// Held-out perplexity must reach `ppl_ratio ×` the add-one unigram perplexity.
    pub ppl_ratio: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            batch_size: 16,
            min_epochs: 20,
            max_epochs: 40,
            ppl_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentWeighting {
    Unit,
    Entropy,
    EntropyGate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherWeighting {
    Unit,
    Entropy,
}

/// Distillation objective and schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_ce: f64,
    pub lambda_wkd: f64,
    pub lambda_dtw: f64,
    pub temperature: f64,
    pub gamma: f64,
    pub band: BandParams,
    pub student_weighting: StudentWeighting,
    pub teacher_weighting: TeacherWeighting,
    /// Treat the projected teacher distribution (as KL target), the student
    /// head inside `p^{t→s}` and the attention query embeddings as constants.
    pub detach_cross_space: bool,
    /// Use `P_vᵀ` as the hidden-state projector of the DTW term instead of
    /// the separate `W_h`.
    pub tie_hidden_projector: bool,
    /// Treat the projected teacher sequences of the DTW term as fixed
    /// targets; the projectors then learn only through the attention path.
    pub detach_alignment_targets: bool,
    pub optim: OptimConfig,
    pub projector_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Use only the first `train_examples` of the training split (0 = all).
    pub train_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_wkd: 1.0,
            lambda_dtw: 0.1,
            temperature: 2.0,
            gamma: 0.1,
            band: BandParams::default(),
            student_weighting: StudentWeighting::EntropyGate,
            teacher_weighting: TeacherWeighting::Entropy,
            detach_cross_space: true,
            tie_hidden_projector: false,
            detach_alignment_targets: true,
            optim: OptimConfig::default(),
            projector_lr: 6e-3,
            epochs: 30,
            batch_size: 8,
            train_examples: 400,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_ce, self.lambda_wkd, self.lambda_dtw];
        if lambdas.iter().any(|l| !(*l >= 0.0)) || lambdas.iter().all(|l| *l == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss coefficients must be nonnegative with at least one positive, got {lambdas:?}"
            )));
        }
        if !(self.temperature > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument("temperature and gamma must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    /// Whether any term needs the teacher.
    pub fn uses_teacher(&self) -> bool {
        self.lambda_wkd > 0.0 || self.lambda_dtw > 0.0
    }
}

/// Named objective variants; each maps onto [`TrainConfig`] settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Entropy weights with the confidence gate plus banded Soft-DTW.
    Dwa,
    /// Unit-weight dual-space KD, no sequence alignment.
    Dskd,
    /// Cross-entropy only; the teacher is never run.
    Sft,
    /// Entropy weights without gate, no sequence alignment.
    EwOnly,
    /// Unit weights plus unbanded Soft-DTW.
    DtwOnly,
    /// Unit weights plus banded Soft-DTW.
    BdtwOnly,
    /// Entropy weights without gate plus banded Soft-DTW.
    NoGate,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Dwa,
        Mode::Dskd,
        Mode::Sft,
        Mode::EwOnly,
        Mode::DtwOnly,
        Mode::BdtwOnly,
        Mode::NoGate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Dwa => "dwa",
            Mode::Dskd => "dskd",
            Mode::Sft => "sft",
            Mode::EwOnly => "ew-only",
            Mode::DtwOnly => "dtw-only",
            Mode::BdtwOnly => "bdtw-only",
            Mode::NoGate => "no-gate",
        }
    }

    pub fn parse(name: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == name)
    }

    /// `base` with the weighting scheme and loss terms this mode selects.
    /// λ values that the mode keeps come from `base`.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        use StudentWeighting as S;
        use TeacherWeighting as T;
        let mut c = base.clone();
        let (sw, tw, dtw, banded) = match self {
            Mode::Dwa => (S::EntropyGate, T::Entropy, true, true),
            Mode::Dskd => (S::Unit, T::Unit, false, false),
            Mode::Sft => (S::Unit, T::Unit, false, false),
            Mode::EwOnly => (S::Entropy, T::Entropy, false, false),
            Mode::DtwOnly => (S::Unit, T::Unit, true, false),
            Mode::BdtwOnly => (S::Unit, T::Unit, true, true),
            Mode::NoGate => (S::Entropy, T::Entropy, true, true),
        };
        c.student_weighting = sw;
        c.teacher_weighting = tw;
        if !dtw {
            c.lambda_dtw = 0.0;
        }
        if !banded {
            c.band.penalty = 0.0;
        }
        if self == Mode::Sft {
            c.lambda_wkd = 0.0;
            c.lambda_dtw = 0.0;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    /// Number of test examples to score (0 = all).
    pub max_examples: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub rouge_beta: f64,
    pub structure_sentences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            max_examples: 200,
            max_new_tokens: 40,
            temperature: 1.0,
            top_p: 1.0,
            rouge_beta: 1.2,
            structure_sentences: 100,
        }
    }
}
