//! Command implementations behind the `ctkd` binary.
//!
//! Every command writes `manifest.json` into its output directory before any
//! other file, then its artifacts. Inputs are read from directories produced
//! by earlier commands:
//!
//! ```text
//! prepare           --out data/
//! pretrain-teacher  --data data/ --out teacher/
//! distill           --data data/ --teacher teacher/ --mode dwa --out run/
//! evaluate          --data data/ --teacher teacher/ --student run/ --out eval/
//! dump-alignment    --data data/ --teacher teacher/ --student run/ --example 0 --out dump/
//! gradcheck         --component all
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ctkd_core::cma::ProjectorSet;
use ctkd_core::lm::{Checkpoint, LmConfig, TransformerLm};
use ctkd_core::softdtw::{build_band, ndtw, BandSpec};
use ctkd_core::tokenizer::{CharTokenizer, PairTokenizer};
use ctkd_core::train::config::Config;
use ctkd_core::train::corpus::{examples_to_tsv, generate_corpus, read_examples};
use ctkd_core::train::distill::{pretrain_teacher, run_distillation, Distiller, StepRecord};
use ctkd_core::train::eval::{evaluate, structure_study};
use ctkd_core::train::gradcheck::{run_suite, Component, ComponentResult};
use ctkd_core::train::metrics::median;
use ctkd_core::train::objective::{sequence_loss, EncodedExample, TeacherView};
use ctkd_core::train::{Example, Mode};
use ctkd_core::numerics::ValueGrid;
use ctkd_core::cma::{build_cma, project_teacher_reprs, CmaInputs};

pub mod files {
    pub const MANIFEST: &str = "manifest.json";
    pub const CONFIG: &str = "config.toml";
    pub const TRAIN: &str = "train.tsv";
    pub const VALID: &str = "valid.tsv";
    pub const TEST: &str = "test.tsv";
    pub const STUDENT_VOCAB: &str = "student_vocab.txt";
    pub const TEACHER_ALPHABET: &str = "teacher_alphabet.txt";
    pub const TEACHER_MERGES: &str = "teacher_merges.txt";
    pub const TEACHER_VOCAB: &str = "teacher_vocab.txt";
    pub const TEACHER_CKPT: &str = "teacher.ckpt";
    pub const PRETRAIN_LOG: &str = "pretrain.csv";
    pub const STUDENT_CKPT: &str = "student.ckpt";
    pub const LOSSES: &str = "losses.csv";
    pub const WEIGHTS: &str = "weights.csv";
    pub const EVAL: &str = "eval.csv";
    pub const STRUCTURE: &str = "structure.csv";
    pub const SUMMARY: &str = "summary.json";

    pub fn epoch_ckpt(epoch: usize) -> String {
        format!("epoch-{epoch:03}.ckpt")
    }
}

/// Settings shared by every command.
#[derive(Debug, Clone)]
pub struct Common {
    pub config_path: Option<PathBuf>,
    pub config: Config,
    pub seed: u64,
    pub force: bool,
}

impl Common {
    /// Loads `config_path` (defaults when absent); `seed` overrides the
    /// config seed.
    pub fn load(config_path: Option<PathBuf>, seed: Option<u64>, force: bool) -> Result<Self> {
        let config = match &config_path {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        let seed = seed.unwrap_or(config.seed);
        Ok(Self {
            config_path,
            config,
            seed,
            force,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub git_describe: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub output_dir: PathBuf,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// An output directory with its manifest already written.
pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Creates `path` (refusing a non-empty one unless `force`) and writes
    /// the manifest and config snapshot.
    pub fn create(path: &Path, command: &str, common: &Common) -> Result<Self> {
        if path.exists() {
            let non_empty = fs::read_dir(path)?.next().is_some();
            if non_empty && !common.force {
                bail!(UsageError(format!(
                    "output directory {} is not empty (pass --force to overwrite)",
                    path.display()
                )));
            }
        }
        fs::create_dir_all(path)?;
        let manifest = RunManifest {
            command: command.to_string(),
            config_path: common.config_path.clone(),
            seed: common.seed,
            git_describe: git_describe(),
            started_at: now(),
            finished_at: None,
            output_dir: path.to_path_buf(),
        };
        let dir = Self {
            path: path.to_path_buf(),
            manifest,
        };
        dir.write_manifest()?;
        let mut snapshot = common.config.clone();
        snapshot.seed = common.seed;
        dir.write(files::CONFIG, snapshot.to_toml_string())?;
        Ok(dir)
    }

    fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.path.join(files::MANIFEST), text + "\n")?;
        Ok(())
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.file(name), contents).with_context(|| format!("writing {name}"))
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.finished_at = Some(now());
        self.write_manifest()?;
        Ok(self.path)
    }
}

/// Bad invocation or refused overwrite; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Process exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ctkd_core::Error>() {
            if e.is_numeric() {
                return 2;
            }
            if matches!(e, ctkd_core::Error::MissingArtifact(_)) {
                return 3;
            }
        }
        if cause.downcast_ref::<GradcheckFailed>().is_some() {
            return 2;
        }
    }
    1
}

/// Corpus splits and both tokenizers, as written by `prepare`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    pub student_tok: CharTokenizer,
    pub teacher_tok: PairTokenizer,
}

impl Prepared {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: read_examples(&dir.join(files::TRAIN))?,
            valid: read_examples(&dir.join(files::VALID))?,
            test: read_examples(&dir.join(files::TEST))?,
            student_tok: CharTokenizer::load(&dir.join(files::STUDENT_VOCAB))?,
            teacher_tok: PairTokenizer::load(&dir.join(files::TEACHER_ALPHABET), &dir.join(files::TEACHER_MERGES))?,
        })
    }

    pub fn teacher_ids(&self, examples: &[Example]) -> Result<Vec<Vec<usize>>> {
        Ok(examples
            .iter()
            .map(|e| self.teacher_tok.encode(&e.text()).map(|s| s.ids))
            .collect::<ctkd_core::Result<_>>()?)
    }

    /// The first `n` training examples (all when `n == 0`), in both tokenizations.
    pub fn encoded_train(&self, n: usize) -> Result<Vec<EncodedExample>> {
        let n = if n == 0 { self.train.len() } else { n.min(self.train.len()) };
        Ok(self.train[..n]
            .iter()
            .map(|e| EncodedExample::new(e, &self.student_tok, &self.teacher_tok))
            .collect::<ctkd_core::Result<_>>()?)
    }
}

/// Writes the corpus splits and both tokenizers.
pub fn cmd_prepare(common: &Common, out: &Path) -> Result<PathBuf> {
    let dir = RunDir::create(out, "prepare", common)?;
    let cfg = &common.config;
    let corpus = generate_corpus(&cfg.corpus, common.seed)?;
    dir.write(files::TRAIN, examples_to_tsv(&corpus.train))?;
    dir.write(files::VALID, examples_to_tsv(&corpus.valid))?;
    dir.write(files::TEST, examples_to_tsv(&corpus.test))?;
    let texts: Vec<String> = corpus.train.iter().map(Example::text).collect();
    let student_tok = CharTokenizer::from_corpus(&texts)?;
    student_tok.vocab().save(&dir.file(files::STUDENT_VOCAB))?;
    let teacher_tok = PairTokenizer::train(&texts, cfg.tokenizer.merges)?;
    teacher_tok.save(&dir.file(files::TEACHER_ALPHABET), &dir.file(files::TEACHER_MERGES))?;
    teacher_tok.vocab().save(&dir.file(files::TEACHER_VOCAB))?;
    dir.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TeacherHeader {
    model: LmConfig,
    unigram_ppl: f64,
    valid_ppl: f64,
}

pub fn load_teacher(dir: &Path) -> Result<TransformerLm> {
    let ck = Checkpoint::load(&dir.join(files::TEACHER_CKPT))?;
    let header: TeacherHeader = serde_json::from_value(ck.config.clone()).context("teacher checkpoint header")?;
    Ok(TransformerLm::from_checkpoint(header.model, "", &ck)?)
}

/// Pretrains the teacher on the training split until the perplexity
/// threshold is met.
pub fn cmd_pretrain_teacher(common: &Common, data: &Path, out: &Path) -> Result<PathBuf> {
    let prepared = Prepared::load(data)?;
    let dir = RunDir::create(out, "pretrain-teacher", common)?;
    let cfg = &common.config;
    let lm = cfg.teacher.lm_config(prepared.teacher_tok.vocab().len(), common.seed);
    let train = prepared.teacher_ids(&prepared.train)?;
    let valid = prepared.teacher_ids(&prepared.valid)?;
    let (teacher, report) = pretrain_teacher(&cfg.pretrain, lm.clone(), &train, &valid)?;
    let mut log = String::from("epoch,train_loss,valid_ppl\n");
    for e in &report.epochs {
        writeln!(log, "{},{:?},{:?}", e.epoch, e.train_loss, e.valid_ppl)?;
    }
    dir.write(files::PRETRAIN_LOG, log)?;
    let header = TeacherHeader {
        model: lm,
        unigram_ppl: report.unigram_ppl,
        valid_ppl: report.final_valid_ppl(),
    };
    let mut ck = Checkpoint::new(serde_json::to_value(&header)?);
    teacher.to_checkpoint("", &mut ck);
    ck.save(&dir.file(files::TEACHER_CKPT))?;
    dir.finish()
}

pub const STUDENT_PREFIX: &str = "student/";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StudentHeader {
    model: LmConfig,
    teacher_width: usize,
    mode: String,
    epoch: usize,
}

fn student_checkpoint(d: &Distiller, mode: Mode, epoch: usize) -> Checkpoint {
    let header = StudentHeader {
        model: d.student.config().clone(),
        teacher_width: d.projectors.teacher_width(),
        mode: mode.name().to_string(),
        epoch,
    };
    let mut ck = Checkpoint::new(serde_json::to_value(&header).expect("header serializes"));
    d.student.to_checkpoint(STUDENT_PREFIX, &mut ck);
    d.projectors.to_checkpoint(&mut ck);
    ck
}

/// Loads the final student and projectors of a distillation run.
pub fn load_student(dir: &Path) -> Result<(TransformerLm, ProjectorSet)> {
    let ck = Checkpoint::load(&dir.join(files::STUDENT_CKPT))?;
    let header: StudentHeader = serde_json::from_value(ck.config.clone()).context("student checkpoint header")?;
    let width = header.model.width;
    let student = TransformerLm::from_checkpoint(header.model, STUDENT_PREFIX, &ck)?;
    let projectors = ProjectorSet::from_checkpoint(width, header.teacher_width, &ck)?;
    Ok((student, projectors))
}

fn csv_floats(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

/// Student training under `mode`. Writes per-step losses, a checkpoint per
/// epoch, the final checkpoint and the student-side token weights of the
/// first training example after training.
pub fn cmd_distill(common: &Common, mode: Mode, data: &Path, teacher_dir: Option<&Path>, out: &Path) -> Result<PathBuf> {
    let cfg = &common.config;
    let train_cfg = mode.apply(&cfg.distill);
    let prepared = Prepared::load(data)?;
    let teacher = if train_cfg.uses_teacher() {
        let dir = teacher_dir.ok_or_else(|| UsageError(format!("--mode {} needs --teacher", mode.name())))?;
        Some(load_teacher(dir)?)
    } else {
        None
    };
    let examples = prepared.encoded_train(train_cfg.train_examples)?;
    let dir = RunDir::create(out, "distill", common)?;
    let student_lm = cfg.student.lm_config(prepared.student_tok.vocab().len(), common.seed);
    let mut final_ck = None;
    let mut weights = None;
    let outcome = run_distillation(&train_cfg, student_lm, teacher.as_ref(), &examples, common.seed, |epoch, d| {
        let ck = student_checkpoint(d, mode, epoch);
        ck.save(&dir.file(&files::epoch_ckpt(epoch)))?;
        if epoch + 1 == train_cfg.epochs {
            final_ck = Some(ck);
        }
        Ok(())
    })?;
    let mut log = StepRecord::csv_header() + "\n";
    for r in &outcome.records {
        log.push_str(&r.csv_row());
        log.push('\n');
    }
    dir.write(files::LOSSES, log)?;
    let final_ck = final_ck.context("distillation ran no epochs")?;
    final_ck.save(&dir.file(files::STUDENT_CKPT))?;

    if let Some(t) = &teacher {
        let view = TeacherView::compute(t, &examples[0])?;
        let settings = ctkd_core::train::ObjectiveSettings::from_config(&train_cfg);
        let out = sequence_loss(&settings, &outcome.student, &outcome.projectors, Some((t, &view)), &examples[0], None, false)?;
        weights = out.diagnostics;
    }
    if let Some(w) = weights {
        let mut csv = String::from("position,entropy,gate,weight,kl\n");
        for i in 0..w.weight.len() {
            writeln!(csv, "{i},{:?},{:?},{:?},{:?}", w.entropy[i], w.gate[i], w.weight[i], w.kl[i])?;
        }
        dir.write(files::WEIGHTS, csv)?;
    }
    dir.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rouge_l: f64,
    pub per_seed: Vec<(u64, f64)>,
    pub median_cosine: f64,
    pub median_product: f64,
}

/// ROUGE-L of sampled responses on the test split and the structure
/// distances to the teacher.
pub fn cmd_evaluate(common: &Common, data: &Path, teacher_dir: &Path, student_dir: &Path, out: &Path) -> Result<EvalSummary> {
    let cfg = &common.config;
    let prepared = Prepared::load(data)?;
    let teacher = load_teacher(teacher_dir)?;
    let (student, _) = load_student(student_dir)?;
    let dir = RunDir::create(out, "evaluate", common)?;
    let report = evaluate(&student, &prepared.student_tok, &prepared.test, &cfg.eval)?;
    dir.write(files::EVAL, report.csv())?;
    let dists = structure_study(
        &student,
        &prepared.student_tok,
        &teacher,
        &prepared.teacher_tok,
        &prepared.test,
        cfg.eval.structure_sentences,
    )?;
    let mut csv = String::from("index,d_cosine,d_product\n");
    for (i, d) in dists.iter().enumerate() {
        writeln!(csv, "{i},{:?},{:?}", d.cosine, d.product)?;
    }
    dir.write(files::STRUCTURE, csv)?;
    let summary = EvalSummary {
        rouge_l: report.mean,
        per_seed: report.per_seed.clone(),
        median_cosine: median(&dists.iter().map(|d| d.cosine).collect::<Vec<_>>()),
        median_product: median(&dists.iter().map(|d| d.product).collect::<Vec<_>>()),
    };
    dir.write(files::SUMMARY, serde_json::to_string_pretty(&summary)? + "\n")?;
    dir.finish()?;
    Ok(summary)
}

/// Some component exceeded the tolerance; maps to exit code 2.
#[derive(Debug)]
pub struct GradcheckFailed(pub Vec<String>);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed for: {}", self.0.join(", "))
    }
}

impl std::error::Error for GradcheckFailed {}

pub fn format_gradcheck(results: &[ComponentResult]) -> String {
    let mut out = format!("{:<24} {:>12} {:>8} {:>6}  status\n", "component", "max_rel_err", "coords", "seeds");
    for r in results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{:<24} {:>12.3e} {:>8} {:>6}  {status}",
            r.component, r.max_rel_err, r.coordinates, r.seeds
        );
    }
    out
}

/// Runs the finite-difference suite on `component` (a term name, a group or
/// `all`) and fails when any result exceeds the tolerance.
pub fn cmd_gradcheck(component: &str, seeds: u64, samples: usize) -> Result<Vec<ComponentResult>> {
    let components = Component::select(component)
        .ok_or_else(|| UsageError(format!("unknown gradcheck component `{component}`")))?;
    let results = run_suite(&components, seeds, samples)?;
    let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| r.component.to_string()).collect();
    print!("{}", format_gradcheck(&results));
    if !failed.is_empty() {
        bail!(GradcheckFailed(failed));
    }
    Ok(results)
}

fn grid_csv(g: &ValueGrid) -> String {
    let mut out = String::new();
    for r in 0..g.rows() {
        out.push_str(&csv_floats(g.row(r)));
        out.push('\n');
    }
    out
}

fn band_csv(band: &BandSpec) -> String {
    let mut out = String::from("row,center,width,entropy\n");
    for i in 0..band.centers.len() {
        let _ = writeln!(out, "{i},{:?},{:?},{:?}", band.centers[i], band.widths[i], band.entropies[i]);
    }
    out
}

/// Cost, banded cost, band and soft alignment matrices for one training
/// example at both the embedding and the hidden level.
pub fn cmd_dump_alignment(
    common: &Common,
    data: &Path,
    teacher_dir: &Path,
    student_dir: &Path,
    example: usize,
    out: &Path,
) -> Result<PathBuf> {
    let cfg = &common.config;
    let prepared = Prepared::load(data)?;
    if example >= prepared.train.len() {
        bail!(UsageError(format!(
            "example {example} out of range (training split has {})",
            prepared.train.len()
        )));
    }
    let teacher = load_teacher(teacher_dir)?;
    let (student, projectors) = load_student(student_dir)?;
    let dir = RunDir::create(out, "dump-alignment", common)?;
    let ex = EncodedExample::new(&prepared.train[example], &prepared.student_tok, &prepared.teacher_tok)?;
    let view = TeacherView::compute(&teacher, &ex)?;
    let trace = student.forward(ex.student_inputs())?;
    let target_emb = student.token_embeddings(ex.student_targets())?;
    let cma = build_cma(
        &CmaInputs {
            student_inputs: &trace.embeddings,
            student_targets: &target_emb,
            student_hidden: &trace.hidden,
            teacher_inputs: &view.embeddings,
            teacher_targets: &view.target_embeddings,
            teacher_hidden: &view.hidden,
        },
        &projectors,
    )?;
    let band = build_band(&cma.attention, cfg.distill.band)?;
    dir.write("attention.csv", grid_csv(&cma.attention))?;
    dir.write("band.csv", band_csv(&band))?;
    let aligned = if cfg.distill.tie_hidden_projector {
        projectors.with_tied_hidden()
    } else {
        projectors
    };
    let (pe, ph) = project_teacher_reprs(&view.embeddings, &view.hidden, &aligned)?;
    for (level, x, y) in [("embed", &trace.embeddings, &pe), ("hidden", &trace.hidden, &ph)] {
        let n = ndtw(x, y, Some(&band), cfg.distill.gamma)?;
        dir.write(&format!("{level}_cost.csv"), grid_csv(&n.cost))?;
        dir.write(&format!("{level}_banded_cost.csv"), grid_csv(&n.banded_cost))?;
        dir.write(&format!("{level}_alignment.csv"), grid_csv(&n.cross.grad))?;
    }
    dir.finish()
}
