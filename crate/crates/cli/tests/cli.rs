use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use ctkd_cli::files;
use ctkd_core::tokenizer::{CharTokenizer, PairTokenizer};
use ctkd_core::train::corpus::read_examples;
use ctkd_core::train::Config;

fn ctkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctkd")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.corpus.examples = 200;
    cfg.corpus.words = 6;
    cfg.teacher.width = 16;
    cfg.teacher.layers = 1;
    cfg.student.width = 8;
    cfg.student.layers = 1;
    cfg.pretrain.min_epochs = 1;
    cfg.pretrain.max_epochs = 40;
    cfg.distill.epochs = 1;
    cfg.distill.train_examples = 8;
    cfg.eval.seeds = vec![1];
    cfg.eval.max_examples = 4;
    cfg.eval.structure_sentences = 4;
    cfg
}

/// Prepared data, a teacher and a dwa student shared by the tests below.
struct Pipeline {
    _root: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
    teacher: PathBuf,
    student: PathBuf,
}

fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let config = root.path().join("tiny.toml");
        std::fs::write(&config, tiny_config().to_toml_string()).unwrap();
        let (data, teacher, student) = (root.path().join("data"), root.path().join("teacher"), root.path().join("student"));
        let c = s(&config);
        for args in [
            vec!["--config", c, "prepare", "--out", s(&data)],
            vec!["--config", c, "pretrain-teacher", "--data", s(&data), "--out", s(&teacher)],
            vec!["--config", c, "distill", "--mode", "dwa", "--data", s(&data), "--teacher", s(&teacher), "--out", s(&student)],
        ] {
            let out = ctkd(&args);
            assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        }
        Pipeline {
            _root: root,
            config,
            data,
            teacher,
            student,
        }
    })
}

fn read_grid(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&ctkd(&["--help"])), 0);
    assert_eq!(code(&ctkd(&["frobnicate"])), 1);
    assert_eq!(code(&ctkd(&["distill", "--mode", "nope", "--data", "x", "--out", "y"])), 1);
    let out = ctkd(&["gradcheck", "--component", "bogus"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn missing_inputs_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nowhere");
    assert_eq!(code(&ctkd(&["--config", s(&nowhere), "prepare", "--out", s(&dir.path().join("o"))])), 3);
    let out = ctkd(&["pretrain-teacher", "--data", s(&nowhere), "--out", s(&dir.path().join("t"))]);
    assert_eq!(code(&out), 3);
    let p = pipeline();
    let out = ctkd(&[
        "--config",
        s(&p.config),
        "distill",
        "--data",
        s(&p.data),
        "--teacher",
        s(&nowhere),
        "--out",
        s(&dir.path().join("d")),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn distill_without_teacher_is_a_usage_error_except_for_sft() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let c = s(&p.config);
    let out = ctkd(&["--config", c, "distill", "--mode", "dwa", "--data", s(&p.data), "--out", s(&dir.path().join("a"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--teacher"));
    let out = ctkd(&["--config", c, "distill", "--mode", "sft", "--data", s(&p.data), "--out", s(&dir.path().join("b"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("b").join(files::STUDENT_CKPT).exists());
    assert!(!dir.path().join("b").join(files::WEIGHTS).exists());
}

#[test]
fn prepare_is_deterministic_and_refuses_to_overwrite() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again");
    let c = s(&p.config);
    assert_eq!(code(&ctkd(&["--config", c, "prepare", "--out", s(&again)])), 0);
    for name in [
        files::TRAIN,
        files::VALID,
        files::TEST,
        files::STUDENT_VOCAB,
        files::TEACHER_ALPHABET,
        files::TEACHER_MERGES,
        files::TEACHER_VOCAB,
        files::CONFIG,
    ] {
        assert_eq!(std::fs::read(p.data.join(name)).unwrap(), std::fs::read(again.join(name)).unwrap(), "{name}");
    }

    let out = ctkd(&["--config", c, "prepare", "--out", s(&again)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    assert_eq!(code(&ctkd(&["--config", c, "--force", "prepare", "--out", s(&again)])), 0);

    let other = dir.path().join("other");
    assert_eq!(code(&ctkd(&["--config", c, "--seed", "99", "prepare", "--out", s(&other)])), 0);
    assert_ne!(std::fs::read(p.data.join(files::TRAIN)).unwrap(), std::fs::read(other.join(files::TRAIN)).unwrap());
}

#[test]
fn split_sizes_and_tokenizers_round_trip() {
    let p = pipeline();
    let cfg = tiny_config();
    let train = read_examples(&p.data.join(files::TRAIN)).unwrap();
    let valid = read_examples(&p.data.join(files::VALID)).unwrap();
    let test = read_examples(&p.data.join(files::TEST)).unwrap();
    let n = cfg.corpus.examples;
    assert_eq!(train.len(), (n as f64 * cfg.corpus.train_fraction).floor() as usize);
    assert_eq!(valid.len(), (n as f64 * cfg.corpus.valid_fraction).floor() as usize);
    assert_eq!(train.len() + valid.len() + test.len(), n);

    let texts: Vec<String> = train.iter().map(|e| e.text()).collect();
    let stok = CharTokenizer::load(&p.data.join(files::STUDENT_VOCAB)).unwrap();
    assert_eq!(stok.vocab(), CharTokenizer::from_corpus(&texts).unwrap().vocab());
    let ttok = PairTokenizer::load(&p.data.join(files::TEACHER_ALPHABET), &p.data.join(files::TEACHER_MERGES)).unwrap();
    let retrained = PairTokenizer::train(&texts, cfg.tokenizer.merges).unwrap();
    assert_eq!(ttok.vocab(), retrained.vocab());
    for t in texts.iter().take(20) {
        assert_eq!(ttok.encode(t).unwrap(), retrained.encode(t).unwrap());
    }
}

#[test]
fn distill_writes_logs_and_epoch_checkpoints() {
    let p = pipeline();
    let losses = std::fs::read_to_string(p.student.join(files::LOSSES)).unwrap();
    let header: Vec<&str> = losses.lines().next().unwrap().split(',').collect();
    for col in ["ce", "kd_student", "kd_teacher", "ce_teacher_to_student", "ndtw_embed", "ndtw_hidden", "total"] {
        assert!(header.contains(&col), "{col} missing from {header:?}");
    }
    assert_eq!(losses.lines().count(), 1 + 1);
    assert!(p.student.join(files::epoch_ckpt(0)).exists());
    let weights = std::fs::read_to_string(p.student.join(files::WEIGHTS)).unwrap();
    let sum: f64 = weights.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap()).sum();
    let positions = weights.lines().skip(1).filter(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap() > 0.0).count();
    assert!((sum - positions as f64).abs() < 1e-6);
}

#[test]
fn evaluate_writes_scores_and_structure_distances() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval");
    let args = [
        "--config",
        s(&p.config),
        "evaluate",
        "--data",
        s(&p.data),
        "--teacher",
        s(&p.teacher),
        "--student",
        s(&p.student),
        "--out",
        s(&out),
    ];
    let o = ctkd(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join(files::SUMMARY)).unwrap()).unwrap();
    let rouge = summary["rouge_l"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rouge));
    assert_eq!(std::fs::read_to_string(out.join(files::STRUCTURE)).unwrap().lines().count(), 1 + 4);
    assert_eq!(std::fs::read_to_string(out.join(files::EVAL)).unwrap().lines().count(), 1 + 4);
}

#[test]
fn dump_alignment_contracts() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let dump = |name: &str, example: &str| {
        let out = dir.path().join(name);
        let o = ctkd(&[
            "--config",
            s(&p.config),
            "dump-alignment",
            "--example",
            example,
            "--data",
            s(&p.data),
            "--teacher",
            s(&p.teacher),
            "--student",
            s(&p.student),
            "--out",
            s(&out),
        ]);
        (out, o)
    };
    let (a, o) = dump("a", "2");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let penalty = tiny_config().distill.band.penalty;
    for level in ["embed", "hidden"] {
        let cost = read_grid(&a.join(format!("{level}_cost.csv")));
        let banded = read_grid(&a.join(format!("{level}_banded_cost.csv")));
        let alignment = read_grid(&a.join(format!("{level}_alignment.csv")));
        for ((c, b), al) in cost.iter().flatten().zip(banded.iter().flatten()).zip(alignment.iter().flatten()) {
            let d = b - c;
            assert!(d == 0.0 || (d - penalty).abs() < 1e-12, "{d}");
            assert!((-1e-12..=1.0 + 1e-12).contains(al), "{al}");
        }
        assert!((alignment[0][0] - 1.0).abs() < 1e-9);
    }
    let band = std::fs::read_to_string(a.join("band.csv")).unwrap();
    assert_eq!(band.lines().count() - 1, read_grid(&a.join("embed_cost.csv")).len());

    let (b, _) = dump("b", "2");
    for name in ["attention.csv", "band.csv", "embed_alignment.csv", "hidden_banded_cost.csv"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    let (_, o) = dump("c", "100000");
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("out of range"));
}

#[test]
fn gradcheck_filter_runs_only_the_alignment_terms() {
    let out = ctkd(&["gradcheck", "--component", "softdtw", "--seeds", "2", "--samples", "5"]);
    assert_eq!(code(&out), 0);
    let report = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = report.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(rows, ["ndtw_embed", "ndtw_hidden"]);
}
