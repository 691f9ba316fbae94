use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};

use ctkd_cli::{
    cmd_distill, cmd_dump_alignment, cmd_evaluate, cmd_gradcheck, cmd_prepare, cmd_pretrain_teacher, exit_code, Common,
};
use ctkd_core::train::Mode;

/// Cross-tokenizer distillation between a pair-merge teacher and a
/// character-level student.
#[derive(Debug, Parser)]
#[command(name = "ctkd", version)]
struct Cli {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (overrides the config seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the corpus splits and train both tokenizers.
    Prepare {
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the teacher until the perplexity threshold is met.
    PretrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student under one of the objective modes.
    Distill {
        #[arg(long, default_value = "dwa", value_parser = parse_mode)]
        mode: Mode,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a distilled student on the test split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// A loss term, `kd`, `softdtw`, `total` or `all`.
        #[arg(long, default_value = "all")]
        component: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Coordinates sampled per instance.
        #[arg(long, default_value_t = 40)]
        samples: usize,
    },
    /// Write cost, band and alignment matrices for one training example.
    DumpAlignment {
        #[arg(long)]
        example: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode `{s}` (expected one of {})", names.join(", "))
    })
}

fn run(cli: Cli) -> Result<()> {
    let common = || Common::load(cli.config.clone(), cli.seed, cli.force);
    match &cli.command {
        Command::Prepare { out } => {
            let dir = cmd_prepare(&common()?, out)?;
            println!("prepared {}", dir.display());
        }
        Command::PretrainTeacher { data, out } => {
            let dir = cmd_pretrain_teacher(&common()?, data, out)?;
            println!("teacher written to {}", dir.display());
        }
        Command::Distill {
            mode,
            data,
            teacher,
            out,
        } => {
            let dir = cmd_distill(&common()?, *mode, data, teacher.as_deref(), out)?;
            println!("{} run written to {}", mode.name(), dir.display());
        }
        Command::Evaluate {
            data,
            teacher,
            student,
            out,
        } => {
            let s = cmd_evaluate(&common()?, data, teacher, student, out)?;
            println!(
                "rouge_l {:.4}  median d_cosine {:.4}  median d_product {:.4}",
                s.rouge_l, s.median_cosine, s.median_product
            );
        }
        Command::Gradcheck {
            component,
            seeds,
            samples,
        } => {
            if *seeds == 0 || *samples == 0 {
                return Err(anyhow!(ctkd_cli::UsageError("--seeds and --samples must be positive".into())));
            }
            cmd_gradcheck(component, *seeds, *samples)?;
        }
        Command::DumpAlignment {
            example,
            data,
            teacher,
            student,
            out,
        } => {
            let dir = cmd_dump_alignment(&common()?, data, teacher, student, *example, out)?;
            println!("alignment written to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
