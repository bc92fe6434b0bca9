//! `ssg` — train/attack/defend pipeline driver.
//!
//! Subcommands cover each stage (teacher training, student re-training,
//! brute-force attack, defenses, sweeps, metric reports); one `key = value`
//! config file plus a global seed makes every run reproducible bit-for-bit
//! (wall-clock fields aside) at any worker count.

mod artifacts;
mod commands;
mod config;

use artifacts::CliError;
use clap::{Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "ssg",
    version,
    about = "Brute-force attacks on transfer-learned classifiers, and their defenses"
)]
struct Cli {
    /// Run configuration file (`key = value` lines, dotted sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = available parallelism). Results are identical at
    /// any value.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory for artifacts (overridden by SSG_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the source-task teacher and export its feature extractor.
    TrainTeacher,
    /// Re-train a student on the target task from a teacher's extractor.
    Retrain {
        /// Teacher model file (default: <out>/teacher.ssg).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Craft inputs against an extractor and query the student once each.
    Attack {
        /// Extractor model file (default: <out>/extractor.ssg).
        #[arg(long)]
        extractor: Option<PathBuf>,
        /// Student model file (default: <out>/student.ssg).
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Fit the threshold detector and EVM, then evaluate them on crafted
    /// inputs (a saved dump, or a live attack).
    Defend {
        /// Extractor model file (default: <out>/extractor.ssg).
        #[arg(long)]
        extractor: Option<PathBuf>,
        /// Student model file (default: <out>/student.ssg).
        #[arg(long)]
        student: Option<PathBuf>,
        /// IDX dump of crafted inputs; omitted = run the attack live.
        #[arg(long)]
        crafted: Option<PathBuf>,
    },
    /// Run an experiment sweep along one axis.
    Sweep {
        /// Plan file overlaying the config (sweep.axis, sweep.values, ...).
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Recompute metrics from a transcript file.
    Report {
        #[arg(long)]
        transcript: PathBuf,
        /// Target class count (default: inferred from the transcript).
        #[arg(long)]
        classes: Option<usize>,
        /// Output index the student uses as its reject class, if any.
        #[arg(long)]
        reject_index: Option<usize>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p).map_err(|m| CliError::new(2, m))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Ok(env_out) = std::env::var("SSG_OUT") {
        if !env_out.is_empty() {
            cfg.out = PathBuf::from(env_out);
        }
    }
    if cfg.workers > 0 {
        // Ignore the error if a pool already exists (e.g. repeated calls in
        // tests); results do not depend on the pool size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global();
    }

    match cli.cmd {
        Cmd::TrainTeacher => commands::cmd_train_teacher(&cfg),
        Cmd::Retrain { teacher } => commands::cmd_retrain(&cfg, teacher),
        Cmd::Attack { extractor, student } => commands::cmd_attack(&cfg, extractor, student),
        Cmd::Defend {
            extractor,
            student,
            crafted,
        } => commands::cmd_defend(&cfg, extractor, student, crafted),
        Cmd::Sweep { plan } => commands::cmd_sweep(&cfg, plan),
        Cmd::Report {
            transcript,
            classes,
            reject_index,
        } => commands::cmd_report(&cfg, transcript, classes, reject_index),
    }
}
