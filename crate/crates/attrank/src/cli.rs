//! Command-line entry point. JSON results go to stdout, progress to stderr.
//! Exit codes: 0 success, 1 invalid input or failed check, 2 runtime
//! failure.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use attrank_core::gradcheck::{run_gradcheck, GradcheckConfig};
use attrank_core::losses::Component;
use attrank_core::similarity::Similarity;
use attrank_core::synth::SynthConfig;
use attrank_core::train::TrainConfig;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{load_synth_config, load_train_config};
use crate::error::{Error, Result};
use crate::eval::threads_from_env;
use crate::runners::{self, load_split, TEST_FILE, TRAIN_FILE};

#[derive(Debug, Parser)]
#[command(name = "attrank", version, about = "Attribute-aware text-to-image person retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scorer {
    Tokenwise,
    Global,
}

impl From<Scorer> for Similarity {
    fn from(s: Scorer) -> Self {
        match s {
            Scorer::Tokenwise => Similarity::Tokenwise,
            Scorer::Global => Similarity::Global,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and test manifests plus the attribute table.
    GenData {
        /// Generator config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and loss log.
    Train {
        /// Training config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Data directory or train manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a test manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data directory or test manifest.
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the similarity the checkpoint was trained with.
        #[arg(long, value_enum)]
        scorer: Option<Scorer>,
    },
    /// Finite-difference check of every loss component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        batch_size: usize,
        #[arg(long, hide = true)]
        flip_sign: Option<String>,
    },
    /// Train and score the six ablation rows; CSV on stdout.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Data directory holding both splits.
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint with and without appended negative descriptors.
    NegProbe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = runners::PROBE_NEGATIVES)]
        num_neg: usize,
    },
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialise");
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn component(name: &str) -> Result<Component> {
    Component::ALL
        .iter()
        .copied()
        .find(|c| c.name() == name)
        .ok_or_else(|| Error::Config { field: "flip-sign".into(), reason: format!("unknown component {name:?}") })
}

#[derive(Serialize)]
struct GradcheckOutput {
    seed: u64,
    batch_size: usize,
    tolerance: f64,
    pass: bool,
    components: Vec<attrank_core::gradcheck::ComponentReport>,
}

/// Runs one command; `Ok(false)` means it finished but a check failed.
pub fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = match config {
                Some(p) => load_synth_config(&p)?,
                None => SynthConfig::default(),
            };
            let s = runners::gen_data(&cfg, &out)?;
            eprintln!("wrote {} train and {} test samples to {}", s.train_samples, s.test_samples, out.display());
            print_json(&s)?;
        }
        Command::Train { config, data, out } => {
            let cfg = match config {
                Some(p) => load_train_config(&p)?,
                None => TrainConfig::default(),
            };
            let train = load_split(&data, TRAIN_FILE)?;
            let test_path = data.join(TEST_FILE);
            let test = if data.is_dir() && test_path.exists() { Some(runners::load_split(&data, TEST_FILE)?) } else { None };
            eprintln!("training {} samples for {} epochs (config {})", train.samples.len(), cfg.epochs, cfg.config_hash());
            let record = runners::train_to_dir(&cfg, &train, test.as_ref(), &out)?;
            for e in &record.evals {
                eprintln!("epoch {}: Rank-1 {:.4} mAP {:.4}", e.epoch, e.report.rank1(), e.report.map);
            }
            print_json(&runners::RunSummary::of(&record))?;
        }
        Command::Eval { checkpoint, data, scorer } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let params = ckpt.params().map_err(|reason| Error::Format { path: checkpoint.clone(), reason })?;
            let scorer = scorer.map(Similarity::from).unwrap_or(ckpt.train.map_or(Similarity::Tokenwise, |t| t.config.similarity));
            let test = load_split(&data, TEST_FILE)?;
            print_json(&runners::eval_all(&params, &test, scorer, threads_from_env())?)?;
        }
        Command::Gradcheck { seed, batch_size, flip_sign } => {
            let cfg = GradcheckConfig {
                seed,
                batch_size,
                flip_sign: flip_sign.as_deref().map(component).transpose()?,
                ..GradcheckConfig::default()
            };
            let components = run_gradcheck(&cfg)?;
            for c in &components {
                eprintln!(
                    "{:<5} {} max_rel_err {:.3e} checked {} skipped {}",
                    c.component.name(),
                    if c.pass { "PASS" } else { "FAIL" },
                    c.max_rel_error,
                    c.checked,
                    c.skipped
                );
            }
            let pass = components.iter().all(|c| c.pass);
            print_json(&GradcheckOutput { seed, batch_size, tolerance: cfg.tolerance, pass, components })?;
            return Ok(pass);
        }
        Command::Ablate { config, data } => {
            let base = match config {
                Some(p) => load_train_config(&p)?,
                None => TrainConfig::default(),
            };
            let train = load_split(&data, TRAIN_FILE)?;
            let test = load_split(&data, TEST_FILE)?;
            let lines = runners::ablate(&base, &train, &test, |l| {
                eprintln!("{:<8} Rank-1 {:.4} mAP {:.4}", l.run_id, l.all.rank1(), l.all.map);
            })?;
            runners::write_ablation_csv(&lines, std::io::stdout().lock())
                .map_err(|e| Error::Format { path: "<stdout>".into(), reason: e.to_string() })?;
        }
        Command::NegProbe { checkpoint, data, num_neg } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let params = ckpt.params().map_err(|reason| Error::Format { path: checkpoint.clone(), reason })?;
            let (scorer, seed) = ckpt.train.map_or((Similarity::Tokenwise, 0), |t| (t.config.similarity, t.config.seed));
            let test = load_split(&data, TEST_FILE)?;
            print_json(&runners::neg_probe(&params, &test, scorer, num_neg, seed)?)?;
        }
    }
    Ok(true)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
