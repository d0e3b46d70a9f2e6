//! File-level wrappers around generation, training, evaluation and the
//! experiments.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use attrank_core::experiments::{negative_descriptor_probe, run_ablation, AblationRow, ProbeReport};
use attrank_core::metrics::{MetricsReport, QueryFilter};
use attrank_core::model::{ModelConfig, ModelParams};
use attrank_core::similarity::Similarity;
use attrank_core::synth::{generate_dataset, DatasetManifest, SynthConfig};
use attrank_core::train::{RunRecord, StepLog, TrainConfig, Trainer};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate_parallel, has_queries};
use crate::manifest::{load_manifest, save_manifest};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const TABLE_FILE: &str = "attributes.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_LOG_FILE: &str = "train_log.csv";
pub const RUN_FILE: &str = "run.json";

pub const LOSS_LOG_HEADER: [&str; 9] = ["step", "lr", "L_dts", "L_diac", "L_siam", "L_mapm", "L_mlm", "L_id", "L_total"];
pub const ABLATION_HEADER: [&str; 10] =
    ["run_id", "config_hash", "num_queries", "R1", "R5", "R10", "mAP", "mINP", "confusable_R1", "confusable_neg_R1"];

/// Negative descriptors appended by the probe and the ablation table.
pub const PROBE_NEGATIVES: usize = 2;

/// A directory resolves to its `file`; anything else is taken as is.
pub fn resolve(data: &Path, file: &str) -> PathBuf {
    if data.is_dir() {
        data.join(file)
    } else {
        data.to_path_buf()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.into(), reason: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenSummary {
    pub train: PathBuf,
    pub test: PathBuf,
    pub attribute_table: PathBuf,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Writes both splits and the attribute table into `out`.
pub fn gen_data(cfg: &SynthConfig, out: &Path) -> Result<GenSummary> {
    let d_in = ModelConfig::desk(1, 1).patch_dim;
    let data = generate_dataset(cfg, d_in)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let s = GenSummary {
        train: out.join(TRAIN_FILE),
        test: out.join(TEST_FILE),
        attribute_table: out.join(TABLE_FILE),
        train_samples: data.train.samples.len(),
        test_samples: data.test.samples.len(),
    };
    save_manifest(&data.train, &s.train)?;
    save_manifest(&data.test, &s.test)?;
    let mut w = create(&s.attribute_table)?;
    serde_json::to_writer_pretty(&mut w, &data.train.attribute_table)
        .map_err(|e| Error::Format { path: s.attribute_table.clone(), reason: e.to_string() })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(&s.attribute_table, e))?;
    Ok(s)
}

pub fn write_loss_log<W: Write>(steps: &[StepLog], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOSS_LOG_HEADER)?;
    for s in steps {
        let l = &s.losses;
        let mut rec = vec![s.step.to_string()];
        rec.extend([s.lr, l.dts, l.diac, l.siam, l.mapm, l.mlm, l.id, l.total].iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains on `train`, optionally evaluating on `test`, and writes the
/// loss log, checkpoint and run record into `out`.
pub fn train_to_dir(
    cfg: &TrainConfig,
    train: &DatasetManifest,
    test: Option<&DatasetManifest>,
    out: &Path,
) -> Result<RunRecord> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = Trainer::for_manifest(*cfg, train)?;
    let filter = test.map(|t| if has_queries(t, QueryFilter::NonConfusable) { QueryFilter::NonConfusable } else { QueryFilter::All });
    let mut record = trainer.fit(train, test.zip(filter), None)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    Checkpoint::from_trainer(&trainer).save(&ckpt)?;
    record.final_checkpoint = Some(ckpt.display().to_string());
    let log = out.join(LOSS_LOG_FILE);
    write_loss_log(&record.steps, create(&log)?).map_err(|e| csv_err(&log, e))?;
    let run = out.join(RUN_FILE);
    let mut w = create(&run)?;
    serde_json::to_writer_pretty(&mut w, &RunSummary::of(&record))
        .map_err(|e| Error::Format { path: run.clone(), reason: e.to_string() })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(&run, e))?;
    Ok(record)
}

/// The run record without per-step losses, which live in the CSV log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary<'a> {
    pub config_hash: &'a str,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub final_checkpoint: Option<&'a str>,
    pub evals: &'a [attrank_core::train::EvalLog],
}

impl<'a> RunSummary<'a> {
    pub fn of(r: &'a RunRecord) -> Self {
        RunSummary {
            config_hash: &r.config_hash,
            steps: r.steps.len(),
            final_loss: r.steps.last().map(|s| s.losses.total),
            final_checkpoint: r.final_checkpoint.as_deref(),
            evals: &r.evals,
        }
    }
}

/// Reports for every query filter that admits at least one caption.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub scorer: Similarity,
    pub all: MetricsReport,
    pub confusable: Option<MetricsReport>,
    pub non_confusable: Option<MetricsReport>,
}

pub fn eval_all(params: &ModelParams, m: &DatasetManifest, scorer: Similarity, threads: usize) -> Result<EvalSummary> {
    let run = |f| -> Result<Option<MetricsReport>> {
        if has_queries(m, f) {
            evaluate_parallel(params, m, scorer, f, threads).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(EvalSummary {
        scorer,
        all: evaluate_parallel(params, m, scorer, QueryFilter::All, threads)?,
        confusable: run(QueryFilter::Confusable)?,
        non_confusable: run(QueryFilter::NonConfusable)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSummary {
    pub all: ProbeReport,
    pub confusable: Option<ProbeReport>,
}

pub fn neg_probe(params: &ModelParams, m: &DatasetManifest, scorer: Similarity, num_neg: usize, seed: u64) -> Result<ProbeSummary> {
    let confusable = if has_queries(m, QueryFilter::Confusable) {
        Some(negative_descriptor_probe(params, m, scorer, QueryFilter::Confusable, num_neg, seed)?)
    } else {
        None
    };
    Ok(ProbeSummary { all: negative_descriptor_probe(params, m, scorer, QueryFilter::All, num_neg, seed)?, confusable })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationLine {
    pub run_id: String,
    pub config_hash: String,
    pub all: MetricsReport,
    pub confusable: Option<ProbeReport>,
}

/// Trains and scores the six ablation rows. `log` receives one line per
/// finished row.
pub fn ablate(
    base: &TrainConfig,
    train: &DatasetManifest,
    test: &DatasetManifest,
    mut log: impl FnMut(&AblationLine),
) -> Result<Vec<AblationLine>> {
    let mut lines = Vec::new();
    for row in AblationRow::ALL {
        let entry = run_ablation(train, test, base, QueryFilter::All, &[row])?.remove(0);
        let confusable = if has_queries(test, QueryFilter::Confusable) {
            Some(negative_descriptor_probe(
                &entry.params,
                test,
                entry.config.similarity,
                QueryFilter::Confusable,
                PROBE_NEGATIVES,
                base.seed,
            )?)
        } else {
            None
        };
        let line = AblationLine { run_id: row.name().into(), config_hash: entry.config_hash, all: entry.report, confusable };
        log(&line);
        lines.push(line);
    }
    Ok(lines)
}

pub fn write_ablation_csv<W: Write>(lines: &[AblationLine], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ABLATION_HEADER)?;
    for l in lines {
        let r = &l.all;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            l.run_id.clone(),
            l.config_hash.clone(),
            r.num_queries.to_string(),
            r.rank_at[&1].to_string(),
            r.rank_at[&5].to_string(),
            r.rank_at[&10].to_string(),
            r.map.to_string(),
            r.minp.to_string(),
            opt(l.confusable.as_ref().map(|p| p.without.rank1())),
            opt(l.confusable.as_ref().map(|p| p.with.rank1())),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_split(data: &Path, file: &str) -> Result<DatasetManifest> {
    load_manifest(&resolve(data, file))
}
