//! Component ablation and the negative-descriptor probe.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{Component, LossToggles};
use crate::metrics::{evaluate, MetricsReport, QueryFilter};
use crate::model::ModelParams;
use crate::similarity::Similarity;
use crate::synth::{with_negative_descriptors, DatasetManifest};
use crate::train::{train, RunRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationRow {
    Baseline,
    Dts,
    Diac,
    Siam,
    Dapl,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] =
        [AblationRow::Baseline, AblationRow::Dts, AblationRow::Diac, AblationRow::Siam, AblationRow::Dapl, AblationRow::Full];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Baseline => "baseline",
            AblationRow::Dts => "+dts",
            AblationRow::Diac => "+diac",
            AblationRow::Siam => "+siam",
            AblationRow::Dapl => "+dapl",
            AblationRow::Full => "full",
        }
    }

    /// Rows without the tokenwise matching loss score pairs by the cosine
    /// of their global tokens.
    pub fn similarity(self) -> Similarity {
        match self {
            AblationRow::Dts | AblationRow::Full => Similarity::Tokenwise,
            _ => Similarity::Global,
        }
    }

    pub fn toggles(self) -> LossToggles {
        use Component::*;
        let extra: &[Component] = match self {
            AblationRow::Baseline | AblationRow::Dts => &[],
            AblationRow::Diac => &[Diac],
            AblationRow::Siam => &[Siam],
            AblationRow::Dapl | AblationRow::Full => &[Diac, Siam, Mapm],
        };
        let mut t = LossToggles::only(&[Dts, Mlm, Id]);
        for &c in extra {
            t.set(c, true);
        }
        t
    }

    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        TrainConfig { similarity: self.similarity(), loss_toggles: self.toggles(), ..*base }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationEntry {
    pub row: AblationRow,
    pub config: TrainConfig,
    pub config_hash: String,
    pub record: RunRecord,
    pub params: ModelParams,
    pub report: MetricsReport,
}

/// Trains one model per row on `train_split` and evaluates each on
/// `test_split` under `filter`.
pub fn run_ablation(
    train_split: &DatasetManifest,
    test_split: &DatasetManifest,
    base: &TrainConfig,
    filter: QueryFilter,
    rows: &[AblationRow],
) -> Result<Vec<AblationEntry>> {
    rows.iter()
        .map(|&row| {
            let config = row.config(base);
            let (trainer, record) = train(train_split, &config)?;
            let report = evaluate(&trainer.params, test_split, config.similarity, filter)?;
            Ok(AblationEntry { row, config_hash: config.config_hash(), config, record, params: trainer.params, report })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeReport {
    pub num_neg: usize,
    pub filter: QueryFilter,
    pub without: MetricsReport,
    pub with: MetricsReport,
    /// `with - without`.
    pub delta: MetricsReport,
}

/// Evaluates once on the original captions and once with `num_neg` true
/// negative descriptors appended to every query.
pub fn negative_descriptor_probe(
    params: &ModelParams,
    manifest: &DatasetManifest,
    similarity: Similarity,
    filter: QueryFilter,
    num_neg: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let without = evaluate(params, manifest, similarity, filter)?;
    let with = if num_neg == 0 {
        without.clone()
    } else {
        evaluate(params, &with_negative_descriptors(manifest, num_neg, seed)?, similarity, filter)?
    };
    Ok(ProbeReport { num_neg, filter, delta: with.delta(&without), without, with })
}
