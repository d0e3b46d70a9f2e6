//! Text-to-image retrieval: ranking, Rank-k, mAP and mINP.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoders::Graph;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::similarity::{pair_score, ScoringTokens, Similarity};
use crate::synth::DatasetManifest;
use crate::tensor::DenseTensor;

pub const REPORTED_RANKS: [usize; 3] = [1, 5, 10];

/// Gallery order for one query and the relevance of each ranked item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingResult {
    pub order: Vec<usize>,
    pub relevant: Vec<bool>,
}

impl RankingResult {
    /// Ranks by descending score, ties by ascending gallery index.
    /// `relevance` is indexed by gallery position.
    pub fn from_scores(scores: &[f64], relevance: &[bool]) -> Result<Self> {
        if scores.is_empty() || scores.len() != relevance.len() {
            return Err(Error::Evaluation(format!("{} scores for {} gallery items", scores.len(), relevance.len())));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score of gallery item {i}")));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let relevant = order.iter().map(|&i| relevance[i]).collect();
        Ok(Self { order, relevant })
    }

    pub fn num_relevant(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }

    /// 1-based rank of the first relevant item.
    pub fn first_hit(&self) -> Option<usize> {
        self.relevant.iter().position(|&r| r).map(|p| p + 1)
    }

    pub fn average_precision(&self) -> f64 {
        let mut hits = 0usize;
        let mut total = 0.0;
        for (p, _) in self.relevant.iter().enumerate().filter(|(_, &r)| r) {
            hits += 1;
            total += hits as f64 / (p + 1) as f64;
        }
        if hits == 0 {
            0.0
        } else {
            total / hits as f64
        }
    }

    /// `|G| / R_hard`, the relevant-set size over the rank of the last
    /// relevant item.
    pub fn inverse_negative_penalty(&self) -> f64 {
        match self.relevant.iter().rposition(|&r| r) {
            Some(p) => self.num_relevant() as f64 / (p + 1) as f64,
            None => 0.0,
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn rank_at_k(results: &[RankingResult], k: usize) -> f64 {
    mean(results.iter().map(|r| if r.relevant.iter().take(k).any(|&x| x) { 1.0 } else { 0.0 }))
}

pub fn mean_average_precision(results: &[RankingResult]) -> f64 {
    mean(results.iter().map(RankingResult::average_precision))
}

pub fn mean_inp(results: &[RankingResult]) -> f64 {
    mean(results.iter().map(RankingResult::inverse_negative_penalty))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub rank_at: BTreeMap<usize, f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mINP")]
    pub minp: f64,
    pub num_queries: usize,
}

impl MetricsReport {
    pub fn from_results(results: &[RankingResult]) -> Self {
        Self {
            rank_at: REPORTED_RANKS.iter().map(|&k| (k, rank_at_k(results, k))).collect(),
            map: mean_average_precision(results),
            minp: mean_inp(results),
            num_queries: results.len(),
        }
    }

    pub fn rank1(&self) -> f64 {
        self.rank_at.get(&1).copied().unwrap_or(0.0)
    }

    /// Entry-wise `self - base`.
    pub fn delta(&self, base: &MetricsReport) -> MetricsReport {
        MetricsReport {
            rank_at: self.rank_at.iter().map(|(k, v)| (*k, v - base.rank_at.get(k).copied().unwrap_or(0.0))).collect(),
            map: self.map - base.map,
            minp: self.minp - base.minp,
            num_queries: self.num_queries,
        }
    }
}

/// Which captions act as queries. The gallery is always every image of the
/// split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryFilter {
    #[default]
    All,
    Confusable,
    NonConfusable,
}

impl QueryFilter {
    pub fn admits(self, confusable: bool) -> bool {
        match self {
            QueryFilter::All => true,
            QueryFilter::Confusable => confusable,
            QueryFilter::NonConfusable => !confusable,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryItem {
    pub image_id: usize,
    pub identity_id: usize,
    pub tokens: ScoringTokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub sample_id: usize,
    pub identity_id: usize,
    pub tokens: ScoringTokens,
}

const ENCODE_CHUNK: usize = 64;

/// Encodes each distinct image of the split once.
pub fn prepare_gallery(params: &ModelParams, manifest: &DatasetManifest) -> Result<Vec<GalleryItem>> {
    let mut seen = BTreeMap::new();
    for s in &manifest.samples {
        seen.entry(s.image_id).or_insert(s);
    }
    let picked: Vec<_> = seen.into_values().collect();
    let mut out = Vec::with_capacity(picked.len());
    for chunk in picked.chunks(ENCODE_CHUNK) {
        let mut g = Graph::new(params, false);
        let patches: Vec<&DenseTensor> = chunk.iter().map(|s| &s.patch_features).collect();
        let enc = g.encode_images(&patches)?;
        for (k, s) in chunk.iter().enumerate() {
            out.push(GalleryItem {
                image_id: s.image_id,
                identity_id: s.identity_id,
                tokens: ScoringTokens::new(&g.sequence(&enc, k))?,
            });
        }
    }
    Ok(out)
}

pub fn prepare_queries(params: &ModelParams, manifest: &DatasetManifest, filter: QueryFilter) -> Result<Vec<Query>> {
    let picked: Vec<_> = manifest.samples.iter().filter(|s| filter.admits(s.confusable)).collect();
    let mut out = Vec::with_capacity(picked.len());
    for chunk in picked.chunks(ENCODE_CHUNK) {
        let ids = chunk.iter().map(|s| manifest.vocab.tokenize(&s.caption)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new(params, false);
        let enc = g.encode_texts(&refs)?;
        for (k, s) in chunk.iter().enumerate() {
            out.push(Query {
                sample_id: s.sample_id,
                identity_id: s.identity_id,
                tokens: ScoringTokens::new(&g.sequence(&enc, k))?,
            });
        }
    }
    Ok(out)
}

pub fn rank_query(query: &Query, gallery: &[GalleryItem], similarity: Similarity) -> Result<RankingResult> {
    let scores: Vec<f64> = gallery.iter().map(|g| pair_score(&query.tokens, &g.tokens, similarity)).collect();
    let relevance: Vec<bool> = gallery.iter().map(|g| g.identity_id == query.identity_id).collect();
    let r = RankingResult::from_scores(&scores, &relevance)?;
    if r.num_relevant() == 0 {
        return Err(Error::Evaluation(format!("query {} has no relevant gallery image", query.sample_id)));
    }
    Ok(r)
}

/// Every admitted caption queries the full image gallery of the split.
pub fn evaluate(
    params: &ModelParams,
    manifest: &DatasetManifest,
    similarity: Similarity,
    filter: QueryFilter,
) -> Result<MetricsReport> {
    let gallery = prepare_gallery(params, manifest)?;
    let queries = prepare_queries(params, manifest, filter)?;
    if queries.is_empty() {
        return Err(Error::Evaluation(format!("no queries pass the {filter:?} filter")));
    }
    let results = queries.iter().map(|q| rank_query(q, &gallery, similarity)).collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_results(&results))
}
