use attrank_core::metrics::{
    prepare_gallery, prepare_queries, rank_query, MetricsReport, QueryFilter, RankingResult,
};
use attrank_core::model::ModelParams;
use attrank_core::similarity::Similarity;
use attrank_core::synth::DatasetManifest;

use crate::error::Result;

pub const THREADS_VAR: &str = "ATTRANK_THREADS";

/// Worker count from `ATTRANK_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_VAR).ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Same report as the sequential evaluation; queries are ranked on up to
/// `threads` workers and merged in query order.
pub fn evaluate_parallel(
    params: &ModelParams,
    manifest: &DatasetManifest,
    similarity: Similarity,
    filter: QueryFilter,
    threads: usize,
) -> Result<MetricsReport> {
    let gallery = prepare_gallery(params, manifest)?;
    let queries = prepare_queries(params, manifest, filter)?;
    if queries.is_empty() {
        return Err(attrank_core::Error::Evaluation(format!("no queries pass the {filter:?} filter")).into());
    }
    let chunk = queries.len().div_ceil(threads.max(1));
    let parts: Vec<attrank_core::Result<Vec<RankingResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = queries
            .chunks(chunk)
            .map(|qs| s.spawn(|| qs.iter().map(|q| rank_query(q, &gallery, similarity)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("ranking worker panicked")).collect()
    });
    let mut results = Vec::with_capacity(queries.len());
    for p in parts {
        results.extend(p?);
    }
    Ok(MetricsReport::from_results(&results))
}

/// Whether any sample passes `filter`.
pub fn has_queries(manifest: &DatasetManifest, filter: QueryFilter) -> bool {
    manifest.samples.iter().any(|s| filter.admits(s.confusable))
}
