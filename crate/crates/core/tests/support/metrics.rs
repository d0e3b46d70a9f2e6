//! Definitional recount of the ranking metrics.

use attrank_core::metrics::{mean_average_precision, mean_inp, rank_at_k, RankingResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 1-based rank of every gallery item: items ahead of it score higher, or
/// score the same with a smaller index.
pub fn ranks(scores: &[f64]) -> Vec<usize> {
    (0..scores.len())
        .map(|i| 1 + (0..scores.len()).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count())
        .collect()
}

pub struct Oracle {
    pub rank_at: [f64; 3],
    pub ap: f64,
    pub inp: f64,
}

pub fn oracle(scores: &[f64], relevance: &[bool]) -> Oracle {
    let r = ranks(scores);
    let mut rel_ranks: Vec<usize> = (0..scores.len()).filter(|&i| relevance[i]).map(|i| r[i]).collect();
    rel_ranks.sort_unstable();
    let best = rel_ranks[0];
    let rank_at = [1, 5, 10].map(|k| if best <= k { 1.0 } else { 0.0 });
    let mut ap = 0.0;
    for (n, &rank) in rel_ranks.iter().enumerate() {
        ap += (n + 1) as f64 / rank as f64;
    }
    ap /= rel_ranks.len() as f64;
    let inp = rel_ranks.len() as f64 / *rel_ranks.last().unwrap() as f64;
    Oracle { rank_at, ap, inp }
}

pub fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(1..=20);
    // A handful of distinct levels so ties are common.
    let levels = rng.random_range(1..=6);
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.25 - 0.5).collect();
    let mut relevance: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    if !relevance.contains(&true) {
        let i = rng.random_range(0..n);
        relevance[i] = true;
    }
    (scores, relevance)
}

/// Number of disagreements with the oracle over `n` random instances,
/// compared exactly.
pub fn mismatches(n: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    let (mut results, mut oracles) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let (scores, relevance) = instance(&mut rng);
        let r = RankingResult::from_scores(&scores, &relevance).unwrap();
        let o = oracle(&scores, &relevance);
        let rk = ranks(&scores);
        let order_ok = r.order.iter().enumerate().all(|(pos, &g)| rk[g] == pos + 1);
        let single = [r.clone()];
        let ranks_ok = [1, 5, 10].iter().zip(o.rank_at).all(|(k, want)| rank_at_k(&single, *k) == want);
        if !(order_ok && ranks_ok && r.average_precision() == o.ap && r.inverse_negative_penalty() == o.inp) {
            bad += 1;
        }
        results.push(r);
        oracles.push(o);
    }
    let count = oracles.len() as f64;
    let mean = |f: &dyn Fn(&Oracle) -> f64| oracles.iter().fold(0.0, |s, o| s + f(o)) / count;
    if mean_average_precision(&results) != mean(&|o| o.ap) || mean_inp(&results) != mean(&|o| o.inp) {
        bad += 1;
    }
    for (i, k) in [1, 5, 10].into_iter().enumerate() {
        if rank_at_k(&results, k) != mean(&|o| o.rank_at[i]) {
            bad += 1;
        }
    }
    bad
}
