//! Straightforward loop implementations of the matching losses.

use attrank_core::attributes::gamma;
use attrank_core::encoders::{encode_image, encode_text, TokenEmbeddingSequence};
use attrank_core::gradcheck::fixture;
use attrank_core::losses::{component_probe, dts_directions, Batch, Component, LossWeights, Objective};
use attrank_core::similarity::Similarity;
use attrank_core::ModelParams;

pub type Rows = Vec<Vec<f64>>;

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn content(s: &TokenEmbeddingSequence) -> Rows {
    s.content_range().map(|r| unit(s.tokens.row(r))).collect()
}

pub fn global(s: &TokenEmbeddingSequence) -> Rows {
    vec![unit(s.tokens.row(s.global_index()))]
}

/// Mean over `a` of the best cosine in `b`.
pub fn xi(a: &Rows, b: &Rows) -> f64 {
    a.iter().map(|x| b.iter().map(|y| dot(x, y)).fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / a.len() as f64
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub struct Encoded {
    pub images: Vec<Rows>,
    pub image_globals: Vec<Rows>,
    pub captions: Vec<Rows>,
    pub caption_globals: Vec<Rows>,
    pub pos: Vec<Rows>,
    pub neg: Vec<Rows>,
}

pub fn encode(params: &ModelParams, batch: &Batch) -> Encoded {
    let mut e = Encoded {
        images: vec![],
        image_globals: vec![],
        captions: vec![],
        caption_globals: vec![],
        pos: vec![],
        neg: vec![],
    };
    for item in batch.items() {
        let img = encode_image(&item.patches, params).unwrap();
        e.images.push(content(&img));
        e.image_globals.push(global(&img));
        let cap = encode_text(&item.caption, params).unwrap();
        e.captions.push(content(&cap));
        e.caption_globals.push(global(&cap));
        let group = |list: &[(usize, Vec<usize>)]| -> Rows {
            list.iter().flat_map(|(_, ids)| content(&encode_text(ids, params).unwrap())).collect()
        };
        e.pos.push(group(&item.prompts.positive));
        e.neg.push(group(&item.prompts.negative));
    }
    e
}

/// `(ξ^I, ξ^T)`: `[i][j] = ξ(image i, cand j)` and `[j][i] = ξ(cand j, image i)`.
pub fn xi_pair(images: &[Rows], cands: &[Rows]) -> (Rows, Rows) {
    let i2c = images.iter().map(|im| cands.iter().map(|c| xi(im, c)).collect()).collect();
    let c2i = cands.iter().map(|c| images.iter().map(|im| xi(c, im)).collect()).collect();
    (i2c, c2i)
}

pub fn kl_direction(s: &Rows, y: &[Vec<bool>], w: &LossWeights) -> f64 {
    let b = s.len() as f64;
    let mut total = 0.0;
    for (row, yr) in s.iter().zip(y) {
        let scaled: Vec<f64> = row.iter().map(|v| v / w.tau).collect();
        let p = softmax(&scaled);
        let n = yr.iter().filter(|&&v| v).count() as f64;
        for (j, pj) in p.iter().enumerate() {
            let q = if yr[j] { 1.0 / n } else { 0.0 };
            total += pj * (pj.ln() - (q + w.epsilon).ln());
        }
    }
    total / b
}

pub fn oracle_dts(e: &Encoded, batch: &Batch, w: &LossWeights, sim: Similarity) -> (f64, f64) {
    let (xi_i, xi_t) = match sim {
        Similarity::Tokenwise => xi_pair(&e.images, &e.captions),
        Similarity::Global => xi_pair(&e.image_globals, &e.caption_globals),
    };
    (kl_direction(&xi_i, batch.y(), w), kl_direction(&xi_t, batch.y(), w))
}

pub fn probabilities(xi: &Rows, w: &LossWeights) -> Rows {
    xi.iter().map(|r| softmax(&r.iter().map(|v| v / w.tau).collect::<Vec<_>>())).collect()
}

pub fn oracle_diac(e: &Encoded, w: &LossWeights) -> f64 {
    let b = e.images.len();
    let side = |groups: &[Rows]| {
        let (xi_i, xi_t) = xi_pair(&e.images, groups);
        let (i2a, a2i) = (probabilities(&xi_i, w), probabilities(&xi_t, w));
        -(0..b).map(|i| (i2a[i][i] + w.epsilon).ln() + (a2i[i][i] + w.epsilon).ln()).sum::<f64>() / (2 * b) as f64
    };
    0.5 * (side(&e.pos) - side(&e.neg))
}

pub fn oracle_siam(e: &Encoded, batch: &Batch, w: &LossWeights) -> f64 {
    let b = e.images.len();
    let (pi, pt) = xi_pair(&e.images, &e.pos);
    let (ni, nt) = xi_pair(&e.images, &e.neg);
    let (pi, pt, ni, nt) = (probabilities(&pi, w), probabilities(&pt, w), probabilities(&ni, w), probabilities(&nt, w));
    let gammas: Vec<f64> = batch
        .items()
        .iter()
        .map(|it| gamma(it.prompts.positive.len(), it.prompts.negative.len()))
        .collect();
    let blend = |p: &Rows, n: &Rows, r: usize| -> Vec<f64> {
        let g = gammas[r];
        softmax(&(0..b).map(|c| g * p[r][c] - n[r][c] / g).collect::<Vec<_>>())
    };
    let mut total = 0.0;
    for r in 0..b {
        let a = blend(&pi, &ni, r);
        let t = blend(&pt, &nt, r);
        for c in 0..b {
            let p = (0.5 * (a[c] + t[c])).clamp(w.epsilon, 1.0 - w.epsilon);
            let img = &batch.items()[r];
            let s = &batch.items()[c];
            let label = s.prompts.positive.iter().all(|(k, _)| img.attributes.contains(k))
                && s.prompts.negative.iter().all(|(k, _)| !img.attributes.contains(k));
            total += if label { p.ln() } else { (1.0 - p).ln() };
        }
    }
    -total / b as f64
}

pub fn value(params: &ModelParams, batch: &Batch, c: Component, sim: Similarity) -> f64 {
    let obj = Objective { similarity: sim, ..Objective::default() };
    component_probe(params, batch, c, &obj, 0).unwrap().value
}

/// Largest gap between the tape losses and the loop oracles over `seeds`
/// random batches of four.
pub fn max_gap(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let (params, batch) = fixture(seed, 4, 1.0).unwrap();
        let w = LossWeights::default();
        let e = encode(&params, &batch);
        for sim in [Similarity::Tokenwise, Similarity::Global] {
            let (a, b) = oracle_dts(&e, &batch, &w, sim);
            let (x, y) = dts_directions(&params, &batch, &w, sim).unwrap();
            worst = worst.max((a - x).abs()).max((b - y).abs());
            worst = worst.max((value(&params, &batch, Component::Dts, sim) - (a + b)).abs());
        }
        worst = worst.max((value(&params, &batch, Component::Diac, Similarity::Tokenwise) - oracle_diac(&e, &w)).abs());
        worst = worst.max((value(&params, &batch, Component::Siam, Similarity::Tokenwise) - oracle_siam(&e, &batch, &w)).abs());
    }
    worst
}
