//! Token-wise maximum similarity and batch match probabilities on encoded
//! sequences, outside the tape.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoders::TokenEmbeddingSequence;
use crate::error::{shape_err, Error, Result};
use crate::numeric::softmax;
use crate::tensor::{dot, DenseTensor};

/// How an image and a text are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Mean over one side's content tokens of the best cosine match on the
    /// other side.
    #[default]
    Tokenwise,
    /// Cosine of the image cls and text eos tokens.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSimilarity {
    pub value: f64,
    /// For each row of the first argument, the row of the second that
    /// maximised the cosine.
    pub argmax: Vec<usize>,
}

/// `(1/n_a) Σ_k max_r cos(a_k, b_r)` over all rows; ties go to the lowest
/// `r`.
pub fn max_similarity_rows(a: &DenseTensor, b: &DenseTensor) -> Result<TokenSimilarity> {
    if a.cols() != b.cols() || a.rows() == 0 || b.rows() == 0 || a.is_empty() || b.is_empty() {
        return Err(shape_err("tokenwise_max_similarity", alloc::format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let an = unit_rows(a)?;
    let bn = unit_rows(b)?;
    Ok(max_similarity_unit(&an, &bn))
}

/// ξ between the content tokens of two sequences. Argmax indices are
/// positions in `b`.
pub fn tokenwise_max_similarity(a: &TokenEmbeddingSequence, b: &TokenEmbeddingSequence) -> Result<TokenSimilarity> {
    a.validate()?;
    b.validate()?;
    let ra = a.content_range();
    let rb = b.content_range();
    let mut s = max_similarity_rows(&a.tokens.slice_rows(ra.start, ra.len()), &b.tokens.slice_rows(rb.start, rb.len()))?;
    s.argmax.iter_mut().for_each(|m| *m += rb.start);
    Ok(s)
}

/// Row `i` is the softmax over `j` of `ξ(queries_i, candidates_j) / τ`.
pub fn batch_match_probabilities(
    queries: &[TokenEmbeddingSequence],
    candidates: &[TokenEmbeddingSequence],
    tau: f64,
) -> Result<DenseTensor> {
    if queries.len() != candidates.len() || queries.is_empty() {
        return Err(Error::Batch(alloc::format!("{} queries against {} candidates", queries.len(), candidates.len())));
    }
    let mut rows = Vec::with_capacity(queries.len());
    for q in queries {
        let xi = candidates.iter().map(|c| tokenwise_max_similarity(q, c).map(|s| s.value)).collect::<Result<Vec<_>>>()?;
        rows.push(softmax(&xi, tau)?);
    }
    DenseTensor::from_rows(&rows)
}

/// Unit-normalised copy of every row; zero rows are an error.
pub fn unit_rows(t: &DenseTensor) -> Result<DenseTensor> {
    let mut out = t.clone();
    for i in 0..t.rows() {
        let row = out.row_mut(i);
        let n = libm::sqrt(dot(row, row));
        if n == 0.0 {
            return Err(Error::ZeroNorm("token embedding"));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

pub(crate) fn max_similarity_unit(a: &DenseTensor, b: &DenseTensor) -> TokenSimilarity {
    let mut total = 0.0;
    let mut argmax = Vec::with_capacity(a.rows());
    for k in 0..a.rows() {
        let ak = a.row(k);
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for r in 0..b.rows() {
            let v = dot(ak, b.row(r)).clamp(-1.0, 1.0);
            if v > best_v {
                best_v = v;
                best = r;
            }
        }
        total += best_v;
        argmax.push(best);
    }
    TokenSimilarity { value: total / a.rows() as f64, argmax }
}

/// Pre-normalised content and global tokens of one sequence, for scoring a
/// sequence against many others.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringTokens {
    pub content: DenseTensor,
    pub global: Vec<f64>,
}

impl ScoringTokens {
    pub fn new(seq: &TokenEmbeddingSequence) -> Result<Self> {
        seq.validate()?;
        let r = seq.content_range();
        let content = unit_rows(&seq.tokens.slice_rows(r.start, r.len()))?;
        let g = seq.tokens.row(seq.global_index());
        let n = libm::sqrt(dot(g, g));
        if n == 0.0 {
            return Err(Error::ZeroNorm("global token"));
        }
        Ok(Self { content, global: g.iter().map(|v| v / n).collect() })
    }
}

/// Retrieval score of a text against an image. The token-wise score
/// averages both matching directions.
pub fn pair_score(text: &ScoringTokens, image: &ScoringTokens, similarity: Similarity) -> f64 {
    match similarity {
        Similarity::Tokenwise => {
            0.5 * (max_similarity_unit(&image.content, &text.content).value
                + max_similarity_unit(&text.content, &image.content).value)
        }
        Similarity::Global => dot(&text.global, &image.global).clamp(-1.0, 1.0),
    }
}
