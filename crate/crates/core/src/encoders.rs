//! Image, text and cross encoders.
//!
//! The public `encode_*` functions evaluate a single input with frozen
//! parameters. Losses go through [`Graph`], which stacks many sequences into
//! one tape so that projections run as a single matrix product and the
//! gradients of every parameter come out of one reverse sweep.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{ModelParams, ParamId};
use crate::numeric::GradResult;
use crate::tape::{Tape, Var};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceKind {
    Image,
    Text,
}

/// Token vectors of one image or text. Images carry `cls` at position 0;
/// texts carry `sos` at 0 and `eos` at `valid_len - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSequence {
    pub tokens: DenseTensor,
    pub kind: SequenceKind,
    pub special: Vec<usize>,
    pub valid_len: usize,
}

impl TokenEmbeddingSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_len == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Rows that take part in token-wise matching: everything except the
    /// special markers. A text with no words falls back to its frame.
    pub fn content_range(&self) -> Range<usize> {
        content_range(self.kind, 0..self.valid_len)
    }

    /// The global token: `cls` for images, `eos` for texts.
    pub fn global_index(&self) -> usize {
        match self.kind {
            SequenceKind::Image => 0,
            SequenceKind::Text => self.valid_len - 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.rows();
        if self.valid_len == 0 || self.valid_len > n || self.tokens.len() != n * self.dim() {
            return Err(shape_err("TokenEmbeddingSequence", format!("valid_len {} of {n}", self.valid_len)));
        }
        if self.kind == SequenceKind::Text && self.valid_len < 2 {
            return Err(shape_err("TokenEmbeddingSequence", "text needs sos and eos".into()));
        }
        Ok(())
    }
}

fn content_range(kind: SequenceKind, span: Range<usize>) -> Range<usize> {
    match kind {
        SequenceKind::Image if span.len() > 1 => span.start + 1..span.end,
        SequenceKind::Text if span.len() > 2 => span.start + 1..span.end - 1,
        _ => span,
    }
}

/// Many sequences of one kind stacked row-wise in a single tape node.
#[derive(Debug, Clone)]
pub struct StackedSequences {
    pub tokens: Var,
    pub kind: SequenceKind,
    pub spans: Vec<Range<usize>>,
}

impl StackedSequences {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn content(&self) -> Vec<Range<usize>> {
        self.spans.iter().map(|s| content_range(self.kind, s.clone())).collect()
    }

    pub fn global_rows(&self) -> Vec<usize> {
        self.spans
            .iter()
            .map(|s| match self.kind {
                SequenceKind::Image => s.start,
                SequenceKind::Text => s.end - 1,
            })
            .collect()
    }
}

/// A tape bound to one parameter set. Parameters enter the tape lazily on
/// first use, as trainable leaves when `track` is set and as constants
/// otherwise.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ModelParams,
    vars: BTreeMap<ParamId, Var>,
    track: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ModelParams, track: bool) -> Self {
        Self { tape: Tape::new(), params, vars: BTreeMap::new(), track }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars.get(&id) {
            return *v;
        }
        let value = self.params.get(id).clone();
        let v = if self.track { self.tape.param(value) } else { self.tape.constant(value) };
        self.vars.insert(id, v);
        v
    }

    /// Value of the scalar `out` and its gradient for every parameter;
    /// parameters the graph never touched get zeros.
    pub fn gradients(&self, out: Var) -> Result<GradResult> {
        let value = self.tape.scalar(out);
        if !value.is_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        let mut grads = self.params.zero_grads();
        if self.track {
            let mut g = self.tape.backward(out)?;
            for (id, v) in &self.vars {
                if let Some(t) = g.take(*v) {
                    if !t.is_finite() {
                        return Err(Error::NonFinite(format!("gradient of {}", id.name())));
                    }
                    grads.insert(*id, t);
                }
            }
        }
        Ok(GradResult { value, grads })
    }

    /// Projects every image's patches and prepends a `cls` token formed from
    /// the learnable cls vector plus the mean projected patch.
    pub fn encode_images(&mut self, patches: &[&DenseTensor]) -> Result<StackedSequences> {
        let cfg = *self.params.config();
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(patches.len());
        for p in patches {
            if p.rows() == 0 || p.cols() != cfg.patch_dim || p.len() != p.rows() * p.cols() {
                return Err(shape_err(
                    "encode_image",
                    format!("patches {:?} against patch width {}", p.shape(), cfg.patch_dim),
                ));
            }
            data.extend_from_slice(p.data());
            sizes.push(p.rows());
        }
        let total: usize = sizes.iter().sum();
        let stacked = self.tape.constant(DenseTensor::from_parts(total, cfg.patch_dim, data));
        let w = self.param(ParamId::PatchWeight);
        let b = self.param(ParamId::PatchBias);
        let cls = self.param(ParamId::ImageCls);
        let proj = self.tape.matmul(stacked, w)?;
        let proj = self.tape.add_row(proj, b)?;
        let mut pieces = Vec::with_capacity(2 * sizes.len());
        let mut spans = Vec::with_capacity(sizes.len());
        let (mut src, mut dst) = (0, 0);
        for n in sizes {
            let own = self.tape.slice_rows(proj, src..src + n);
            let pooled = self.tape.mean_rows(own);
            let c = self.tape.add(pooled, cls)?;
            pieces.push(c);
            pieces.push(own);
            spans.push(dst..dst + n + 1);
            src += n;
            dst += n + 1;
        }
        let tokens = self.tape.concat_rows(&pieces)?;
        Ok(StackedSequences { tokens, kind: SequenceKind::Image, spans })
    }

    /// Frames each id list with sos/eos, adds token and positional
    /// embeddings and applies one residual multi-head self-attention layer
    /// within each text.
    pub fn encode_texts(&mut self, texts: &[&[usize]]) -> Result<StackedSequences> {
        let cfg = *self.params.config();
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut spans = Vec::with_capacity(texts.len());
        for t in texts {
            if t.len() + 2 > cfg.max_text_len {
                return Err(Error::SequenceTooLong { len: t.len(), max: cfg.max_text_len - 2 });
            }
            if let Some(&id) = t.iter().find(|&&id| id >= cfg.vocab_size) {
                return Err(Error::OutOfVocabulary { id, size: cfg.vocab_size });
            }
            let start = ids.len();
            ids.push(crate::attributes::SOS_ID);
            ids.extend_from_slice(t);
            ids.push(crate::attributes::EOS_ID);
            positions.extend(0..t.len() + 2);
            spans.push(start..ids.len());
        }
        let emb = self.param(ParamId::TokenEmbedding);
        let pos = self.param(ParamId::Positional);
        let e = self.tape.gather(emb, ids)?;
        let p = self.tape.gather(pos, positions)?;
        let x = self.tape.add(e, p)?;
        let wq = self.param(ParamId::TextQuery);
        let wk = self.param(ParamId::TextKey);
        let wv = self.param(ParamId::TextValue);
        let wo = self.param(ParamId::TextOutput);
        let groups: Vec<(Range<usize>, Range<usize>)> = spans.iter().map(|s| (s.clone(), s.clone())).collect();
        let attended = self.attention(x, x, &groups, [wq, wk, wv])?;
        let out = self.tape.matmul(attended, wo)?;
        let tokens = self.tape.add(x, out)?;
        Ok(StackedSequences { tokens, kind: SequenceKind::Text, spans })
    }

    // Multi-head attention of query row ranges onto key/value row ranges.
    // Returns the concatenated head outputs, stacked in group order.
    fn attention(
        &mut self,
        queries: Var,
        keys: Var,
        groups: &[(Range<usize>, Range<usize>)],
        [wq, wk, wv]: [Var; 3],
    ) -> Result<Var> {
        let cfg = *self.params.config();
        let dh = cfg.head_dim();
        let scale = 1.0 / libm::sqrt(dh as f64);
        let q = self.tape.matmul(queries, wq)?;
        let k = self.tape.matmul(keys, wk)?;
        let v = self.tape.matmul(keys, wv)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = h * dh..(h + 1) * dh;
            heads.push((
                self.tape.slice_cols(q, cols.clone()),
                self.tape.slice_cols(k, cols.clone()),
                self.tape.slice_cols(v, cols),
            ));
        }
        let mut rows = Vec::with_capacity(groups.len());
        for (qr, kr) in groups {
            let mut outs = Vec::with_capacity(cfg.heads);
            for &(qh, kh, vh) in &heads {
                let qs = self.tape.slice_rows(qh, qr.clone());
                let ks = self.tape.slice_rows(kh, kr.clone());
                let vs = self.tape.slice_rows(vh, kr.clone());
                let s = self.tape.matmul_t(qs, ks)?;
                let s = self.tape.scale(s, scale);
                let a = self.tape.softmax_rows(s);
                outs.push(self.tape.matmul(a, vs)?);
            }
            rows.push(self.tape.concat_cols(&outs)?);
        }
        self.tape.concat_rows(&rows)
    }

    /// Cross encoder logits for selected text rows. Each group pairs rows of
    /// `text` with one image of `images`; the output stacks the rows of all
    /// groups in order. Text positions only attend to image tokens, so rows
    /// can be evaluated independently of the rest of their sequence.
    pub fn cross_logits(
        &mut self,
        text: Var,
        images: &StackedSequences,
        groups: &[(Vec<usize>, usize)],
    ) -> Result<Var> {
        let mut rows = Vec::new();
        let mut ranges = Vec::with_capacity(groups.len());
        for (r, img) in groups {
            let span = images.spans.get(*img).ok_or_else(|| Error::Batch(format!("image {img} not encoded")))?;
            ranges.push((rows.len()..rows.len() + r.len(), span.clone()));
            rows.extend_from_slice(r);
        }
        let x = self.tape.gather(text, rows)?;
        let wq = self.param(ParamId::CrossQuery);
        let wk = self.param(ParamId::CrossKey);
        let wv = self.param(ParamId::CrossValue);
        let wo = self.param(ParamId::CrossOutput);
        let attended = self.attention(x, images.tokens, &ranges, [wq, wk, wv])?;
        let o = self.tape.matmul(attended, wo)?;
        let h1 = self.tape.add(x, o)?;
        let w1 = self.param(ParamId::CrossFf1Weight);
        let b1 = self.param(ParamId::CrossFf1Bias);
        let w2 = self.param(ParamId::CrossFf2Weight);
        let b2 = self.param(ParamId::CrossFf2Bias);
        let f = self.tape.matmul(h1, w1)?;
        let f = self.tape.add_row(f, b1)?;
        let f = self.tape.gelu(f);
        let f = self.tape.matmul(f, w2)?;
        let f = self.tape.add_row(f, b2)?;
        let h2 = self.tape.add(h1, f)?;
        let head = self.param(ParamId::VocabHead);
        self.tape.matmul(h2, head)
    }

    pub fn sequence(&self, stacked: &StackedSequences, index: usize) -> TokenEmbeddingSequence {
        let span = stacked.spans[index].clone();
        let tokens = self.tape.value(stacked.tokens).slice_rows(span.start, span.len());
        let n = span.len();
        let special = match stacked.kind {
            SequenceKind::Image => alloc::vec![0],
            SequenceKind::Text => alloc::vec![0, n - 1],
        };
        TokenEmbeddingSequence { tokens, kind: stacked.kind, special, valid_len: n }
    }
}

pub fn encode_image(patches: &DenseTensor, params: &ModelParams) -> Result<TokenEmbeddingSequence> {
    let mut g = Graph::new(params, false);
    let s = g.encode_images(&[patches])?;
    Ok(g.sequence(&s, 0))
}

pub fn encode_text(token_ids: &[usize], params: &ModelParams) -> Result<TokenEmbeddingSequence> {
    let mut g = Graph::new(params, false);
    let s = g.encode_texts(&[token_ids])?;
    Ok(g.sequence(&s, 0))
}

/// Vocabulary logits (`n_text x V`) for every position of `text` attending
/// to `image`.
pub fn cross_encode(
    text: &TokenEmbeddingSequence,
    image: &TokenEmbeddingSequence,
    params: &ModelParams,
) -> Result<DenseTensor> {
    text.validate()?;
    image.validate()?;
    let d = params.config().dim;
    if text.dim() != d || image.dim() != d {
        return Err(shape_err("cross_encode", format!("widths {} and {} against {d}", text.dim(), image.dim())));
    }
    let mut g = Graph::new(params, false);
    let t = g.tape.constant(text.tokens.slice_rows(0, text.valid_len));
    let i = g.tape.constant(image.tokens.slice_rows(0, image.valid_len));
    let images = StackedSequences { tokens: i, kind: SequenceKind::Image, spans: alloc::vec![0..image.valid_len] };
    let logits = g.cross_logits(t, &images, &[((0..text.valid_len).collect(), 0)])?;
    Ok(g.tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use alloc::vec;

    fn params() -> ModelParams {
        ModelParams::init(ModelConfig { dim: 8, patch_dim: 8, heads: 4, max_text_len: 10, vocab_size: 12, num_classes: 3 }, 5)
            .unwrap()
    }

    fn patches(seed: u64, n: usize, d: usize) -> DenseTensor {
        let data = (0..n * d).map(|i| libm::sin((seed as f64 + 1.0) * (i as f64 + 0.5))).collect();
        DenseTensor::matrix(n, d, data).unwrap()
    }

    #[test]
    fn zero_projection_gives_zero_patch_tokens() {
        let mut p = params();
        p.set(ParamId::PatchWeight, DenseTensor::zeros(&[8, 8])).unwrap();
        let s = encode_image(&DenseTensor::zeros(&[3, 8]), &p).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.tokens.data()[8..].iter().all(|&v| v == 0.0));
        assert_eq!(s.tokens.row(0), p.get(ParamId::ImageCls).data());
    }

    #[test]
    fn identity_projection_copies_patches() {
        let mut p = params();
        p.set(ParamId::PatchWeight, DenseTensor::identity(8)).unwrap();
        let x = patches(1, 5, 8);
        let s = encode_image(&x, &p).unwrap();
        for k in 0..5 {
            assert_eq!(s.tokens.row(k + 1), x.row(k));
        }
        assert_eq!(s.kind, SequenceKind::Image);
        assert_eq!(s.content_range(), 1..6);
    }

    #[test]
    fn image_dimension_mismatch_is_an_error() {
        assert!(encode_image(&patches(0, 3, 7), &params()).is_err());
    }

    #[test]
    fn empty_text_is_sos_eos() {
        let s = encode_text(&[], &params()).unwrap();
        assert_eq!((s.len(), s.valid_len), (2, 2));
        assert_eq!(s.special, vec![0, 1]);
        assert_eq!(s.content_range(), 0..2);
    }

    #[test]
    fn repeated_id_differs_by_position_only() {
        let p = params();
        let s = encode_text(&[5, 7, 5], &p).unwrap();
        let pos = p.get(ParamId::Positional);
        for c in 0..8 {
            let lhs = s.tokens.get(3, c) - s.tokens.get(1, c);
            let rhs = pos.get(3, c) - pos.get(1, c);
            assert!((lhs - rhs).abs() < 1e-15);
        }
    }

    #[test]
    fn text_errors() {
        let p = params();
        assert!(matches!(encode_text(&[1; 9], &p), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(encode_text(&[12], &p), Err(Error::OutOfVocabulary { id: 12, size: 12 })));
    }

    #[test]
    fn zero_cross_weights_give_zero_logits() {
        let mut p = params();
        for &id in ParamId::ALL.iter().filter(|id| id.is_fresh_module()) {
            let [r, c] = id.shape(p.config());
            p.set(id, DenseTensor::zeros(&[r, c])).unwrap();
        }
        let t = encode_text(&[4, 5], &p).unwrap();
        let i = encode_image(&patches(2, 3, 8), &p).unwrap();
        let l = cross_encode(&t, &i, &p).unwrap();
        assert_eq!(l.shape(), &[4, 12]);
        assert!(l.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_encoding_matches_single() {
        let p = ModelParams::init_uniform(*params().config(), 9, 0.5).unwrap();
        let texts: [&[usize]; 3] = [&[3, 4], &[], &[5, 6, 7, 8]];
        let mut g = Graph::new(&p, false);
        let s = g.encode_texts(&texts).unwrap();
        for (k, t) in texts.iter().enumerate() {
            let single = encode_text(t, &p).unwrap();
            let batched = g.sequence(&s, k);
            for (a, b) in single.tokens.data().iter().zip(batched.tokens.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let a = patches(3, 2, 8);
        let b = patches(4, 4, 8);
        let s = g.encode_images(&[&a, &b]).unwrap();
        assert_eq!(g.sequence(&s, 1), encode_image(&b, &p).unwrap());
    }

    #[test]
    fn encoding_is_deterministic() {
        let p = params();
        let x = patches(7, 4, 8);
        assert_eq!(encode_image(&x, &p).unwrap(), encode_image(&x, &p).unwrap());
        assert_eq!(encode_text(&[3, 9], &p).unwrap(), encode_text(&[3, 9], &p).unwrap());
    }
}
