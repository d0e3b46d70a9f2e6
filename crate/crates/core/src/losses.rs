//! Training objectives. Every loss is built on one [`Graph`] per call and
//! returns its value together with the gradient of every parameter.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{gamma, PromptSet, MASK_ID};
use crate::encoders::{Graph, StackedSequences};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numeric::{GradResult, Probe};
use crate::similarity::Similarity;
use crate::tape::{Select, Var};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub tau: f64,
    pub epsilon: f64,
    pub lambda_dts: f64,
    pub lambda_mlm: f64,
    pub lambda_id: f64,
    pub lambda_dapl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { tau: 0.02, epsilon: 1e-8, lambda_dts: 2.0, lambda_mlm: 1.0, lambda_id: 1.0, lambda_dapl: 0.8 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Err(Error::Config { field, reason: reason.into() });
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad("tau", "must be positive");
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return bad("epsilon", "must be positive");
        }
        for (field, v) in [
            ("lambda_dts", self.lambda_dts),
            ("lambda_mlm", self.lambda_mlm),
            ("lambda_id", self.lambda_id),
            ("lambda_dapl", self.lambda_dapl),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(field, "must be a finite value >= 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Dts,
    Diac,
    Siam,
    Mapm,
    Mlm,
    Id,
}

impl Component {
    pub const ALL: [Component; 6] =
        [Component::Dts, Component::Diac, Component::Siam, Component::Mapm, Component::Mlm, Component::Id];

    pub fn name(self) -> &'static str {
        match self {
            Component::Dts => "dts",
            Component::Diac => "diac",
            Component::Siam => "siam",
            Component::Mapm => "mapm",
            Component::Mlm => "mlm",
            Component::Id => "id",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossToggles {
    pub dts: bool,
    pub diac: bool,
    pub siam: bool,
    pub mapm: bool,
    pub mlm: bool,
    pub id: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl LossToggles {
    pub fn all() -> Self {
        Self { dts: true, diac: true, siam: true, mapm: true, mlm: true, id: true }
    }

    pub fn none() -> Self {
        Self { dts: false, diac: false, siam: false, mapm: false, mlm: false, id: false }
    }

    pub fn get(&self, c: Component) -> bool {
        match c {
            Component::Dts => self.dts,
            Component::Diac => self.diac,
            Component::Siam => self.siam,
            Component::Mapm => self.mapm,
            Component::Mlm => self.mlm,
            Component::Id => self.id,
        }
    }

    pub fn set(&mut self, c: Component, on: bool) {
        match c {
            Component::Dts => self.dts = on,
            Component::Diac => self.diac = on,
            Component::Siam => self.siam = on,
            Component::Mapm => self.mapm = on,
            Component::Mlm => self.mlm = on,
            Component::Id => self.id = on,
        }
    }

    pub fn only(cs: &[Component]) -> Self {
        let mut t = Self::none();
        for &c in cs {
            t.set(c, true);
        }
        t
    }
}

/// Everything besides the batch that determines the overall objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Objective {
    pub weights: LossWeights,
    pub toggles: LossToggles,
    pub similarity: Similarity,
    pub mask_rate: f64,
}

impl Default for Objective {
    fn default() -> Self {
        Self { weights: LossWeights::default(), toggles: LossToggles::all(), similarity: Similarity::Tokenwise, mask_rate: 0.15 }
    }
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        check_mask_rate(self.mask_rate)
    }
}

fn check_mask_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(Error::Config { field: "mask_rate", reason: format!("must lie in (0, 1), got {rate}") })
    }
}

/// One training pair with everything the objectives need.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    /// `n_v x d_in` patch features.
    pub patches: DenseTensor,
    /// Caption token ids without the sos/eos frame.
    pub caption: Vec<usize>,
    /// Identity class index.
    pub identity: usize,
    pub prompts: PromptSet,
    /// Attribute ids the pictured person truly has.
    pub attributes: BTreeSet<usize>,
}

/// `B` image-text pairs and the derived match matrix
/// `y[i][j] = identity_i == identity_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    items: Vec<BatchItem>,
    y: Vec<Vec<bool>>,
}

impl Batch {
    pub fn new(items: Vec<BatchItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Batch("a batch needs at least one pair".into()));
        }
        let y = items.iter().map(|a| items.iter().map(|b| a.identity == b.identity).collect()).collect();
        Ok(Self { items, y })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[BatchItem] {
        &self.items
    }

    pub fn y(&self) -> &[Vec<bool>] {
        &self.y
    }

    pub fn identities(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.identity).collect()
    }

    /// Per-sample balance factor from the prompt counts.
    pub fn gammas(&self) -> Vec<f64> {
        self.items.iter().map(|i| gamma(i.prompts.positive.len(), i.prompts.negative.len())).collect()
    }

    /// `y^a[i][j]`: the person in image `i` has every attribute that sample
    /// `j`'s positive prompts assert and none that its negative prompts deny.
    pub fn attribute_labels(&self) -> Vec<Vec<bool>> {
        self.items
            .iter()
            .map(|img| {
                self.items
                    .iter()
                    .map(|s| {
                        s.prompts.positive.iter().all(|(a, _)| img.attributes.contains(a))
                            && s.prompts.negative.iter().all(|(a, _)| !img.attributes.contains(a))
                    })
                    .collect()
            })
            .collect()
    }

    /// Reorders the samples: position `k` of the result is sample `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        for &p in perm {
            if p >= self.len() || core::mem::replace(&mut seen[p], true) {
                return Err(Error::Batch("not a permutation".into()));
            }
        }
        if perm.len() != self.len() {
            return Err(Error::Batch("not a permutation".into()));
        }
        Self::new(perm.iter().map(|&p| self.items[p].clone()).collect())
    }

    /// Exchanges every sample's positive and negative prompt lists.
    pub fn with_swapped_prompts(&self) -> Self {
        let items = self
            .items
            .iter()
            .map(|i| BatchItem { prompts: i.prompts.swapped(), ..i.clone() })
            .collect();
        Self::new(items).expect("same size")
    }

    fn require_prompts(&self) -> Result<()> {
        for (i, item) in self.items.iter().enumerate() {
            if item.prompts.positive.is_empty() || item.prompts.negative.is_empty() {
                return Err(Error::Batch(format!("sample {i} lacks positive or negative prompts")));
            }
        }
        Ok(())
    }
}

/// Value of every component plus the DAPL composite and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dts: f64,
    pub diac: f64,
    pub siam: f64,
    pub mapm: f64,
    pub mlm: f64,
    pub id: f64,
    pub dapl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::Dts => self.dts,
            Component::Diac => self.diac,
            Component::Siam => self.siam,
            Component::Mapm => self.mapm,
            Component::Mlm => self.mlm,
            Component::Id => self.id,
        }
    }

    fn set(&mut self, c: Component, v: f64) {
        match c {
            Component::Dts => self.dts = v,
            Component::Diac => self.diac = v,
            Component::Siam => self.siam = v,
            Component::Mapm => self.mapm = v,
            Component::Mlm => self.mlm = v,
            Component::Id => self.id = v,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.dts, self.diac, self.siam, self.mapm, self.mlm, self.id, self.dapl, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    pub grads: GradResult,
}

const MLM_STREAM: u64 = 1;
const MAPM_STREAM: u64 = 2;

/// Replaces each id with `[MASK]` with probability `rate`, forcing the first
/// id when none was drawn. Returns the masked ids and the masked positions.
pub fn mask_tokens(ids: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut masked = ids.to_vec();
    let mut positions = Vec::new();
    for (k, id) in masked.iter_mut().enumerate() {
        if rng.random::<f64>() < rate {
            *id = MASK_ID;
            positions.push(k);
        }
    }
    if positions.is_empty() && !ids.is_empty() {
        masked[0] = MASK_ID;
        positions.push(0);
    }
    (masked, positions)
}

pub fn mask_rng(seed: u64, component: Component) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(if component == Component::Mapm { MAPM_STREAM } else { MLM_STREAM });
    rng
}

// Encoded prompt groups: for each sample, the content rows of all its
// prompts of one polarity, gathered contiguously from the unit-normalised
// prompt encodings.
struct PromptGroups {
    tokens: Var,
    blocks: Vec<Range<usize>>,
}

struct Matching {
    // Rows are images, columns candidates; softmax over candidates.
    i2a: Var,
    // Rows are candidate groups, columns images.
    a2i: Var,
}

/// Lazily shared encodings for one batch on one graph.
struct Forward<'b, 'p> {
    g: Graph<'p>,
    batch: &'b Batch,
    w: LossWeights,
    images: Option<StackedSequences>,
    image_unit: Option<Var>,
    captions: Option<StackedSequences>,
    prompts: Option<(Matching, Matching)>,
}

impl<'b, 'p> Forward<'b, 'p> {
    fn new(params: &'p ModelParams, batch: &'b Batch, w: LossWeights, track: bool) -> Result<Self> {
        w.validate()?;
        Ok(Self { g: Graph::new(params, track), batch, w, images: None, image_unit: None, captions: None, prompts: None })
    }

    fn images(&mut self) -> Result<StackedSequences> {
        if self.images.is_none() {
            let p: Vec<&DenseTensor> = self.batch.items.iter().map(|i| &i.patches).collect();
            self.images = Some(self.g.encode_images(&p)?);
        }
        Ok(self.images.clone().expect("set above"))
    }

    fn image_unit(&mut self) -> Result<Var> {
        if self.image_unit.is_none() {
            let imgs = self.images()?;
            self.image_unit = Some(self.g.tape.normalize_rows(imgs.tokens)?);
        }
        Ok(self.image_unit.expect("set above"))
    }

    fn captions(&mut self) -> Result<StackedSequences> {
        if self.captions.is_none() {
            let c: Vec<&[usize]> = self.batch.items.iter().map(|i| i.caption.as_slice()).collect();
            self.captions = Some(self.g.encode_texts(&c)?);
        }
        Ok(self.captions.clone().expect("set above"))
    }

    // (ξ^I, ξ^T) with ξ^I[i][j] matching image i's tokens into candidate j
    // and ξ^T[j][i] matching candidate j's tokens into image i.
    fn token_xi(&mut self, cand: Var, cand_blocks: &[Range<usize>]) -> Result<(Var, Var)> {
        let imgs = self.images()?;
        let iu = self.image_unit()?;
        let img_blocks = StackedSequences::content(&imgs);
        let m = self.g.tape.matmul_t(iu, cand)?;
        let xi_i = self.g.tape.block_max_mean(m, &img_blocks, cand_blocks, Select::MaxOverCols)?;
        let xi_t = self.g.tape.block_max_mean(m, &img_blocks, cand_blocks, Select::MaxOverRows)?;
        let xi_t = self.g.tape.transpose(xi_t);
        Ok((xi_i, xi_t))
    }

    fn caption_xi(&mut self, similarity: Similarity) -> Result<(Var, Var)> {
        let caps = self.captions()?;
        match similarity {
            Similarity::Tokenwise => {
                let cu = self.g.tape.normalize_rows(caps.tokens)?;
                self.token_xi(cu, &caps.content())
            }
            Similarity::Global => {
                let imgs = self.images()?;
                let gi = self.g.tape.gather(imgs.tokens, imgs.global_rows())?;
                let gi = self.g.tape.normalize_rows(gi)?;
                let gt = self.g.tape.gather(caps.tokens, caps.global_rows())?;
                let gt = self.g.tape.normalize_rows(gt)?;
                let xi = self.g.tape.matmul_t(gi, gt)?;
                let xt = self.g.tape.transpose(xi);
                Ok((xi, xt))
            }
        }
    }

    fn prompt_groups(&mut self) -> Result<(PromptGroups, PromptGroups)> {
        self.batch.require_prompts()?;
        let mut distinct: BTreeMap<&[usize], usize> = BTreeMap::new();
        let mut order: Vec<&[usize]> = Vec::new();
        for item in &self.batch.items {
            for (_, ids) in item.prompts.positive.iter().chain(&item.prompts.negative) {
                distinct.entry(ids.as_slice()).or_insert_with(|| {
                    order.push(ids.as_slice());
                    order.len() - 1
                });
            }
        }
        let enc = self.g.encode_texts(&order)?;
        let content = enc.content();
        let unit = self.g.tape.normalize_rows(enc.tokens)?;
        let mut build = |positive: bool| -> Result<PromptGroups> {
            let mut rows = Vec::new();
            let mut blocks = Vec::with_capacity(self.batch.len());
            for item in &self.batch.items {
                let list = if positive { &item.prompts.positive } else { &item.prompts.negative };
                let start = rows.len();
                for (_, ids) in list {
                    rows.extend(content[distinct[ids.as_slice()]].clone());
                }
                blocks.push(start..rows.len());
            }
            Ok(PromptGroups { tokens: self.g.tape.gather(unit, rows)?, blocks })
        };
        let pos = build(true)?;
        let neg = build(false)?;
        Ok((pos, neg))
    }

    fn matching(&mut self, groups: &PromptGroups) -> Result<Matching> {
        let (xi_i, xi_t) = self.token_xi(groups.tokens, &groups.blocks)?;
        let inv_tau = 1.0 / self.w.tau;
        let a = self.g.tape.scale(xi_i, inv_tau);
        let b = self.g.tape.scale(xi_t, inv_tau);
        Ok(Matching { i2a: self.g.tape.softmax_rows(a), a2i: self.g.tape.softmax_rows(b) })
    }

    fn prompt_matching(&mut self) -> Result<(Var, Var, Var, Var)> {
        if self.prompts.is_none() {
            let (pos, neg) = self.prompt_groups()?;
            let p = self.matching(&pos)?;
            let n = self.matching(&neg)?;
            self.prompts = Some((p, n));
        }
        let (p, n) = self.prompts.as_ref().expect("set above");
        Ok((p.i2a, p.a2i, n.i2a, n.a2i))
    }

    fn kl_rows(&mut self, xi: Var) -> Result<Var> {
        let b = self.batch.len();
        let inv_tau = 1.0 / self.w.tau;
        let z = self.g.tape.scale(xi, inv_tau);
        let p = self.g.tape.softmax_rows(z);
        let lp = self.g.tape.log_softmax_rows(z);
        let mut logq = Vec::with_capacity(b * b);
        for row in &self.batch.y {
            let total = row.iter().filter(|&&v| v).count() as f64;
            assert!(total >= 1.0, "y has a unit diagonal");
            logq.extend(row.iter().map(|&v| libm::log(if v { 1.0 / total } else { 0.0 } + self.w.epsilon)));
        }
        let c = self.g.tape.constant(DenseTensor::from_parts(b, b, logq));
        let d = self.g.tape.sub(lp, c)?;
        let m = self.g.tape.mul(p, d)?;
        let s = self.g.tape.sum(m);
        Ok(self.g.tape.scale(s, 1.0 / b as f64))
    }

    fn dts_parts(&mut self, similarity: Similarity) -> Result<(Var, Var)> {
        let (xi_i, xi_t) = self.caption_xi(similarity)?;
        Ok((self.kl_rows(xi_i)?, self.kl_rows(xi_t)?))
    }

    fn dts(&mut self, similarity: Similarity) -> Result<Var> {
        let (a, b) = self.dts_parts(similarity)?;
        self.g.tape.add(a, b)
    }

    fn matched_log_mean(&mut self, i2a: Var, a2i: Var) -> Result<Var> {
        let b = self.batch.len();
        let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
        let x = self.g.tape.pick(i2a, &diag)?;
        let y = self.g.tape.pick(a2i, &diag)?;
        let both = self.g.tape.concat_cols(&[x, y])?;
        let both = self.g.tape.add_const(both, self.w.epsilon);
        let l = self.g.tape.ln(both)?;
        let s = self.g.tape.sum(l);
        Ok(self.g.tape.scale(s, -1.0 / (2 * b) as f64))
    }

    fn diac(&mut self) -> Result<Var> {
        let (pi, pa, ni, na) = self.prompt_matching()?;
        let piac = self.matched_log_mean(pi, pa)?;
        let niac = self.matched_log_mean(ni, na)?;
        let d = self.g.tape.sub(piac, niac)?;
        Ok(self.g.tape.scale(d, 0.5))
    }

    fn siam(&mut self) -> Result<Var> {
        let (pi, pa, ni, na) = self.prompt_matching()?;
        let b = self.batch.len();
        let gam = self.batch.gammas();
        let inv: Vec<f64> = gam.iter().map(|g| 1.0 / g).collect();
        let mut side = |p: Var, n: Var| -> Result<Var> {
            let a = self.g.tape.scale_rows(p, gam.clone())?;
            let c = self.g.tape.scale_rows(n, inv.clone())?;
            let d = self.g.tape.sub(a, c)?;
            Ok(self.g.tape.softmax_rows(d))
        };
        let s1 = side(pi, ni)?;
        let s2 = side(pa, na)?;
        let sum = self.g.tape.add(s1, s2)?;
        let p = self.g.tape.scale(sum, 0.5);
        let eps = self.w.epsilon;
        let p = self.g.tape.clamp(p, eps, 1.0 - eps);
        let labels = self.batch.attribute_labels();
        let ya: Vec<f64> = labels.iter().flatten().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let yn: Vec<f64> = ya.iter().map(|v| 1.0 - v).collect();
        let ya = self.g.tape.constant(DenseTensor::from_parts(b, b, ya));
        let yn = self.g.tape.constant(DenseTensor::from_parts(b, b, yn));
        let lp = self.g.tape.ln(p)?;
        let q = self.g.tape.scale(p, -1.0);
        let q = self.g.tape.add_const(q, 1.0);
        let lq = self.g.tape.ln(q)?;
        let t1 = self.g.tape.mul(ya, lp)?;
        let t2 = self.g.tape.mul(yn, lq)?;
        let t = self.g.tape.add(t1, t2)?;
        let s = self.g.tape.sum(t);
        Ok(self.g.tape.scale(s, -1.0 / b as f64))
    }

    // Mean cross-entropy of the cross encoder's predictions at masked
    // positions. `texts[k]` is attended against image `owners[k]`.
    fn masked_prediction(&mut self, texts: &[Vec<usize>], owners: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Result<Option<Var>> {
        let mut masked = Vec::with_capacity(texts.len());
        let mut positions = Vec::with_capacity(texts.len());
        for t in texts {
            let (m, p) = mask_tokens(t, rate, rng);
            masked.push(m);
            positions.push(p);
        }
        let refs: Vec<&[usize]> = masked.iter().map(Vec::as_slice).collect();
        let enc = self.g.encode_texts(&refs)?;
        let imgs = self.images()?;
        let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut targets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (k, pos) in positions.iter().enumerate() {
            let start = enc.spans[k].start + 1;
            by_image.entry(owners[k]).or_default().extend(pos.iter().map(|p| start + p));
            targets.entry(owners[k]).or_default().extend(pos.iter().map(|&p| texts[k][p]));
        }
        let groups: Vec<(Vec<usize>, usize)> =
            by_image.into_iter().filter(|(_, r)| !r.is_empty()).map(|(i, r)| (r, i)).collect();
        if groups.is_empty() {
            return Ok(None);
        }
        let picks: Vec<(usize, usize)> =
            targets.into_values().flatten().enumerate().collect();
        let logits = self.g.cross_logits(enc.tokens, &imgs, &groups)?;
        let lsm = self.g.tape.log_softmax_rows(logits);
        let picked = self.g.tape.pick(lsm, &picks)?;
        let m = self.g.tape.mean(picked);
        Ok(Some(self.g.tape.scale(m, -1.0)))
    }

    fn mlm(&mut self, rate: f64, seed: u64) -> Result<Option<Var>> {
        check_mask_rate(rate)?;
        let texts: Vec<Vec<usize>> = self.batch.items.iter().map(|i| i.caption.clone()).collect();
        let owners: Vec<usize> = (0..texts.len()).collect();
        self.masked_prediction(&texts, &owners, rate, &mut mask_rng(seed, Component::Mlm))
    }

    fn mapm(&mut self, rate: f64, seed: u64) -> Result<Option<Var>> {
        check_mask_rate(rate)?;
        let mut texts = Vec::new();
        let mut owners = Vec::new();
        for (i, item) in self.batch.items.iter().enumerate() {
            for (_, ids) in &item.prompts.positive {
                texts.push(ids.clone());
                owners.push(i);
            }
        }
        if texts.is_empty() {
            return Err(Error::Batch("no positive prompts to mask".into()));
        }
        self.masked_prediction(&texts, &owners, rate, &mut mask_rng(seed, Component::Mapm))
    }

    fn id(&mut self) -> Result<Var> {
        let classes = self.g.params().config().num_classes;
        if let Some(bad) = self.batch.items.iter().find(|i| i.identity >= classes) {
            return Err(Error::Identity { identity: bad.identity, classes });
        }
        let imgs = self.images()?;
        let caps = self.captions()?;
        let gi = self.g.tape.gather(imgs.tokens, imgs.global_rows())?;
        let gt = self.g.tape.gather(caps.tokens, caps.global_rows())?;
        let x = self.g.tape.concat_rows(&[gi, gt])?;
        let w = self.g.param(crate::model::ParamId::IdWeight);
        let b = self.g.param(crate::model::ParamId::IdBias);
        let z = self.g.tape.matmul(x, w)?;
        let z = self.g.tape.add_row(z, b)?;
        let lsm = self.g.tape.log_softmax_rows(z);
        let ids = self.batch.identities();
        let picks: Vec<(usize, usize)> = ids.iter().chain(&ids).copied().enumerate().collect();
        let picked = self.g.tape.pick(lsm, &picks)?;
        let m = self.g.tape.mean(picked);
        Ok(self.g.tape.scale(m, -1.0))
    }

    fn component(&mut self, c: Component, obj: &Objective, seed: u64) -> Result<Option<Var>> {
        Ok(match c {
            Component::Dts => Some(self.dts(obj.similarity)?),
            Component::Diac => Some(self.diac()?),
            Component::Siam => Some(self.siam()?),
            Component::Mapm => self.mapm(obj.mask_rate, seed)?,
            Component::Mlm => self.mlm(obj.mask_rate, seed)?,
            Component::Id => Some(self.id()?),
        })
    }

    fn finish(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let s = self.g.tape.scale(v, w);
            acc = Some(match acc {
                None => s,
                Some(a) => self.g.tape.add(a, s)?,
            });
        }
        Ok(acc.unwrap_or_else(|| self.g.tape.constant(DenseTensor::zeros(&[1, 1]))))
    }
}

fn weight_of(c: Component, w: &LossWeights) -> f64 {
    match c {
        Component::Dts => w.lambda_dts,
        Component::Mlm => w.lambda_mlm,
        Component::Id => w.lambda_id,
        Component::Diac | Component::Siam | Component::Mapm => w.lambda_dapl / 3.0,
    }
}

/// Weighted overall objective. Disabled components contribute neither value
/// nor gradient; the reported DAPL value is a third of the enabled prompt
/// terms.
pub fn total_loss(params: &ModelParams, batch: &Batch, obj: &Objective, seed: u64) -> Result<TotalLoss> {
    obj.validate()?;
    let mut f = Forward::new(params, batch, obj.weights, true)?;
    let mut breakdown = LossBreakdown::default();
    let mut terms = Vec::new();
    let mut vars = Vec::new();
    for c in Component::ALL {
        if !obj.toggles.get(c) {
            continue;
        }
        if let Some(v) = f.component(c, obj, seed)? {
            vars.push((c, v));
            terms.push((weight_of(c, &obj.weights), v));
        }
    }
    for (c, v) in vars {
        breakdown.set(c, f.g.tape.scalar(v));
    }
    breakdown.dapl = (breakdown.diac + breakdown.siam + breakdown.mapm) / 3.0;
    let out = f.finish(&terms)?;
    breakdown.total = f.g.tape.scalar(out);
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!("loss breakdown {breakdown:?}")));
    }
    let grads = f.g.gradients(out)?;
    Ok(TotalLoss { breakdown, grads })
}

/// One component alone, with gradients.
pub fn component_loss(params: &ModelParams, batch: &Batch, c: Component, obj: &Objective, seed: u64) -> Result<GradResult> {
    obj.validate()?;
    let mut f = Forward::new(params, batch, obj.weights, true)?;
    let v = f.component(c, obj, seed)?;
    let out = f.finish(&v.map(|v| vec![(1.0, v)]).unwrap_or_default())?;
    f.g.gradients(out)
}

/// One component's value and branch signature, without gradients.
pub fn component_probe(params: &ModelParams, batch: &Batch, c: Component, obj: &Objective, seed: u64) -> Result<Probe> {
    obj.validate()?;
    let mut f = Forward::new(params, batch, obj.weights, false)?;
    let v = f.component(c, obj, seed)?;
    let value = v.map_or(0.0, |v| f.g.tape.scalar(v));
    Ok(Probe { value, branch: f.g.tape.branch_signature() })
}

fn objective(weights: &LossWeights, similarity: Similarity, mask_rate: f64) -> Objective {
    Objective { weights: *weights, toggles: LossToggles::all(), similarity, mask_rate }
}

pub fn dts_loss(params: &ModelParams, batch: &Batch, w: &LossWeights, similarity: Similarity) -> Result<GradResult> {
    component_loss(params, batch, Component::Dts, &objective(w, similarity, 0.15), 0)
}

/// `(L_i2t, L_t2i)` separately.
pub fn dts_directions(params: &ModelParams, batch: &Batch, w: &LossWeights, similarity: Similarity) -> Result<(f64, f64)> {
    let mut f = Forward::new(params, batch, *w, false)?;
    let (a, b) = f.dts_parts(similarity)?;
    Ok((f.g.tape.scalar(a), f.g.tape.scalar(b)))
}

pub fn diac_loss(params: &ModelParams, batch: &Batch, w: &LossWeights) -> Result<GradResult> {
    component_loss(params, batch, Component::Diac, &objective(w, Similarity::Tokenwise, 0.15), 0)
}

pub fn siam_loss(params: &ModelParams, batch: &Batch, w: &LossWeights) -> Result<GradResult> {
    component_loss(params, batch, Component::Siam, &objective(w, Similarity::Tokenwise, 0.15), 0)
}

pub fn mapm_loss(params: &ModelParams, batch: &Batch, mask_rate: f64, seed: u64) -> Result<GradResult> {
    component_loss(params, batch, Component::Mapm, &objective(&LossWeights::default(), Similarity::Tokenwise, mask_rate), seed)
}

pub fn mlm_loss(params: &ModelParams, batch: &Batch, mask_rate: f64, seed: u64) -> Result<GradResult> {
    component_loss(params, batch, Component::Mlm, &objective(&LossWeights::default(), Similarity::Tokenwise, mask_rate), seed)
}

pub fn id_loss(params: &ModelParams, batch: &Batch) -> Result<GradResult> {
    component_loss(params, batch, Component::Id, &Objective::default(), 0)
}

/// `⅓(L_diac + L_siam + L_mapm)`.
pub fn dapl_loss(params: &ModelParams, batch: &Batch, w: &LossWeights, mask_rate: f64, seed: u64) -> Result<GradResult> {
    let obj = Objective {
        weights: LossWeights { lambda_dts: 0.0, lambda_mlm: 0.0, lambda_id: 0.0, lambda_dapl: 1.0, ..*w },
        toggles: LossToggles::only(&[Component::Diac, Component::Siam, Component::Mapm]),
        similarity: Similarity::Tokenwise,
        mask_rate,
    };
    Ok(total_loss(params, batch, &obj, seed)?.grads)
}
