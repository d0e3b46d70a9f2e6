//! Deterministic synthetic person-attribute data.
//!
//! Every identity is a K-bit attribute vector. An image has one patch per
//! attribute: `base_k + a_k · signal_k + noise`. Captions are built from
//! the attribute table phrases, so extraction recovers the ground truth.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attributes::{
    append_negatives, extract_attributes, render_caption, render_prompts, AttributeAnnotation, AttributeTable,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::losses::{Batch, BatchItem};
use crate::tensor::DenseTensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_attributes: usize,
    pub identities: usize,
    pub images_per_identity: usize,
    pub captions_per_image: usize,
    pub noise_sigma: f64,
    /// Minimum number of present attributes per identity, all of which are
    /// mentioned when `mention_all_present` is set; otherwise exactly this
    /// many are mentioned.
    pub mentioned_positive: usize,
    /// Absent attributes negated in each caption.
    pub mentioned_negative: usize,
    pub confusable_fraction: f64,
    pub mention_all_present: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_attributes: 12,
            identities: 100,
            images_per_identity: 4,
            captions_per_image: 1,
            noise_sigma: 0.1,
            mentioned_positive: 3,
            mentioned_negative: 2,
            confusable_fraction: 0.2,
            mention_all_present: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(Error::Config { field, reason });
        for (field, v) in [
            ("num_attributes", self.num_attributes),
            ("identities", self.identities),
            ("images_per_identity", self.images_per_identity),
            ("captions_per_image", self.captions_per_image),
            ("mentioned_positive", self.mentioned_positive),
            ("mentioned_negative", self.mentioned_negative),
        ] {
            if v == 0 {
                return bad(field, "must be at least 1".into());
            }
        }
        if self.mentioned_positive + self.mentioned_negative > self.num_attributes {
            return bad(
                "mentioned_positive",
                format!(
                    "mentioned_positive + mentioned_negative ({} + {}) must not exceed num_attributes ({})",
                    self.mentioned_positive, self.mentioned_negative, self.num_attributes
                ),
            );
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma", "must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.confusable_fraction) {
            return bad("confusable_fraction", "must lie in [0, 1]".into());
        }
        AttributeTable::builtin(self.num_attributes).map(|_| ())
    }

    /// Number of Hamming-1 identity pairs per split.
    pub fn confusable_pairs(&self) -> usize {
        let p = libm::round(self.confusable_fraction * self.identities as f64 / 2.0) as usize;
        p.min(self.identities / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: usize,
    pub identity_id: usize,
    /// Images with several captions share this id.
    pub image_id: usize,
    pub patch_features: DenseTensor,
    pub caption: Vec<String>,
    pub annotation: AttributeAnnotation,
    /// Ground-truth present attributes of the identity.
    pub attributes: BTreeSet<usize>,
    /// True when the identity has a Hamming-1 partner in the split.
    pub confusable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: Split,
    pub num_attributes: usize,
    pub patch_dim: usize,
    pub vocab: Vocabulary,
    pub attribute_table: AttributeTable,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn attribute_table_hash(&self) -> String {
        self.attribute_table.content_hash()
    }

    pub fn num_identities(&self) -> usize {
        self.samples.iter().map(|s| s.identity_id + 1).max().unwrap_or(0)
    }

    pub fn num_images(&self) -> usize {
        self.samples.iter().map(|s| s.image_id).collect::<BTreeSet<_>>().len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generation(m));
        if self.attribute_table.len() != self.num_attributes {
            return bad(format!("table has {} attributes, header says {}", self.attribute_table.len(), self.num_attributes));
        }
        let ids: BTreeSet<usize> = self.samples.iter().map(|s| s.identity_id).collect();
        if ids.iter().copied().ne(0..ids.len()) {
            return bad("identity ids are not dense from 0".into());
        }
        for s in &self.samples {
            let n = self.attribute_table.len();
            let ann = &s.annotation;
            ann.validate(&self.attribute_table)?;
            if ann.positive_ids.len() + ann.negative_ids.len() != n {
                return bad(format!("sample {} annotation does not cover every attribute", s.sample_id));
            }
            if s.patch_features.cols() != self.patch_dim || s.patch_features.rows() == 0 || !s.patch_features.is_finite() {
                return bad(format!("sample {} has malformed patch features", s.sample_id));
            }
            if s.attributes.iter().any(|&a| a >= n) {
                return bad(format!("sample {} has an unknown attribute", s.sample_id));
            }
            self.vocab.tokenize(&s.caption)?;
        }
        Ok(())
    }
}

/// Train and test splits sharing one attribute world; test identities are
/// fresh attribute vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

const WORLD_STREAM: u64 = 0;
const MAX_ATTEMPTS: usize = 200_000;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn hamming(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

struct Identity {
    bits: Vec<bool>,
    confusable: bool,
}

fn sample_identities(cfg: &SynthConfig, rng: &mut ChaCha8Rng, exclude: &[Vec<bool>]) -> Result<Vec<Identity>> {
    let k = cfg.num_attributes;
    let counts_ok = |v: &[bool]| {
        let present = v.iter().filter(|&&b| b).count();
        present >= cfg.mentioned_positive && k - present >= cfg.mentioned_negative
    };
    let mut out: Vec<Identity> = Vec::with_capacity(cfg.identities);
    let far = |v: &[bool], out: &[Identity]| {
        out.iter().all(|o| hamming(&o.bits, v) >= 2) && exclude.iter().all(|e| e.as_slice() != v)
    };
    let mut attempts = 0;
    let mut draw = |rng: &mut ChaCha8Rng| -> Result<Vec<bool>> {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Generation(format!(
                "could not place {} identities with {} attributes after {MAX_ATTEMPTS} attempts",
                cfg.identities, k
            )));
        }
        Ok((0..k).map(|_| rng.random::<bool>()).collect())
    };
    for _ in 0..cfg.confusable_pairs() {
        loop {
            let v = draw(rng)?;
            let mut w = v.clone();
            let flip = rng.random_range(0..k);
            w[flip] = !w[flip];
            if counts_ok(&v) && counts_ok(&w) && far(&v, &out) && far(&w, &out) {
                out.push(Identity { bits: v, confusable: true });
                out.push(Identity { bits: w, confusable: true });
                break;
            }
        }
    }
    while out.len() < cfg.identities {
        let v = draw(rng)?;
        if counts_ok(&v) && far(&v, &out) {
            out.push(Identity { bits: v, confusable: false });
        }
    }
    out.shuffle(rng);
    Ok(out)
}

fn ids_where(bits: &[bool], value: bool) -> Vec<usize> {
    bits.iter().enumerate().filter(|(_, &b)| b == value).map(|(i, _)| i).collect()
}

struct World {
    base: Vec<Vec<f64>>,
    signal: Vec<Vec<f64>>,
}

impl World {
    fn new(cfg: &SynthConfig, patch_dim: usize) -> Self {
        let mut r = rng(cfg.seed, WORLD_STREAM);
        let mut draw = || -> Vec<Vec<f64>> {
            (0..cfg.num_attributes)
                .map(|_| (0..patch_dim).map(|_| StandardNormal.sample(&mut r)).collect())
                .collect()
        };
        let base = draw();
        let signal = draw();
        Self { base, signal }
    }

    fn image(&self, bits: &[bool], sigma: f64, rng: &mut ChaCha8Rng) -> DenseTensor {
        let d = self.base[0].len();
        let noise = Normal::new(0.0, sigma).ok();
        let mut data = Vec::with_capacity(bits.len() * d);
        for (k, &on) in bits.iter().enumerate() {
            for c in 0..d {
                let mut v = self.base[k][c] + if on { self.signal[k][c] } else { 0.0 };
                if let (Some(n), true) = (noise.as_ref(), sigma > 0.0) {
                    v += n.sample(rng);
                }
                data.push(v);
            }
        }
        DenseTensor::from_parts(bits.len(), d, data)
    }
}

fn build_split(
    cfg: &SynthConfig,
    split: Split,
    world: &World,
    table: &AttributeTable,
    identities: &[Identity],
    rng: &mut ChaCha8Rng,
    patch_dim: usize,
) -> DatasetManifest {
    let mut samples = Vec::new();
    let mut image_id = 0;
    for (identity_id, ident) in identities.iter().enumerate() {
        let present = ids_where(&ident.bits, true);
        let absent = ids_where(&ident.bits, false);
        for _ in 0..cfg.images_per_identity {
            let patches = world.image(&ident.bits, cfg.noise_sigma, rng);
            for _ in 0..cfg.captions_per_image {
                let mut pos = present.clone();
                pos.shuffle(rng);
                if !cfg.mention_all_present {
                    pos.truncate(cfg.mentioned_positive);
                }
                let mut neg = absent.clone();
                neg.shuffle(rng);
                neg.truncate(cfg.mentioned_negative);
                let caption = render_caption(table, &pos, &neg);
                let annotation = extract_attributes(&caption, table);
                samples.push(Sample {
                    sample_id: samples.len(),
                    identity_id,
                    image_id,
                    patch_features: patches.clone(),
                    caption,
                    annotation,
                    attributes: present.iter().copied().collect(),
                    confusable: ident.confusable,
                });
            }
            image_id += 1;
        }
    }
    DatasetManifest {
        version: MANIFEST_VERSION,
        split,
        num_attributes: cfg.num_attributes,
        patch_dim,
        vocab: table.vocabulary(),
        attribute_table: table.clone(),
        samples,
    }
}

/// Both splits for `cfg` with `d_in = patch_dim`.
pub fn generate_dataset(cfg: &SynthConfig, patch_dim: usize) -> Result<SyntheticDataset> {
    cfg.validate()?;
    if patch_dim == 0 {
        return Err(Error::Config { field: "patch_dim", reason: "must be at least 1".into() });
    }
    let table = AttributeTable::builtin(cfg.num_attributes)?;
    let world = World::new(cfg, patch_dim);
    let train_ids = sample_identities(cfg, &mut rng(cfg.seed, 1), &[])?;
    let seen: Vec<Vec<bool>> = train_ids.iter().map(|i| i.bits.clone()).collect();
    let test_ids = sample_identities(cfg, &mut rng(cfg.seed, 3), &seen)?;
    let train = build_split(cfg, Split::Train, &world, &table, &train_ids, &mut rng(cfg.seed, 2), patch_dim);
    let test = build_split(cfg, Split::Test, &world, &table, &test_ids, &mut rng(cfg.seed, 4), patch_dim);
    Ok(SyntheticDataset { train, test })
}

/// Converts one sample into a training pair.
pub fn batch_item(manifest: &DatasetManifest, sample: &Sample) -> Result<BatchItem> {
    Ok(BatchItem {
        patches: sample.patch_features.clone(),
        caption: manifest.vocab.tokenize(&sample.caption)?,
        identity: sample.identity_id,
        prompts: render_prompts(&sample.annotation, &manifest.attribute_table, &manifest.vocab)?,
        attributes: sample.attributes.clone(),
    })
}

/// Seeded shuffle cut into contiguous batches of `b`; a trailing partial
/// batch is dropped.
pub fn make_batches(manifest: &DatasetManifest, b: usize, seed: u64) -> Result<Vec<Batch>> {
    if b == 0 {
        return Err(Error::Config { field: "batch_size", reason: "must be at least 1".into() });
    }
    let mut order: Vec<usize> = (0..manifest.samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks_exact(b)
        .map(|chunk| {
            let items = chunk.iter().map(|&i| batch_item(manifest, &manifest.samples[i])).collect::<Result<Vec<_>>>()?;
            Batch::new(items)
        })
        .collect()
}

fn append_true_negatives(s: &mut Sample, table: &AttributeTable, num_neg: usize, r: &mut ChaCha8Rng) {
    let absent: Vec<usize> = (0..table.len()).filter(|a| !s.attributes.contains(a)).collect();
    if absent.is_empty() || num_neg == 0 {
        return;
    }
    let already = extract_attributes(&s.caption, table);
    let mentioned = |a: &usize| {
        let phrase = &table.entries()[*a].phrase;
        s.caption.windows(phrase.len()).any(|w| w == phrase.as_slice())
    };
    let mut fresh: Vec<usize> = absent.iter().copied().filter(|a| !mentioned(a)).collect();
    let mut repeat: Vec<usize> = absent.iter().copied().filter(|a| mentioned(a)).collect();
    fresh.shuffle(r);
    repeat.shuffle(r);
    let picks: Vec<usize> = fresh.into_iter().chain(repeat).cycle().take(num_neg).collect();
    debug_assert!(picks.iter().all(|a| already.negative_ids.contains(a)));
    append_negatives(&mut s.caption, table, &picks);
    s.annotation = extract_attributes(&s.caption, table);
}

/// Appends `num_neg` "no <phrase>" descriptors to every caption, drawn from
/// the sample's true absent attributes (those not yet negated first), and
/// re-extracts the annotations.
pub fn with_negative_descriptors(manifest: &DatasetManifest, num_neg: usize, seed: u64) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    let mut r = rng(seed, 5);
    for s in &mut out.samples {
        append_true_negatives(s, &manifest.attribute_table, num_neg, &mut r);
    }
    Ok(out)
}

/// Like [`with_negative_descriptors`] but each caption gets a uniform
/// count in `0..=max_neg`.
pub fn with_random_negatives(manifest: &DatasetManifest, max_neg: usize, seed: u64) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    if max_neg == 0 {
        return Ok(out);
    }
    let mut r = rng(seed, 6);
    for s in &mut out.samples {
        let n = r.random_range(0..=max_neg);
        append_true_negatives(s, &manifest.attribute_table, n, &mut r);
    }
    Ok(out)
}
