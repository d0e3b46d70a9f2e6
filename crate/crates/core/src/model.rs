//! Parameter layout of the image, text and cross encoders plus the identity
//! classifier.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ParamSet;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width `d`.
    pub dim: usize,
    /// Patch feature width `d_in`.
    pub patch_dim: usize,
    pub heads: usize,
    /// Maximum text length `n_t`, including the sos/eos frame.
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Desk-scale sizes: d = 64, d_in = 32, 4 heads, n_t = 32.
    pub fn desk(vocab_size: usize, num_classes: usize) -> Self {
        Self { dim: 64, patch_dim: 32, heads: 4, max_text_len: 32, vocab_size, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Err(Error::Config { field, reason: reason.into() });
        if self.dim == 0 || self.patch_dim == 0 {
            return bad("dim", "dimensions must be positive");
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("heads", "must divide the model width");
        }
        if self.max_text_len < 2 {
            return bad("max_text_len", "needs room for sos and eos");
        }
        if self.vocab_size < 3 {
            return bad("vocab_size", "needs the three special tokens");
        }
        if self.num_classes == 0 {
            return bad("num_classes", "must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

macro_rules! param_ids {
    ($($variant:ident => $name:literal),* $(,)?) => {
        /// Every trainable tensor of the model.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum ParamId { $($variant),* }

        impl ParamId {
            pub const ALL: &'static [ParamId] = &[$(ParamId::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(ParamId::$variant => $name),* }
            }

            pub fn from_name(name: &str) -> Option<ParamId> {
                match name { $($name => Some(ParamId::$variant),)* _ => None }
            }
        }
    };
}

param_ids! {
    TokenEmbedding => "text.token_embedding",
    Positional => "text.positional",
    TextQuery => "text.attn.query",
    TextKey => "text.attn.key",
    TextValue => "text.attn.value",
    TextOutput => "text.attn.output",
    ImageCls => "image.cls",
    PatchWeight => "image.patch_projection.weight",
    PatchBias => "image.patch_projection.bias",
    CrossQuery => "cross.attn.query",
    CrossKey => "cross.attn.key",
    CrossValue => "cross.attn.value",
    CrossOutput => "cross.attn.output",
    CrossFf1Weight => "cross.ff1.weight",
    CrossFf1Bias => "cross.ff1.bias",
    CrossFf2Weight => "cross.ff2.weight",
    CrossFf2Bias => "cross.ff2.bias",
    VocabHead => "cross.vocab_head",
    IdWeight => "id.weight",
    IdBias => "id.bias",
}

impl ParamId {
    pub fn shape(self, cfg: &ModelConfig) -> [usize; 2] {
        let d = cfg.dim;
        match self {
            ParamId::TokenEmbedding => [cfg.vocab_size, d],
            ParamId::Positional => [cfg.max_text_len, d],
            ParamId::TextQuery | ParamId::TextKey | ParamId::TextValue | ParamId::TextOutput => [d, d],
            ParamId::ImageCls | ParamId::PatchBias | ParamId::CrossFf2Bias => [1, d],
            ParamId::PatchWeight => [cfg.patch_dim, d],
            ParamId::CrossQuery | ParamId::CrossKey | ParamId::CrossValue | ParamId::CrossOutput => [d, d],
            ParamId::CrossFf1Weight => [d, 4 * d],
            ParamId::CrossFf1Bias => [1, 4 * d],
            ParamId::CrossFf2Weight => [4 * d, d],
            ParamId::VocabHead => [d, cfg.vocab_size],
            ParamId::IdWeight => [d, cfg.num_classes],
            ParamId::IdBias => [1, cfg.num_classes],
        }
    }

    pub fn is_bias(self) -> bool {
        matches!(self, ParamId::PatchBias | ParamId::CrossFf1Bias | ParamId::CrossFf2Bias | ParamId::IdBias)
    }

    /// Modules trained from scratch even in the pretrained setting: the
    /// cross encoder and the identity classifier.
    pub fn is_fresh_module(self) -> bool {
        let n = self.name();
        n.starts_with("cross.") || n.starts_with("id.")
    }
}

/// All trainable tensors. The text embedding table is a single tensor used
/// for captions and attribute prompts alike.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<ParamId, DenseTensor>,
}

impl ModelParams {
    /// Gaussian(0, 0.02) weights and zero biases. The text self-attention
    /// output projection starts at zero, so a fresh text encoder is exactly
    /// embedding plus position.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut tensors = BTreeMap::new();
        for &id in ParamId::ALL {
            let [r, c] = id.shape(&config);
            let t = if id.is_bias() || id == ParamId::TextOutput {
                DenseTensor::zeros(&[r, c])
            } else {
                let data = (0..r * c).map(|_| normal.sample(&mut rng)).collect();
                DenseTensor::matrix(r, c, data)?
            };
            tensors.insert(id, t);
        }
        Ok(Self { config, tensors })
    }

    /// Every entry drawn uniformly from `[-scale, scale]`; used by gradient
    /// checks so that no parameter sits at an artificial zero.
    pub fn init_uniform(config: ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new_inclusive(-scale, scale).map_err(|e| Error::Domain(format!("{e}")))?;
        let mut tensors = BTreeMap::new();
        for &id in ParamId::ALL {
            let [r, c] = id.shape(&config);
            let data = (0..r * c).map(|_| u.sample(&mut rng)).collect();
            tensors.insert(id, DenseTensor::matrix(r, c, data)?);
        }
        Ok(Self { config, tensors })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors =
            ParamId::ALL.iter().map(|&id| (id, DenseTensor::zeros(&id.shape(&config)))).collect();
        Ok(Self { config, tensors })
    }

    /// Assembles parameters from named tensors, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<ParamId, DenseTensor>) -> Result<Self> {
        config.validate()?;
        for &id in ParamId::ALL {
            let t = tensors.get(&id).ok_or_else(|| Error::Config {
                field: "tensors",
                reason: format!("missing {}", id.name()),
            })?;
            let [r, c] = id.shape(&config);
            if t.rows() != r || t.cols() != c || t.len() != r * c {
                return Err(Error::Shape {
                    op: "ModelParams::from_tensors",
                    detail: format!("{} expected {r}x{c}, got {:?}", id.name(), t.shape()),
                });
            }
        }
        if tensors.len() != ParamId::ALL.len() {
            return Err(Error::Config { field: "tensors", reason: "unexpected extra tensors".into() });
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, id: ParamId) -> &DenseTensor {
        &self.tensors[&id]
    }

    /// Replaces one tensor; the shape must match.
    pub fn set(&mut self, id: ParamId, value: DenseTensor) -> Result<()> {
        let [r, c] = id.shape(&self.config);
        if value.rows() != r || value.cols() != c {
            return Err(Error::Shape { op: "ModelParams::set", detail: format!("{} expects {r}x{c}", id.name()) });
        }
        self.tensors.insert(id, value);
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut DenseTensor {
        self.tensors.get_mut(&id).expect("every parameter is present")
    }

    pub fn tensors(&self) -> &BTreeMap<ParamId, DenseTensor> {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &DenseTensor)> {
        self.tensors.iter().map(|(k, v)| (*k, v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(DenseTensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(DenseTensor::is_finite)
    }

    pub fn zero_grads(&self) -> BTreeMap<ParamId, DenseTensor> {
        self.tensors.iter().map(|(k, v)| (*k, DenseTensor::zeros(v.shape()))).collect()
    }

    pub fn coordinates(&self) -> Vec<(ParamId, usize)> {
        self.tensors.iter().flat_map(|(k, v)| (0..v.len()).map(move |i| (*k, i))).collect()
    }
}

impl ParamSet for ModelParams {
    type Key = ParamId;

    fn entries(&self) -> Vec<(ParamId, &DenseTensor)> {
        self.iter().collect()
    }

    fn coord_mut(&mut self, key: &ParamId, index: usize) -> &mut f64 {
        &mut self.get_mut(*key).data_mut()[index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip_and_are_unique() {
        let mut seen = alloc::collections::BTreeSet::new();
        for &id in ParamId::ALL {
            assert_eq!(ParamId::from_name(id.name()), Some(id));
            assert!(seen.insert(id.name()));
        }
        assert_eq!(ParamId::from_name("nope"), None);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = ModelConfig::desk(40, 10);
        let a = ModelParams::init(cfg, 3).unwrap();
        let b = ModelParams::init(cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelParams::init(cfg, 4).unwrap());
        assert!(a.get(ParamId::IdBias).data().iter().all(|&v| v == 0.0));
        assert!(a.get(ParamId::TextOutput).data().iter().all(|&v| v == 0.0));
        let w = a.get(ParamId::TokenEmbedding);
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((libm::sqrt(var) - 0.02).abs() < 0.002);
    }

    #[test]
    fn from_tensors_checks_shapes() {
        let cfg = ModelConfig::desk(40, 10);
        let p = ModelParams::init(cfg, 0).unwrap();
        let mut t = p.tensors().clone();
        assert!(ModelParams::from_tensors(cfg, t.clone()).is_ok());
        t.insert(ParamId::IdBias, DenseTensor::zeros(&[1, 3]));
        assert!(ModelParams::from_tensors(cfg, t.clone()).is_err());
        t.remove(&ParamId::IdBias);
        assert!(ModelParams::from_tensors(cfg, t).is_err());
    }

    #[test]
    fn rejects_bad_head_count() {
        let mut cfg = ModelConfig::desk(40, 10);
        cfg.heads = 5;
        assert!(ModelParams::init(cfg, 0).is_err());
    }
}
