//! Checkpoints as versioned JSON.
//!
//! ```text
//! {
//!   "format": "attrank-checkpoint",
//!   "version": 1,
//!   "model_config": { "dim", "patch_dim", "heads", "max_text_len", "vocab_size", "num_classes" },
//!   "tensors": [ { "name", "shape", "data" }, ... ],
//!   "train": null | { "config": TrainConfig, "step", "adam_t", "adam_m": [tensors], "adam_v": [tensors] }
//! }
//! ```
//!
//! Tensors appear in a fixed order and every parameter must be present.
//! Floats are written in shortest round-trip form, so save then load is
//! bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use attrank_core::model::{ModelConfig, ModelParams, ParamId};
use attrank_core::train::{AdamState, TrainConfig, Trainer};
use attrank_core::DenseTensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "attrank-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: usize,
    pub adam_t: u64,
    pub adam_m: Vec<NamedTensor>,
    pub adam_v: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model_config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
    pub train: Option<TrainState>,
}

fn named(map: &BTreeMap<ParamId, DenseTensor>) -> Vec<NamedTensor> {
    ParamId::ALL
        .iter()
        .map(|id| {
            let t = &map[id];
            NamedTensor { name: id.name().to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() }
        })
        .collect()
}

fn unnamed(list: &[NamedTensor]) -> std::result::Result<BTreeMap<ParamId, DenseTensor>, String> {
    let mut out = BTreeMap::new();
    for t in list {
        let id = ParamId::from_name(&t.name).ok_or_else(|| format!("unknown tensor {:?}", t.name))?;
        let value = DenseTensor::new(t.shape.clone(), t.data.clone()).map_err(|e| format!("tensor {}: {e}", t.name))?;
        if out.insert(id, value).is_some() {
            return Err(format!("tensor {} appears twice", t.name));
        }
    }
    Ok(out)
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            model_config: *params.config(),
            tensors: named(params.tensors()),
            train: None,
        }
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            train: Some(TrainState {
                config: t.cfg,
                step: t.step,
                adam_t: t.adam.t,
                adam_m: named(&t.adam.m),
                adam_v: named(&t.adam.v),
            }),
            ..Self::from_params(&t.params)
        }
    }

    pub fn params(&self) -> std::result::Result<ModelParams, String> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(format!("expected {FORMAT} version {VERSION}, found {} version {}", self.format, self.version));
        }
        ModelParams::from_tensors(self.model_config, unnamed(&self.tensors)?).map_err(|e| e.to_string())
    }

    /// A trainer positioned exactly where this checkpoint was taken.
    pub fn trainer(&self) -> std::result::Result<Trainer, String> {
        let params = self.params()?;
        let st = self.train.as_ref().ok_or("checkpoint has no optimiser state")?;
        let adam = AdamState { t: st.adam_t, m: unnamed(&st.adam_m)?, v: unnamed(&st.adam_v)? };
        for (id, p) in params.iter() {
            let ok = |m: &BTreeMap<ParamId, DenseTensor>| m.get(&id).is_some_and(|x| x.same_shape(p));
            if !ok(&adam.m) || !ok(&adam.v) {
                return Err(format!("optimiser moments for {} are missing or misshapen", id.name()));
            }
        }
        Ok(Trainer { cfg: st.config, params, adam, step: st.step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| Error::Parse { path: path.into(), line: e.line(), reason: e.to_string() })?;
        c.params().map_err(|reason| Error::Format { path: path.into(), reason })?;
        Ok(c)
    }
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    Checkpoint::load(path)?.params().map_err(|reason| Error::Format { path: path.into(), reason })
}

pub fn load_trainer(path: &Path) -> Result<Trainer> {
    Checkpoint::load(path)?.trainer().map_err(|reason| Error::Format { path: path.into(), reason })
}
