//! JSON config files. Unknown keys are rejected and omitted keys take
//! their defaults.

use std::path::Path;

use attrank_core::synth::SynthConfig;
use attrank_core::train::TrainConfig;
use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

pub fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse { path: path.into(), line: e.line(), reason: e.to_string() })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let cfg: TrainConfig = parse_json(&read(path)?, path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_synth_config(path: &Path) -> Result<SynthConfig> {
    let cfg: SynthConfig = parse_json(&read(path)?, path)?;
    cfg.validate()?;
    Ok(cfg)
}
