//! Finite-difference verification of every loss component on a small
//! model and synthetic batch.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{component_loss, component_probe, Batch, Component, Objective};
use crate::model::{ModelConfig, ModelParams, ParamId};
use crate::numeric::{finite_diff_probe, relative_error};
use crate::synth::{generate_dataset, make_batches, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Gradients at or below this magnitude on both sides are not compared.
    pub floor: f64,
    pub coords_per_tensor: usize,
    /// Scale of the uniform parameter initialisation.
    pub init_scale: f64,
    /// Negates one component's analytic gradient, to prove the check bites.
    #[doc(hidden)]
    pub flip_sign: Option<Component>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 3,
            step: 1e-5,
            tolerance: 1e-3,
            floor: 1e-6,
            coords_per_tensor: 3,
            init_scale: 1.0,
            flip_sign: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: Component,
    pub value: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose probe crossed a max/clamp switch.
    pub skipped: usize,
    pub pass: bool,
}

/// A tiny model plus one batch drawn from a small synthetic dataset.
pub fn fixture(seed: u64, batch_size: usize, init_scale: f64) -> Result<(ModelParams, Batch)> {
    if batch_size == 0 || batch_size > 8 {
        return Err(Error::Config { field: "batch_size", reason: "gradient checks use 1..=8 pairs".into() });
    }
    let synth = SynthConfig {
        num_attributes: 4,
        identities: 4,
        images_per_identity: 2,
        mentioned_positive: 1,
        mentioned_negative: 1,
        confusable_fraction: 0.0,
        seed,
        ..SynthConfig::default()
    };
    let data = generate_dataset(&synth, 4)?;
    let cfg = ModelConfig {
        dim: 8,
        patch_dim: 4,
        heads: 4,
        max_text_len: 16,
        vocab_size: data.train.vocab.len(),
        num_classes: data.train.num_identities(),
    };
    let params = ModelParams::init_uniform(cfg, seed ^ 0x5eed, init_scale)?;
    let batch = make_batches(&data.train, batch_size, seed)?.remove(0);
    Ok((params, batch))
}

pub fn check_component(
    params: &ModelParams,
    batch: &Batch,
    component: Component,
    obj: &Objective,
    seed: u64,
    cfg: &GradcheckConfig,
) -> Result<ComponentReport> {
    let analytic = component_loss(params, batch, component, obj, seed)?;
    let sign = if cfg.flip_sign == Some(component) { -1.0 } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (component as u64 + 1).wrapping_mul(0x9e37_79b9));
    let mut coords = Vec::new();
    for &id in ParamId::ALL {
        let g = &analytic.grads[&id];
        let mut live: Vec<usize> = (0..g.len()).filter(|&i| g.data()[i].abs() > cfg.floor).collect();
        live.shuffle(&mut rng);
        coords.extend(live.into_iter().take(cfg.coords_per_tensor).map(|i| (id, i)));
    }
    let probes = finite_diff_probe(|p: &ModelParams| component_probe(p, batch, component, obj, seed), params, &coords, cfg.step)?;
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    for d in probes {
        if !d.smooth {
            skipped += 1;
            continue;
        }
        let a = sign * analytic.grads[&d.key].data()[d.index];
        worst = worst.max(relative_error(a, d.derivative, cfg.floor));
        checked += 1;
    }
    Ok(ComponentReport {
        component,
        value: analytic.value,
        max_rel_error: worst,
        checked,
        skipped,
        pass: worst <= cfg.tolerance,
    })
}

/// Checks all six components on the fixture for `cfg.seed` and
/// `cfg.batch_size`.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<ComponentReport>> {
    let (params, batch) = fixture(cfg.seed, cfg.batch_size, cfg.init_scale)?;
    let obj = Objective::default();
    Component::ALL.iter().map(|&c| check_component(&params, &batch, c, &obj, cfg.seed, cfg)).collect()
}
