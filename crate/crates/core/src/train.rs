//! Adam with warmup plus cosine decay, global gradient clipping and the
//! deterministic training loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossToggles, LossWeights, Objective};
use crate::metrics::{evaluate, MetricsReport, QueryFilter};
use crate::model::{ModelConfig, ModelParams, ParamId};
use crate::similarity::Similarity;
use crate::synth::{make_batches, with_random_negatives, DatasetManifest};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    /// Peak rate of the cross encoder and identity classifier.
    pub fresh_module_lr: f64,
    pub clip_norm: f64,
    pub loss_weights: LossWeights,
    pub loss_toggles: LossToggles,
    /// Similarity used by the image-text matching loss and by evaluation.
    pub similarity: Similarity,
    pub mask_rate: f64,
    /// Each epoch, every training caption gets up to this many extra true
    /// negative descriptors.
    pub train_negatives: usize,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 disables periodic evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            base_lr: 1e-5,
            warmup_epochs: 5,
            warmup_start_lr: 1e-6,
            fresh_module_lr: 5e-5,
            clip_norm: 1.0,
            loss_weights: LossWeights::default(),
            loss_toggles: LossToggles::all(),
            similarity: Similarity::Tokenwise,
            mask_rate: 0.15,
            train_negatives: 2,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Rates sized for training the small encoders from scratch on the
    /// synthetic data.
    pub fn desk_scale() -> Self {
        Self { base_lr: 3e-3, warmup_start_lr: 3e-4, fresh_module_lr: 1e-2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Err(Error::Config { field, reason: reason.into() });
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs", "must be smaller than epochs");
        }
        for (field, v) in [
            ("base_lr", self.base_lr),
            ("warmup_start_lr", self.warmup_start_lr),
            ("fresh_module_lr", self.fresh_module_lr),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(field, "must be positive");
            }
        }
        self.objective().validate()
    }

    pub fn objective(&self) -> Objective {
        Objective {
            weights: self.loss_weights,
            toggles: self.loss_toggles,
            similarity: self.similarity,
            mask_rate: self.mask_rate,
        }
    }

    /// Every field in a fixed order; the config hash is taken over this.
    pub fn canonical_string(&self) -> String {
        let w = &self.loss_weights;
        let t = &self.loss_toggles;
        format!(
            "epochs={};batch_size={};base_lr={:e};warmup_epochs={};warmup_start_lr={:e};fresh_module_lr={:e};\
             clip_norm={:e};tau={};epsilon={:e};lambda_dts={};lambda_mlm={};lambda_id={};lambda_dapl={};\
             dts={};diac={};siam={};mapm={};mlm={};id={};similarity={:?};mask_rate={};train_negatives={};seed={};eval_every={}",
            self.epochs,
            self.batch_size,
            self.base_lr,
            self.warmup_epochs,
            self.warmup_start_lr,
            self.fresh_module_lr,
            self.clip_norm,
            w.tau,
            w.epsilon,
            w.lambda_dts,
            w.lambda_mlm,
            w.lambda_id,
            w.lambda_dapl,
            t.dts,
            t.diac,
            t.siam,
            t.mapm,
            t.mlm,
            t.id,
            self.similarity,
            self.mask_rate,
            self.train_negatives,
            self.seed,
            self.eval_every,
        )
    }

    /// Hex SHA-256 of [`TrainConfig::canonical_string`].
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Linear warmup from `warmup_start_lr` to `base_lr`, then
/// `base_lr · ½(1 + cos(π · progress))` down to zero at the last step.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.epochs * steps_per_epoch;
    if step < warm {
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warm).max(1);
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// Rate for one parameter: fresh modules follow the same schedule scaled to
/// their own peak.
pub fn param_lr(id: ParamId, step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let lr = lr_at(step, steps_per_epoch, cfg);
    if id.is_fresh_module() {
        lr * cfg.fresh_module_lr / cfg.base_lr
    } else {
        lr
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<ParamId, DenseTensor>,
    pub v: BTreeMap<ParamId, DenseTensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self { t: 0, m: params.zero_grads(), v: params.zero_grads() }
    }
}

/// One Adam update with bias correction; `lr` gives each parameter's rate.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<ParamId, DenseTensor>,
    state: &mut AdamState,
    lr: impl Fn(ParamId) -> f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
    let c2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
    for &id in ParamId::ALL {
        let g = grads.get(&id).ok_or_else(|| Error::Config { field: "grads", reason: format!("missing {}", id.name()) })?;
        let rate = lr(id);
        let m = state.m.get_mut(&id).expect("state covers every parameter");
        let v = state.v.get_mut(&id).expect("state covers every parameter");
        let p = params.get_mut(id);
        if g.len() != p.len() {
            return Err(Error::Shape { op: "adam_step", detail: format!("gradient of {} has the wrong size", id.name()) });
        }
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            pd[i] -= rate * mh / (libm::sqrt(vh) + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<ParamId, DenseTensor>, max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.values().flat_map(|g| g.data()).map(|v| v * v).sum());
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub epoch: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    pub final_checkpoint: Option<String>,
    pub config_hash: String,
}

/// Model sizes for a manifest: desk-scale widths, the manifest's patch
/// width, vocabulary and identity count.
pub fn model_config_for(manifest: &DatasetManifest) -> ModelConfig {
    ModelConfig { patch_dim: manifest.patch_dim, ..ModelConfig::desk(manifest.vocab.len(), manifest.num_identities()) }
}

pub fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (step as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    step_seed(seed ^ 0xe90c, epoch)
}

/// Optimisation state that can be checkpointed and resumed at any step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(model, cfg.seed)?;
        let adam = AdamState::new(&params);
        Ok(Self { cfg, params, adam, step: 0 })
    }

    pub fn for_manifest(cfg: TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        Self::new(cfg, model_config_for(manifest))
    }

    pub fn steps_per_epoch(&self, manifest: &DatasetManifest) -> usize {
        manifest.samples.len() / self.cfg.batch_size
    }

    pub fn total_steps(&self, manifest: &DatasetManifest) -> usize {
        self.cfg.epochs * self.steps_per_epoch(manifest)
    }

    /// Loss, clipping and one Adam update on `batch` at the current step.
    pub fn train_step(&mut self, batch: &crate::losses::Batch, steps_per_epoch: usize) -> Result<StepLog> {
        let step = self.step;
        let out = total_loss(&self.params, batch, &self.cfg.objective(), step_seed(self.cfg.seed, step))
            .map_err(|e| match e {
                Error::NonFinite(detail) => Error::Divergence { step, breakdown: detail },
                other => other,
            })?;
        let mut grads = out.grads.grads;
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { step, breakdown: format!("{:?}", out.breakdown) });
        }
        let cfg = self.cfg;
        adam_step(&mut self.params, &grads, &mut self.adam, |id| param_lr(id, step, steps_per_epoch, &cfg))?;
        if !self.params.is_finite() {
            return Err(Error::Divergence { step, breakdown: format!("{:?}", out.breakdown) });
        }
        self.step += 1;
        Ok(StepLog { step, lr: lr_at(step, steps_per_epoch, &cfg), losses: out.breakdown, grad_norm })
    }

    /// Trains from the current step up to `stop_at` (or the end of the
    /// schedule), evaluating every `eval_every` epochs on `eval`.
    pub fn fit(
        &mut self,
        manifest: &DatasetManifest,
        eval: Option<(&DatasetManifest, QueryFilter)>,
        stop_at: Option<usize>,
    ) -> Result<RunRecord> {
        let spe = self.steps_per_epoch(manifest);
        let total = self.total_steps(manifest);
        let end = stop_at.map_or(total, |s| s.min(total));
        let mut record =
            RunRecord { steps: Vec::new(), evals: Vec::new(), final_checkpoint: None, config_hash: self.cfg.config_hash() };
        if spe == 0 && self.cfg.epochs > 0 {
            return Err(Error::Batch(format!(
                "{} samples cannot fill one batch of {}",
                manifest.samples.len(),
                self.cfg.batch_size
            )));
        }
        while self.step < end {
            let epoch = self.step / spe;
            let es = epoch_seed(self.cfg.seed, epoch);
            let source = with_random_negatives(manifest, self.cfg.train_negatives, es)?;
            let batches = make_batches(&source, self.cfg.batch_size, es)?;
            for batch in &batches[self.step % spe..] {
                if self.step >= end {
                    break;
                }
                record.steps.push(self.train_step(batch, spe)?);
            }
            let done_epoch = self.step / spe;
            if self.step.is_multiple_of(spe) && self.cfg.eval_every > 0 && done_epoch.is_multiple_of(self.cfg.eval_every) {
                if let Some((m, filter)) = eval {
                    let report = evaluate(&self.params, m, self.cfg.similarity, filter)?;
                    record.evals.push(EvalLog { epoch: done_epoch, report });
                }
            }
        }
        Ok(record)
    }
}

/// Fresh model trained on `manifest` for the whole schedule.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<(Trainer, RunRecord)> {
    let mut t = Trainer::for_manifest(*cfg, manifest)?;
    let record = t.fit(manifest, None, None)?;
    Ok((t, record))
}
