//! Staged training and inference for cascades of denoising networks, plus
//! output blending and on-disk model directories.
//!
//! Every level sees an input built from the LDCT batch and/or the previous
//! level's estimate, and emits either a clean-image estimate directly or a
//! residual that is subtracted from the current estimate. Residual labels
//! follow `estimate - NDCT`, so subtraction moves toward NDCT.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{ImageSlice, PatchPair};
use crate::losses::{loss_and_grad, FeatureExtractor, LossConfig};
use crate::network::{
    build_drl, set_moving_stats, update_moving_stats, BatchStats, BnMode, LayerSpec, Network, NetworkSpec, Params,
    BN_MOMENTUM,
};
use crate::optim::{Adam, AdamConfig};
use crate::simulate::derive_seed;
use crate::tensor::Tensor;
use crate::weights::{save_weights, WeightStore};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Samples per forward pass when running inference over a whole set.
const INFERENCE_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InputRule {
    Ldct,
    PrevPrediction,
    ConcatLdctPrev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LabelRule {
    Ndct,
    ResidualPrevMinusNdct,
    ResidualLdctMinusNdct,
}

impl LabelRule {
    pub fn is_residual(self) -> bool {
        self != LabelRule::Ndct
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutputRule {
    Direct,
    SubtractResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeLevelSpec {
    pub network: NetworkSpec,
    pub loss: LossConfig,
    pub input_rule: InputRule,
    pub label_rule: LabelRule,
    pub output_rule: OutputRule,
}

impl CascadeLevelSpec {
    /// Checks the level's internal consistency; `index` is 0-based.
    pub fn validate(&self, index: usize) -> Result<()> {
        let level = index + 1;
        let err = |msg: String| Err(Error::Config(format!("level {level}: {msg}")));
        self.network.validate_image_network()?;
        self.loss.validate()?;
        if index == 0 && self.input_rule != InputRule::Ldct {
            return err(format!(
                "the first level must use input_rule LDCT, got {:?}",
                self.input_rule
            ));
        }
        let want = if self.input_rule == InputRule::ConcatLdctPrev {
            2
        } else {
            1
        };
        if self.network.input_channels != want {
            return err(format!(
                "input_rule {:?} needs a {want}-channel network, got {}",
                self.input_rule, self.network.input_channels
            ));
        }
        match (self.output_rule, self.label_rule) {
            (OutputRule::SubtractResidual, LabelRule::Ndct) => {
                err("output_rule SUBTRACT_RESIDUAL needs a residual label_rule".into())
            }
            (OutputRule::Direct, l) if l.is_residual() => {
                err(format!("output_rule DIRECT cannot emit the residual label {l:?}"))
            }
            // Subtraction acts on the previous estimate, so from level 2 on
            // the label must be measured against that estimate.
            (OutputRule::SubtractResidual, LabelRule::ResidualLdctMinusNdct) if index > 0 => {
                err("RESIDUAL_LDCT_MINUS_NDCT only matches SUBTRACT_RESIDUAL on the first level".into())
            }
            _ => Ok(()),
        }
    }
}

pub fn validate_levels(specs: &[CascadeLevelSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("a cascade needs at least one level".into()));
    }
    specs.iter().enumerate().try_for_each(|(i, s)| s.validate(i))
}

/// Level 1: DRL with a global residual trained on perceptual loss to map
/// LDCT to NDCT. Level 2: DRL trained with MSE to predict the level-1
/// error, which is subtracted.
pub fn build_hybrid_spec() -> Vec<CascadeLevelSpec> {
    let mut first = build_drl(1);
    first.global_residual = true;
    vec![
        CascadeLevelSpec {
            network: first,
            loss: LossConfig::perceptual(),
            input_rule: InputRule::Ldct,
            label_rule: LabelRule::Ndct,
            output_rule: OutputRule::Direct,
        },
        CascadeLevelSpec {
            network: build_drl(1),
            loss: LossConfig::mse(),
            input_rule: InputRule::PrevPrediction,
            label_rule: LabelRule::ResidualPrevMinusNdct,
            output_rule: OutputRule::SubtractResidual,
        },
    ]
}

/// Difference-image cascade: every level predicts the residual of the
/// current estimate; later levels also see the LDCT input.
pub fn build_wu_spec(n_levels: usize, network: fn(usize) -> NetworkSpec) -> Result<Vec<CascadeLevelSpec>> {
    if n_levels < 1 {
        return Err(Error::Config("n_levels must be >= 1".into()));
    }
    Ok((0..n_levels)
        .map(|i| {
            if i == 0 {
                CascadeLevelSpec {
                    network: network(1),
                    loss: LossConfig::mse(),
                    input_rule: InputRule::Ldct,
                    label_rule: LabelRule::ResidualLdctMinusNdct,
                    output_rule: OutputRule::SubtractResidual,
                }
            } else {
                CascadeLevelSpec {
                    network: network(2),
                    loss: LossConfig::mse(),
                    input_rule: InputRule::ConcatLdctPrev,
                    label_rule: LabelRule::ResidualPrevMinusNdct,
                    output_rule: OutputRule::SubtractResidual,
                }
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Replace the moving batch-norm statistics after training with
    /// population statistics from one pass over the training data.
    #[serde(default = "default_true")]
    pub recalibrate_bn: bool,
    /// Start networks whose output is a correction (a global residual skip
    /// or a subtracted difference image) with a zero output convolution, so
    /// training begins from the unchanged input estimate.
    #[serde(default = "default_true")]
    pub zero_init_head: bool,
}

fn default_batch_size() -> usize {
    32
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamConfig::default(),
            epochs: 15,
            batch_size: default_batch_size(),
            seed: 0,
            shuffle: true,
            recalibrate_bn: true,
            zero_init_head: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.epochs < 1 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub train_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every mini-batch in training order.
    pub batch_losses: Vec<f64>,
}

impl TrainHistory {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.train_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Inputs and labels of one level, `[n, c, h, w]` and `[n, 1, h, w]`.
#[derive(Debug, Clone)]
pub struct LevelData {
    pub inputs: Tensor<f32>,
    pub labels: Tensor<f32>,
}

/// LDCT and NDCT patches stacked into two `[n, 1, h, w]` tensors.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub ldct: Tensor<f32>,
    pub ndct: Tensor<f32>,
}

impl TrainingSet {
    pub fn from_patches(patches: &[PatchPair]) -> Result<Self> {
        let ldct: Vec<&ImageSlice> = patches.iter().map(|p| &p.ldct).collect();
        let ndct: Vec<&ImageSlice> = patches.iter().map(|p| &p.ndct).collect();
        Ok(TrainingSet {
            ldct: crate::network::images_to_tensor(&ldct)?,
            ndct: crate::network::images_to_tensor(&ndct)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ldct.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// SHA-256 over shapes and raw pixel bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in [&self.ldct, &self.ndct] {
            for d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sub(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn level_inputs(rule: InputRule, ldct: &Tensor<f32>, prev: &Tensor<f32>) -> Tensor<f32> {
    match rule {
        InputRule::Ldct => ldct.clone(),
        InputRule::PrevPrediction => prev.clone(),
        InputRule::ConcatLdctPrev => Tensor::concat_channels(ldct, prev),
    }
}

pub fn level_labels(rule: LabelRule, ldct: &Tensor<f32>, prev: &Tensor<f32>, ndct: &Tensor<f32>) -> Tensor<f32> {
    match rule {
        LabelRule::Ndct => ndct.clone(),
        LabelRule::ResidualPrevMinusNdct => sub(prev, ndct),
        LabelRule::ResidualLdctMinusNdct => sub(ldct, ndct),
    }
}

/// Applies a level's output rule to its raw network output.
pub fn level_estimate(rule: OutputRule, prev: &Tensor<f32>, raw: Tensor<f32>) -> Tensor<f32> {
    match rule {
        OutputRule::Direct => raw,
        OutputRule::SubtractResidual => sub(prev, &raw),
    }
}

/// Inference-mode forward pass in fixed-size chunks.
pub fn run_network(spec: &NetworkSpec, params: &Params<f32>, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
    let net = Network::new(spec, params);
    let n = inputs.batch();
    let [_, _, h, w] = inputs.shape();
    let mut out = Vec::with_capacity(n * h * w);
    for start in (0..n).step_by(INFERENCE_BATCH) {
        let idx: Vec<usize> = (start..(start + INFERENCE_BATCH).min(n)).collect();
        out.extend(net.forward(&inputs.select(&idx), BnMode::Inference)?.into_data());
    }
    Ok(Tensor::from_vec([n, 1, h, w], out))
}

fn check_finite_loss(value: f64, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch: epoch + 1,
            batch: batch + 1,
        })
    }
}

/// Trains one level from freshly initialized weights.
/// Whether the level's network output is added to or subtracted from an
/// existing estimate rather than used as the estimate itself.
pub fn predicts_correction(level: &CascadeLevelSpec) -> bool {
    level.network.global_residual || level.output_rule == OutputRule::SubtractResidual
}

/// Glorot weights for the level's network, with the output convolution
/// zeroed when `cfg.zero_init_head` applies.
pub fn initial_weights(level: &CascadeLevelSpec, cfg: &TrainConfig) -> WeightStore {
    let spec = &level.network;
    let mut store = spec.init_weights(cfg.seed);
    if cfg.zero_init_head && predicts_correction(level) {
        if let Some(i) = spec.layers.iter().rposition(|l| matches!(l, LayerSpec::Conv { .. })) {
            for part in ["kernel", "bias"] {
                if let Some(e) = store.get_mut(&format!("layer{i:02}.conv.{part}")) {
                    e.data.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
    store
}

pub fn train_level(
    level: &CascadeLevelSpec,
    data: &LevelData,
    cfg: &TrainConfig,
    fx: Option<&FeatureExtractor>,
) -> Result<(WeightStore, TrainHistory)> {
    cfg.validate()?;
    level.network.validate_image_network()?;
    let n = data.inputs.batch();
    if n == 0 {
        return Err(Error::Config("no training samples".into()));
    }
    if data.labels.batch() != n || data.inputs.channels() != level.network.input_channels {
        return Err(Error::Shape(format!(
            "inputs {:?} / labels {:?} do not fit {}",
            data.inputs.shape(),
            data.labels.shape(),
            level.network.name
        )));
    }
    match (level.loss.needs_extractor(), fx.is_some()) {
        (true, false) => {
            return Err(Error::Config(format!(
                "{:?} loss needs a feature extractor",
                level.loss.kind
            )))
        }
        (false, true) => {
            return Err(Error::Config(
                "feature extractor given for a loss that does not use it".into(),
            ))
        }
        _ => {}
    }

    let spec = &level.network;
    let mut params: Params<f32> = Params::from_store(spec, &initial_weights(level, cfg))?;
    let trainable: Vec<bool> = params.slots.iter().map(|s| s.trainable).collect();
    let mut opt = Adam::new(cfg.optimizer, params.values.iter().map(Vec::len));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64 + 1));
            order.shuffle(&mut rng);
        }
        let mut weighted = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.inputs.select(idx);
            let y = data.labels.select(idx);
            let net = Network::new(spec, &params);
            let (pred, trace) = net.forward_traced(&x, BnMode::Training)?;
            let (value, grad) = loss_and_grad(&pred, &y, fx, &level.loss)?;
            check_finite_loss(value, epoch, b)?;
            let stats = trace.batch_stats.clone();
            let grads = net.backward(trace, Some(&grad), Vec::new(), true);
            let pg = grads.params.expect("parameter gradients requested");
            if pg.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b + 1,
                });
            }
            opt.update(&mut params.values, &pg, &trainable);
            update_moving_stats(&mut params, &stats, BN_MOMENTUM);
            history.batch_losses.push(value);
            weighted += value * idx.len() as f64;
        }
        let record = EpochRecord {
            train_loss: weighted / n as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {}/{}: loss {:.6e} ({:.1}s)",
            spec.name,
            epoch + 1,
            cfg.epochs,
            record.train_loss,
            record.wall_seconds
        );
        history.epochs.push(record);
    }

    if cfg.recalibrate_bn {
        recalibrate_batch_norm(spec, &mut params, &data.inputs, cfg.batch_size)?;
    }
    Ok((params.to_store(), history))
}

/// Population mean/variance of every batch-norm input over one ordered pass
/// of the data, with each batch normalized by its own statistics as during
/// training.
fn recalibrate_batch_norm(
    spec: &NetworkSpec,
    params: &mut Params<f32>,
    inputs: &Tensor<f32>,
    batch_size: usize,
) -> Result<()> {
    let n = inputs.batch();
    let mut sums: Vec<BatchStats> = Vec::new();
    for start in (0..n).step_by(batch_size) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let weight = idx.len() as f64 / n as f64;
        let (_, trace) = Network::new(spec, params).forward_traced(&inputs.select(&idx), BnMode::Training)?;
        if sums.is_empty() {
            sums = trace
                .batch_stats
                .iter()
                .map(|s| BatchStats {
                    layer: s.layer,
                    mean: vec![0.0; s.mean.len()],
                    var: vec![0.0; s.var.len()],
                })
                .collect();
        }
        for (acc, s) in sums.iter_mut().zip(&trace.batch_stats) {
            for c in 0..s.mean.len() {
                acc.mean[c] += weight * s.mean[c];
                // second moment for now
                acc.var[c] += weight * (s.var[c] + s.mean[c] * s.mean[c]);
            }
        }
    }
    for acc in &mut sums {
        for c in 0..acc.mean.len() {
            acc.var[c] = (acc.var[c] - acc.mean[c] * acc.mean[c]).max(0.0);
        }
    }
    set_moving_stats(params, &sums);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedLevel {
    pub spec: CascadeLevelSpec,
    pub weights: WeightStore,
    pub train: TrainConfig,
    pub history: TrainHistory,
    /// Digest of everything that determined these weights, used to skip
    /// retraining when nothing changed.
    pub input_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub levels: Vec<TrainedLevel>,
}

/// Digest of a level's spec, training config, data, and all earlier levels'
/// weights.
pub fn level_input_digest(
    spec: &CascadeLevelSpec,
    cfg: &TrainConfig,
    data_digest: &str,
    fx_checksum: Option<u32>,
    earlier: &[TrainedLevel],
) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec)?);
    h.update(serde_json::to_vec(cfg)?);
    h.update(data_digest.as_bytes());
    if let Some(c) = fx_checksum {
        h.update(c.to_le_bytes());
    }
    for level in earlier {
        h.update(level.weights.checksum()?.to_le_bytes());
    }
    Ok(hex(&h.finalize()))
}

/// Trains all levels in order; see [`train_cascade_resumable`].
pub fn train_cascade(
    specs: &[CascadeLevelSpec],
    data: &TrainingSet,
    cfgs: &[TrainConfig],
    fx: Option<&FeatureExtractor>,
) -> Result<CascadeModel> {
    train_cascade_resumable(specs, data, cfgs, fx, |_, _| Ok(None), |_| Ok(()))
}

/// Trains levels strictly in order. Before training level `k`, `reuse(k,
/// digest)` may hand back an already trained level with a matching digest;
/// `completed` is called after every level (trained or reused).
pub fn train_cascade_resumable(
    specs: &[CascadeLevelSpec],
    data: &TrainingSet,
    cfgs: &[TrainConfig],
    fx: Option<&FeatureExtractor>,
    mut reuse: impl FnMut(usize, &str) -> Result<Option<TrainedLevel>>,
    mut completed: impl FnMut(&TrainedLevel) -> Result<()>,
) -> Result<CascadeModel> {
    validate_levels(specs)?;
    if cfgs.len() != specs.len() {
        return Err(Error::Config(format!(
            "{} levels but {} training configs",
            specs.len(),
            cfgs.len()
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let data_digest = data.digest();
    let fx_checksum = match fx {
        Some(f) => Some(f.weights().checksum()?),
        None => None,
    };
    let mut levels: Vec<TrainedLevel> = Vec::new();
    let mut prev = data.ldct.clone();
    for (k, (spec, cfg)) in specs.iter().zip(cfgs).enumerate() {
        let level_fx = if spec.loss.needs_extractor() { fx } else { None };
        let level_fx_sum = if spec.loss.needs_extractor() { fx_checksum } else { None };
        let digest = level_input_digest(spec, cfg, &data_digest, level_fx_sum, &levels)?;
        let inputs = level_inputs(spec.input_rule, &data.ldct, &prev);
        let level = match reuse(k, &digest)? {
            Some(found) if found.input_digest == digest && found.spec == *spec => {
                log::info!("level {}: reusing weights (digest match)", k + 1);
                found
            }
            _ => {
                let labels = level_labels(spec.label_rule, &data.ldct, &prev, &data.ndct);
                let (weights, history) = train_level(
                    spec,
                    &LevelData {
                        inputs: inputs.clone(),
                        labels,
                    },
                    cfg,
                    level_fx,
                )?;
                TrainedLevel {
                    spec: spec.clone(),
                    weights,
                    train: cfg.clone(),
                    history,
                    input_digest: digest,
                }
            }
        };
        completed(&level)?;
        if k + 1 < specs.len() {
            let params = Params::from_store(&spec.network, &level.weights)?;
            let raw = run_network(&spec.network, &params, &inputs)?;
            prev = level_estimate(spec.output_rule, &prev, raw);
        }
        levels.push(level);
    }
    Ok(CascadeModel { levels })
}

impl CascadeModel {
    pub fn new(levels: Vec<TrainedLevel>) -> Result<Self> {
        let specs: Vec<CascadeLevelSpec> = levels.iter().map(|l| l.spec.clone()).collect();
        validate_levels(&specs)?;
        for l in &levels {
            Params::<f32>::from_store(&l.spec.network, &l.weights)?;
        }
        Ok(CascadeModel { levels })
    }

    /// Smallest slice side the model accepts: one receptive-field radius
    /// plus the center pixel.
    pub fn min_input_size(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.spec.network.receptive_field() / 2 + 1)
            .max()
            .unwrap_or(1)
    }

    /// Estimates after each level for a `[n, 1, h, w]` LDCT batch.
    pub fn predict_levels_tensor(&self, ldct: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let min = self.min_input_size();
        if ldct.height() < min || ldct.width() < min {
            return Err(Error::Shape(format!(
                "{}x{} input is below the {min}x{min} receptive-field minimum",
                ldct.height(),
                ldct.width()
            )));
        }
        let mut prev = ldct.clone();
        let mut out = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let params = Params::from_store(&level.spec.network, &level.weights)?;
            let inputs = level_inputs(level.spec.input_rule, ldct, &prev);
            let raw = run_network(&level.spec.network, &params, &inputs)?;
            prev = level_estimate(level.spec.output_rule, &prev, raw);
            out.push(prev.clone());
        }
        Ok(out)
    }

    /// Per-level estimates for one slice; the last entry is the final output.
    /// Emitted pixels are clamped to `[0, 1]`;
    /// the estimate handed from level to level stays unclamped, matching
    /// what later levels saw during training.
    pub fn predict_levels(&self, ldct: &ImageSlice) -> Result<Vec<ImageSlice>> {
        let x = crate::network::images_to_tensor(&[ldct])?;
        self.predict_levels_tensor(&x)?
            .into_iter()
            .map(|t| {
                let pixels = t.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
                ImageSlice::new(ldct.width(), ldct.height(), pixels, ldct.unit(), ldct.id())
            })
            .collect()
    }

    /// Runs the full cascade over one slice.
    pub fn predict(&self, ldct: &ImageSlice) -> Result<ImageSlice> {
        Ok(self.predict_levels(ldct)?.pop().expect("at least one level"))
    }

    /// First `n` levels as a standalone model.
    pub fn truncated(&self, n: usize) -> Result<CascadeModel> {
        CascadeModel::new(self.levels[..n.min(self.levels.len())].to_vec())
    }

    pub fn manifest(&self) -> Result<ModelManifest> {
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let bytes = l.weights.to_bytes()?;
                Ok(LevelManifest {
                    level: k + 1,
                    weights_file: level_file_name(k),
                    weights_sha256: hex(&Sha256::digest(&bytes)),
                    input_digest: l.input_digest.clone(),
                    spec: l.spec.clone(),
                    train: l.train.clone(),
                    history: l.history.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelManifest {
            format_version: MODEL_FORMAT_VERSION,
            levels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelManifest {
    pub level: usize,
    pub weights_file: String,
    pub weights_sha256: String,
    pub input_digest: String,
    pub spec: CascadeLevelSpec,
    pub train: TrainConfig,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub levels: Vec<LevelManifest>,
}

impl ModelManifest {
    /// SHA-256 of the manifest with wall-clock fields zeroed, so that two
    /// identical runs share a digest.
    pub fn digest(&self) -> Result<String> {
        let mut m = self.clone();
        for l in &mut m.levels {
            for e in &mut l.history.epochs {
                e.wall_seconds = 0.0;
            }
        }
        Ok(hex(&Sha256::digest(serde_json::to_vec(&m)?)))
    }
}

pub fn level_file_name(index: usize) -> String {
    format!("level_{}.ctw1", index + 1)
}

pub fn write_manifest(dir: &Path, manifest: &ModelManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<ModelManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: ModelManifest = serde_json::from_str(&text)?;
    if m.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported model format_version {}",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

/// Writes `level_<k>.ctw1` files plus `manifest.json`.
pub fn save_model(model: &CascadeModel, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, level) in model.levels.iter().enumerate() {
        save_weights(&level.weights, dir.join(level_file_name(k)))?;
    }
    write_manifest(dir, &model.manifest()?)?;
    Ok(dir.join(MANIFEST_FILE))
}

/// Loads a level recorded in `manifest`, verifying its weight digest.
pub fn load_level(dir: &Path, entry: &LevelManifest) -> Result<TrainedLevel> {
    let path = dir.join(&entry.weights_file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let digest = hex(&Sha256::digest(&bytes));
    if digest != entry.weights_sha256 {
        return Err(Error::WeightMismatch(format!(
            "{}: sha256 {digest} does not match manifest {}",
            path.display(),
            entry.weights_sha256
        )));
    }
    let weights = WeightStore::from_bytes(&bytes)?;
    Params::<f32>::from_store(&entry.spec.network, &weights)?;
    Ok(TrainedLevel {
        spec: entry.spec.clone(),
        weights,
        train: entry.train.clone(),
        history: entry.history.clone(),
        input_digest: entry.input_digest.clone(),
    })
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<CascadeModel> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let levels = manifest
        .levels
        .iter()
        .map(|entry| load_level(dir, entry))
        .collect::<Result<Vec<_>>>()?;
    CascadeModel::new(levels)
}

/// Convex combination `w_ldct * ldct + w_pred * prediction`.
pub fn blend(ldct: &ImageSlice, prediction: &ImageSlice, w_ldct: f64, w_pred: f64) -> Result<ImageSlice> {
    if !w_ldct.is_finite() || !w_pred.is_finite() || (w_ldct + w_pred - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "blend weights must sum to 1, got {w_ldct} + {w_pred}"
        )));
    }
    if !ldct.same_geometry(prediction) {
        return Err(Error::Shape(format!(
            "blend inputs {}x{} and {}x{} differ",
            ldct.width(),
            ldct.height(),
            prediction.width(),
            prediction.height()
        )));
    }
    let pixels = ldct
        .pixels()
        .iter()
        .zip(prediction.pixels())
        .map(|(&a, &b)| {
            // Degenerate weights pass the selected input through untouched.
            if w_pred == 0.0 {
                a
            } else if w_ldct == 0.0 {
                b
            } else {
                (w_ldct * f64::from(a) + w_pred * f64::from(b)) as f32
            }
        })
        .collect();
    ImageSlice::new(ldct.width(), ldct.height(), pixels, prediction.unit(), prediction.id())
}
