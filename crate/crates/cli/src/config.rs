//! Run configuration: JSON file, `--set key=value` overrides, validation.

use std::fs;
use std::path::{Path, PathBuf};

use cascade_ct::cascade::{
    build_hybrid_spec, build_wu_spec, CascadeLevelSpec, InputRule, LabelRule, OutputRule, TrainConfig,
};
use cascade_ct::losses::{LossConfig, LossKind};
use cascade_ct::network::{build_cnn10, build_drl, NetworkSpec};
use cascade_ct::optim::AdamConfig;
use cascade_ct::simulate::{derive_seed, AcquisitionGeometry, DoseModel, ReconFilter, DEFAULT_ATTENUATION_SCALE};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; phantoms, training and test sets derive from it.
    pub seed: u64,
    pub simulation: SimulationConfig,
    pub patching: PatchingConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub perceptual: PerceptualConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            simulation: SimulationConfig::default(),
            patching: PatchingConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            perceptual: PerceptualConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_slices: usize,
    pub size: usize,
    /// `null` picks 1.5 x size.
    pub n_angles: Option<usize>,
    /// `null` picks the smallest odd count covering the slice diagonal.
    pub n_detectors: Option<usize>,
    pub attenuation_scale: f64,
    pub filter: ReconFilter,
    pub i0_full: f64,
    pub dose_fraction: f64,
    pub electronic_sigma: f64,
    pub dose_seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_slices: 10,
            size: 128,
            n_angles: None,
            n_detectors: None,
            attenuation_scale: DEFAULT_ATTENUATION_SCALE,
            filter: ReconFilter::RamLak,
            i0_full: 1e5,
            dose_fraction: 0.25,
            electronic_sigma: 0.0,
            dose_seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn geometry(&self) -> AcquisitionGeometry {
        let auto = AcquisitionGeometry::for_size(self.size);
        AcquisitionGeometry {
            n_angles: self.n_angles.unwrap_or(auto.n_angles),
            n_detectors: self.n_detectors.unwrap_or(auto.n_detectors),
            attenuation_scale: self.attenuation_scale,
            filter: self.filter,
        }
    }

    pub fn dose(&self) -> DoseModel {
        DoseModel {
            i0_full: self.i0_full,
            dose_fraction: self.dose_fraction,
            electronic_sigma: self.electronic_sigma,
            seed: self.dose_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchingConfig {
    pub size: usize,
    pub stride: usize,
}

impl Default for PatchingConfig {
    fn default() -> Self {
        PatchingConfig { size: 64, stride: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Perceptual DRL followed by MSE difference levels.
    Hybrid,
    /// Difference-image levels only.
    Wu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Drl,
    Cnn10,
}

impl NetworkKind {
    pub fn builder(self) -> fn(usize) -> NetworkSpec {
        match self {
            NetworkKind::Drl => build_drl,
            NetworkKind::Cnn10 => build_cnn10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Total cascade depth. Hybrid levels past the second are Wu-style
    /// levels that also see the LDCT input.
    pub levels: usize,
    /// Network of the Wu preset's levels.
    pub wu_network: NetworkKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset: Preset::Hybrid,
            levels: 2,
            wu_network: NetworkKind::Cnn10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Epochs per level; the last entry repeats for deeper levels.
    pub epochs: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub shuffle: bool,
    pub recalibrate_bn: bool,
    /// Zero the output convolution of networks that predict a correction.
    pub zero_init_head: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainingConfig {
            epochs: vec![15, 10],
            batch_size: 32,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            shuffle: true,
            recalibrate_bn: true,
            zero_init_head: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorSource {
    /// Converted VGG-16 weights from `weights_path` or the environment.
    Pretrained,
    /// Deterministic randomly initialized VGG-16 trunk.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualConfig {
    /// Loss of the hybrid's first level: `perceptual` or `combined`.
    pub loss: LossKind,
    pub lambda_mse: f64,
    pub extractor: ExtractorSource,
    pub weights_path: Option<PathBuf>,
    pub random_seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            loss: LossKind::Perceptual,
            lambda_mse: 0.1,
            extractor: ExtractorSource::Pretrained,
            weights_path: None,
            random_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// `[w_ldct, w_pred]` for blended outputs; `null` disables blending.
    pub blend: Option<[f64; 2]>,
    pub intermediate_levels: bool,
    /// Held-out slices simulated by `experiment`.
    pub test_slices: usize,
    /// PSNR/SSIM peak; `null` uses 1 for normalized data.
    pub max_val: Option<f64>,
    pub panels: bool,
    /// Number of slices rendered as panels.
    pub panel_slices: usize,
    pub panel_window: [f64; 2],
    pub panel_zoom: usize,
    pub panel_pad: usize,
    /// Absolute difference shown as full white in difference maps.
    pub difference_window: f64,
    /// Blend weights compared by the `blending` experiment.
    pub blend_grid: Vec<[f64; 2]>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            blend: None,
            intermediate_levels: true,
            test_slices: 10,
            max_val: None,
            panels: true,
            panel_slices: 2,
            panel_window: [0.0, 1.0],
            panel_zoom: 2,
            panel_pad: 8,
            difference_window: 0.1,
            blend_grid: vec![[0.0, 1.0], [0.3, 0.7], [0.5, 0.5]],
        }
    }
}

fn invalid(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::config(format!("{key}: {msg}"))
}

impl RunConfig {
    /// Defaults, then the optional file, then overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
                let file_value: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
                let mut base = serde_json::to_value(RunConfig::default()).expect("serializable");
                merge(&mut base, file_value, "")?;
                base
            }
            None => serde_json::to_value(RunConfig::default()).expect("serializable"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        let s = &self.simulation;
        if s.n_slices < 1 {
            return Err(invalid("simulation.n_slices", "must be >= 1"));
        }
        if s.size < 16 {
            return Err(invalid(
                "simulation.size",
                format!("{} is below the 16-pixel minimum", s.size),
            ));
        }
        if s.n_angles == Some(0) {
            return Err(invalid("simulation.n_angles", "must be >= 1"));
        }
        if s.n_detectors == Some(0) {
            return Err(invalid("simulation.n_detectors", "must be >= 1"));
        }
        if !(s.attenuation_scale > 0.0 && s.attenuation_scale.is_finite()) {
            return Err(invalid("simulation.attenuation_scale", "must be a positive number"));
        }
        if !(s.i0_full >= 1.0) {
            return Err(invalid("simulation.i0_full", format!("{} must be >= 1", s.i0_full)));
        }
        if !(s.dose_fraction > 0.0 && s.dose_fraction <= 1.0) {
            return Err(invalid(
                "simulation.dose_fraction",
                format!("{} must lie in (0, 1]", s.dose_fraction),
            ));
        }
        if !(s.electronic_sigma >= 0.0) {
            return Err(invalid("simulation.electronic_sigma", "must be >= 0"));
        }
        let p = &self.patching;
        if p.size < 1 || p.stride < 1 {
            return Err(invalid("patching", "size and stride must be >= 1"));
        }
        if self.model.levels < 1 {
            return Err(invalid("model.levels", "must be >= 1"));
        }
        if self.model.preset == Preset::Hybrid && self.model.levels < 1 {
            return Err(invalid("model.levels", "hybrid needs at least one level"));
        }
        let t = &self.training;
        if t.epochs.is_empty() || t.epochs.contains(&0) {
            return Err(invalid("training.epochs", "needs at least one entry, all >= 1"));
        }
        if t.batch_size < 1 {
            return Err(invalid("training.batch_size", "must be >= 1"));
        }
        self.adam().validate().map_err(|e| invalid("training", e))?;
        if !matches!(self.perceptual.loss, LossKind::Perceptual | LossKind::Combined) {
            return Err(invalid("perceptual.loss", "must be perceptual or combined"));
        }
        if !(self.perceptual.lambda_mse >= 0.0) {
            return Err(invalid("perceptual.lambda_mse", "must be >= 0"));
        }
        let e = &self.evaluation;
        if let Some(w) = e.blend {
            check_blend("evaluation.blend", w)?;
        }
        for &w in &e.blend_grid {
            check_blend("evaluation.blend_grid", w)?;
        }
        if e.test_slices < 1 {
            return Err(invalid("evaluation.test_slices", "must be >= 1"));
        }
        if let Some(m) = e.max_val {
            if !(m > 0.0) {
                return Err(invalid("evaluation.max_val", "must be > 0"));
            }
        }
        if !(e.panel_window[1] > e.panel_window[0]) {
            return Err(invalid(
                "evaluation.panel_window",
                "upper bound must exceed lower bound",
            ));
        }
        if e.panel_zoom < 1 {
            return Err(invalid("evaluation.panel_zoom", "must be >= 1"));
        }
        if !(e.difference_window > 0.0) {
            return Err(invalid("evaluation.difference_window", "must be > 0"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        let t = &self.training;
        AdamConfig {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
        }
    }

    pub fn level_specs(&self) -> Vec<CascadeLevelSpec> {
        let n = self.model.levels;
        match self.model.preset {
            Preset::Wu => build_wu_spec(n, self.model.wu_network.builder()).expect("levels >= 1"),
            Preset::Hybrid => {
                let mut specs = build_hybrid_spec();
                specs[0].loss = LossConfig {
                    kind: self.perceptual.loss,
                    lambda_mse: self.perceptual.lambda_mse,
                    ..specs[0].loss
                };
                specs.truncate(n);
                while specs.len() < n {
                    specs.push(CascadeLevelSpec {
                        network: build_drl(2),
                        loss: LossConfig::mse(),
                        input_rule: InputRule::ConcatLdctPrev,
                        label_rule: LabelRule::ResidualPrevMinusNdct,
                        output_rule: OutputRule::SubtractResidual,
                    });
                }
                specs
            }
        }
    }

    /// Per-level training settings; level seeds derive from the master seed.
    pub fn train_configs(&self, n_levels: usize) -> Vec<TrainConfig> {
        let t = &self.training;
        (0..n_levels)
            .map(|k| TrainConfig {
                optimizer: self.adam(),
                epochs: *t.epochs.get(k).unwrap_or_else(|| t.epochs.last().expect("validated")),
                batch_size: t.batch_size,
                seed: derive_seed(self.seed, 1000 + k as u64),
                shuffle: t.shuffle,
                recalibrate_bn: t.recalibrate_bn,
                zero_init_head: t.zero_init_head,
            })
            .collect()
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self).expect("serializable") + "\n";
        fs::write(&path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
    }

    /// Every settable key with its current value, one per line.
    pub fn key_listing(&self) -> String {
        let mut out = Vec::new();
        flatten(&serde_json::to_value(self).expect("serializable"), "", &mut out);
        out.join("\n")
    }
}

fn check_blend(key: &str, w: [f64; 2]) -> Result<(), CliError> {
    if !w.iter().all(|v| v.is_finite()) || (w[0] + w[1] - 1.0).abs() > 1e-9 {
        return Err(invalid(key, format!("weights {} + {} must sum to 1", w[0], w[1])));
    }
    Ok(())
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(child, &key, out);
            }
        }
        other => out.push(format!("  {prefix} = {other}")),
    }
}

/// Recursively overlays `src` onto `dst`, rejecting keys `dst` lacks.
fn merge(dst: &mut Value, src: Value, prefix: &str) -> Result<(), CliError> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                let slot = d
                    .get_mut(&k)
                    .ok_or_else(|| CliError::config(format!("unknown config key {key}")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &key)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

/// Applies one `dotted.key=value` override. Values parse as JSON when they
/// can and as plain strings otherwise.
pub fn apply_override(root: &mut Value, text: &str) -> Result<(), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {text:?} is not key=value")))?;
    let key = key.trim();
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("unknown config key {key}")))?;
        let slot = map
            .get_mut(*part)
            .ok_or_else(|| CliError::config(format!("unknown config key {key}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = RunConfig::load(None, &["simulation.n_slices=3".into(), "model.preset=wu".into()]).unwrap();
        assert_eq!(cfg.simulation.n_slices, 3);
        assert_eq!(cfg.model.preset, Preset::Wu);
        let err = RunConfig::load(None, &["simulation.bogus=1".into()]).unwrap_err();
        assert!(err.message.contains("simulation.bogus"));
        let err = RunConfig::load(None, &["simulation.dose_fraction=1.5".into()]).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("simulation.dose_fraction"));
    }

    #[test]
    fn hybrid_depth_three_appends_concat_level() {
        let cfg = RunConfig::load(None, &["model.levels=3".into()]).unwrap();
        let specs = cfg.level_specs();
        assert_eq!(specs.len(), 3);
        assert_eq!(specs[2].input_rule, InputRule::ConcatLdctPrev);
        cascade_ct::cascade::validate_levels(&specs).unwrap();
        assert_eq!(cfg.train_configs(3)[2].epochs, 10);
    }
}
