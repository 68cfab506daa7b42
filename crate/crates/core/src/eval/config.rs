//! Flat `key = value` experiment configuration with dotted keys.
//!
//! ```text
//! # comment
//! data.path = data/ETTh1.csv
//! model.lookback = 336
//! train.lr = 0.0001
//! ```
//!
//! Every key can also be overridden with `--set key=value`. The config hash
//! covers every resolved key except `run.output_dir`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EvalError;
use crate::data::{SplitSpec, SynthSpec};
use crate::models::{Ablation, Backbone, ModelConfig};
use crate::train::TrainConfig;

pub const PROTOCOL_LOOKBACKS: [usize; 3] = [96, 336, 512];
pub const PROTOCOL_HORIZONS: [usize; 4] = [96, 192, 336, 720];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthPreset {
    /// explicit `synth.*` events
    Custom,
    /// events drawn from `synth.seed` by [`SynthSpec::regime_shift`]
    RegimeShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data_name: String,
    /// CSV source; `None` generates the synthetic series
    pub data_path: Option<PathBuf>,
    pub split: SplitSpec,
    pub forward_fill: bool,
    /// keep only the leading rows of the loaded series
    pub max_rows: Option<usize>,
    pub synth_preset: SynthPreset,
    pub synth: SynthSpec,
    pub model: ModelConfig,
    /// `None` follows `patch_size / 2`
    pub stride: Option<usize>,
    pub train: TrainConfig,
    /// step between consecutive training windows
    pub window_stride: usize,
    pub output_dir: PathBuf,
    /// allow lookbacks and horizons outside the benchmark sets
    pub protocol_override: bool,
    /// leading test windows per channel whose selections are traced
    pub trace_windows: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_name: "synthetic".into(),
            data_path: None,
            split: SplitSpec::default(),
            forward_fill: false,
            max_rows: None,
            synth_preset: SynthPreset::RegimeShift,
            synth: SynthSpec {
                length: 4000,
                ..SynthSpec::default()
            },
            model: ModelConfig::default(),
            stride: None,
            train: TrainConfig::default(),
            window_stride: 1,
            output_dir: PathBuf::from("runs/default"),
            protocol_override: false,
            trace_windows: 4,
        }
    }
}

fn events_to_string(events: &[(usize, f64)]) -> String {
    events
        .iter()
        .map(|(i, v)| format!("{i}:{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_events(key: &str, text: &str) -> Result<Vec<(usize, f64)>, EvalError> {
    let bad = || EvalError::BadValue {
        key: key.to_string(),
        value: text.to_string(),
        expected: "index:value,index:value,...".into(),
    };
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (i, v) = item.split_once(':').ok_or_else(bad)?;
            Ok((
                i.trim().parse().map_err(|_| bad())?,
                v.trim().parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T, EvalError> {
    value.trim().parse().map_err(|_| EvalError::BadValue {
        key: key.into(),
        value: value.into(),
        expected: expected.into(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, EvalError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(EvalError::BadValue {
            key: key.into(),
            value: value.into(),
            expected: "true or false".into(),
        }),
    }
}

impl ExperimentConfig {
    /// Every key with its current value, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let s = &self.synth;
        vec![
            ("data.name", self.data_name.clone()),
            (
                "data.path",
                self.data_path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            (
                "data.split",
                self.split
                    .ratios()
                    .iter()
                    .map(|r| r.to_string())
                    .collect::<Vec<_>>()
                    .join(":"),
            ),
            ("data.forward_fill", self.forward_fill.to_string()),
            (
                "data.max_rows",
                self.max_rows
                    .map(|r| r.to_string())
                    .unwrap_or_else(|| "all".into()),
            ),
            (
                "synth.preset",
                match self.synth_preset {
                    SynthPreset::Custom => "custom".into(),
                    SynthPreset::RegimeShift => "regime_shift".into(),
                },
            ),
            ("synth.length", s.length.to_string()),
            ("synth.channels", s.channels.to_string()),
            ("synth.seed", s.seed.to_string()),
            ("synth.base_period", s.base_period.to_string()),
            ("synth.amplitude", s.amplitude.to_string()),
            ("synth.noise_std", s.noise_std.to_string()),
            ("synth.period_changes", events_to_string(&s.period_changes)),
            ("synth.level_shifts", events_to_string(&s.level_shifts)),
            ("synth.spikes", events_to_string(&s.spikes)),
            ("model.lookback", m.lookback.to_string()),
            ("model.horizon", m.horizon.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            (
                "model.stride",
                self.stride
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "auto".into()),
            ),
            ("model.d_model", m.d_model.to_string()),
            ("model.scorer_layers", m.scorer_layers.to_string()),
            ("model.scorer_hidden", m.scorer_hidden.to_string()),
            ("model.fusion_init", m.fusion_init.to_string()),
            ("model.head_hidden", m.head_hidden.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.backbone", m.backbone.to_string()),
            ("model.encoder_layers", m.encoder_layers.to_string()),
            ("model.encoder_heads", m.encoder_heads.to_string()),
            ("model.ablation", m.ablation.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.min_batch_size", t.min_batch_size.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.cosine", t.cosine.to_string()),
            (
                "train.memory_budget_mb",
                t.memory_budget_bytes
                    .map(|b| (b / (1 << 20)).to_string())
                    .unwrap_or_else(|| "none".into()),
            ),
            ("train.val_stride", t.val_stride.to_string()),
            ("train.window_stride", self.window_stride.to_string()),
            ("run.output_dir", self.output_dir.display().to_string()),
            ("run.protocol_override", self.protocol_override.to_string()),
            ("run.trace_windows", self.trace_windows.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default()
            .pairs()
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.pairs()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), EvalError> {
        let v = value.trim();
        let uint = "a non-negative integer";
        let float = "a number";
        match key {
            "data.name" => self.data_name = v.to_string(),
            "data.path" => {
                self.data_path = if v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "data.split" => {
                self.split = SplitSpec::parse(v).map_err(|_| EvalError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    expected: "three ratios such as 6:2:2".into(),
                })?
            }
            "data.forward_fill" => self.forward_fill = parse_bool(key, v)?,
            "data.max_rows" => {
                self.max_rows = if v == "all" {
                    None
                } else {
                    Some(parse(key, v, "all or a row count")?)
                }
            }
            "synth.preset" => {
                self.synth_preset = match v {
                    "custom" => SynthPreset::Custom,
                    "regime_shift" => SynthPreset::RegimeShift,
                    _ => {
                        return Err(EvalError::BadValue {
                            key: key.into(),
                            value: v.into(),
                            expected: "custom or regime_shift".into(),
                        })
                    }
                }
            }
            "synth.length" => self.synth.length = parse(key, v, uint)?,
            "synth.channels" => self.synth.channels = parse(key, v, uint)?,
            "synth.seed" => self.synth.seed = parse(key, v, uint)?,
            "synth.base_period" => self.synth.base_period = parse(key, v, float)?,
            "synth.amplitude" => self.synth.amplitude = parse(key, v, float)?,
            "synth.noise_std" => self.synth.noise_std = parse(key, v, float)?,
            "synth.period_changes" => self.synth.period_changes = parse_events(key, v)?,
            "synth.level_shifts" => self.synth.level_shifts = parse_events(key, v)?,
            "synth.spikes" => self.synth.spikes = parse_events(key, v)?,
            "model.lookback" => self.model.lookback = parse(key, v, uint)?,
            "model.horizon" => self.model.horizon = parse(key, v, uint)?,
            "model.patch_size" => self.model.patch_size = parse(key, v, uint)?,
            "model.stride" => {
                self.stride = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v, "auto or an integer")?)
                }
            }
            "model.d_model" => self.model.d_model = parse(key, v, uint)?,
            "model.scorer_layers" => self.model.scorer_layers = parse(key, v, uint)?,
            "model.scorer_hidden" => self.model.scorer_hidden = parse(key, v, uint)?,
            "model.fusion_init" => self.model.fusion_init = parse(key, v, float)?,
            "model.head_hidden" => self.model.head_hidden = parse(key, v, uint)?,
            "model.dropout" => self.model.dropout = parse(key, v, float)?,
            "model.backbone" => {
                self.model.backbone = parse::<Backbone>(key, v, "mlp or transformer")?
            }
            "model.encoder_layers" => self.model.encoder_layers = parse(key, v, uint)?,
            "model.encoder_heads" => self.model.encoder_heads = parse(key, v, uint)?,
            "model.ablation" => {
                self.model.ablation = parse::<Ablation>(
                    key,
                    v,
                    "full, no_selective, no_reassembly, no_fusion or no_srs",
                )?
            }
            "train.lr" => self.train.lr = parse(key, v, float)?,
            "train.batch_size" => self.train.batch_size = parse(key, v, uint)?,
            "train.min_batch_size" => self.train.min_batch_size = parse(key, v, uint)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v, uint)?,
            "train.patience" => self.train.patience = parse(key, v, uint)?,
            "train.seed" => self.train.seed = parse(key, v, uint)?,
            "train.cosine" => self.train.cosine = parse_bool(key, v)?,
            "train.memory_budget_mb" => {
                self.train.memory_budget_bytes = if v == "none" {
                    None
                } else {
                    Some(parse::<usize>(key, v, "none or megabytes")? << 20)
                }
            }
            "train.val_stride" => self.train.val_stride = parse(key, v, uint)?,
            "train.window_stride" => self.window_stride = parse(key, v, uint)?,
            "run.output_dir" => self.output_dir = PathBuf::from(v),
            "run.protocol_override" => self.protocol_override = parse_bool(key, v)?,
            "run.trace_windows" => self.trace_windows = parse(key, v, uint)?,
            _ => {
                return Err(EvalError::UnknownKey {
                    key: key.to_string(),
                    valid: Self::keys().join(", "),
                })
            }
        }
        Ok(())
    }

    /// Applies `key=value` assignments in order.
    pub fn apply<A: AsRef<str>>(
        &mut self,
        assignments: impl IntoIterator<Item = A>,
    ) -> Result<(), EvalError> {
        for a in assignments {
            let a = a.as_ref();
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| EvalError::Config(format!("expected key=value, got `{a}`")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self, EvalError> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                EvalError::Config(format!(
                    "line {}: expected key = value, got `{line}`",
                    lineno + 1
                ))
            })?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_text(&text)
    }

    /// Text form that [`ExperimentConfig::parse_text`] reads back to an equal config.
    pub fn to_text(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Hex SHA-256 of the sorted `key=value` lines, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_map() {
            if k == "run.output_dir" {
                continue;
            }
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Model configuration with the stride resolved.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            stride: self.stride.unwrap_or((self.model.patch_size / 2).max(1)),
            ..self.model.clone()
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        match self.synth_preset {
            SynthPreset::Custom => self.synth.clone(),
            SynthPreset::RegimeShift => SynthSpec {
                amplitude: self.synth.amplitude,
                ..SynthSpec::regime_shift(self.synth.seed, self.synth.length, self.synth.channels)
            },
        }
    }

    /// Protocol sets, training settings and patch geometry.
    pub fn validate(&self) -> Result<(), EvalError> {
        let m = self.model_config();
        if !self.protocol_override {
            if !PROTOCOL_LOOKBACKS.contains(&m.lookback) {
                return Err(EvalError::Protocol(format!(
                    "lookback {} not in {PROTOCOL_LOOKBACKS:?} (set run.protocol_override=true to allow it)",
                    m.lookback
                )));
            }
            if !PROTOCOL_HORIZONS.contains(&m.horizon) {
                return Err(EvalError::Protocol(format!(
                    "horizon {} not in {PROTOCOL_HORIZONS:?} (set run.protocol_override=true to allow it)",
                    m.horizon
                )));
            }
        }
        m.geometry().map_err(|e| EvalError::Config(e.to_string()))?;
        self.train.validate()?;
        if self.window_stride == 0 {
            return Err(EvalError::Config(
                "train.window_stride must be at least 1".into(),
            ));
        }
        if self.data_path.is_none() {
            self.synth_spec().validate()?;
        }
        Ok(())
    }
}
