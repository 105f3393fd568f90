use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ImputeConfig, SplitMode};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::ModelKind;
use crate::params::AdamConfig;
use crate::stage_modules::ModularConfig;
use crate::synth::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    /// Window size `w`.
    pub window: usize,
    pub optimizer: AdamConfig,
    /// Model dimensions; the recurrent baseline uses `modular.hidden`.
    pub modular: ModularConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Wafer fraction of the training split held out for early stopping.
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Modular,
            epochs: 50,
            batch_size: 32,
            window: 5,
            optimizer: AdamConfig::default(),
            modular: ModularConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            validation_fraction: 0.1,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.window == 0 {
            return Err(Error::Config("epochs, batch_size and window must be positive".into()));
        }
        if self.modular.hidden == 0 || self.modular.prototypes == 0 {
            return Err(Error::Config("hidden and prototypes must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite() && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("optimizer needs lr >= 0, betas in [0, 1) and eps > 0".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        self.loss.validate()
    }

    /// Loss actually optimized: the recurrent baseline only sees the measurement term.
    pub fn effective_loss(&self) -> LossConfig {
        match self.model {
            ModelKind::Modular => self.loss.clone(),
            ModelKind::RecurrentBaseline => LossConfig {
                label_mode: crate::losses::LabelMode::HardCrop,
                ..LossConfig::measurement_only()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: SplitMode,
    /// Eval wafer fraction in standard mode.
    pub holdout_fraction: f64,
    /// Fraction of product types held out in product-type mode.
    pub holdout_product_fraction: f64,
    /// Number of groups held out in product-group mode.
    pub holdout_groups: usize,
    /// Explicit holdout values, overriding the automatic choice.
    pub holdout_values: Vec<String>,
    pub seeds: Vec<u64>,
    /// Grouping whose attention profiles the similarity analysis compares.
    pub similarity_key: SplitMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: SplitMode::Standard,
            holdout_fraction: 0.2,
            holdout_product_fraction: 0.25,
            holdout_groups: 1,
            holdout_values: Vec::new(),
            seeds: vec![0, 1, 2],
            similarity_key: SplitMode::ByProductType,
        }
    }
}

/// Which losses a grid row enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossFlags {
    pub measurement: bool,
    pub proximity: bool,
    pub distinction: bool,
}

impl LossFlags {
    pub const ALL: Self = Self {
        measurement: true,
        proximity: true,
        distinction: true,
    };

    /// The seven nonempty combinations: all three, the pairs, then the singles.
    pub fn full_grid() -> Vec<Self> {
        [0b111u8, 0b011, 0b101, 0b110, 0b100, 0b010, 0b001]
            .into_iter()
            .map(|b| Self {
                measurement: b & 0b100 != 0,
                proximity: b & 0b010 != 0,
                distinction: b & 0b001 != 0,
            })
            .collect()
    }

    pub fn count(&self) -> usize {
        usize::from(self.measurement) + usize::from(self.proximity) + usize::from(self.distinction)
    }

    pub fn apply(&self, loss: &LossConfig) -> LossConfig {
        LossConfig {
            measurement: self.measurement,
            proximity: self.proximity,
            distinction: self.distinction,
            ..loss.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub loss_grid: Vec<LossFlags>,
    pub splits: Vec<SplitMode>,
    /// Also run the prototype / stage-module component grid.
    pub components: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            loss_grid: LossFlags::full_grid(),
            splits: vec![SplitMode::ByProductType, SplitMode::ByProductGroup],
            components: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRunConfig {
    pub wafers: usize,
    /// Seed for wafer sampling (the world has its own seed).
    pub seed: u64,
}

impl Default for SynthRunConfig {
    fn default() -> Self {
        Self { wafers: 2000, seed: 0 }
    }
}

/// Everything a command-line run can configure.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub synth: SynthRunConfig,
    pub impute: ImputeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        if self.synth.wafers == 0 {
            return Err(Error::Config("synth.wafers must be positive".into()));
        }
        Ok(())
    }

    /// Applies `key.path=value` overrides. Values parse as TOML literals and
    /// fall back to plain strings; unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
            set_path(&mut root, key.trim(), parse_literal(value.trim()))?;
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }
}

fn parse_literal(text: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {text}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(text.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            // Optional fields are omitted when unset, so a new leaf is allowed;
            // deserialization rejects it if the field does not exist.
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    Err(Error::Config("empty override key".into()))
}

/// Hex SHA-256 of the canonical JSON encoding.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).unwrap_or_default();
    hex::encode(Sha256::digest(&json))
}
