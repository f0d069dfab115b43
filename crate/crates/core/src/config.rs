//! Run configuration: a TOML document with `[model]`, `[loss]`, `[optim]`,
//! `[data]` and `[ablation]` sections, plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evidential::UncertaintyWeights;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("override `{0}` must look like section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeformableMode {
    /// Keys and values are resampled at offset grid positions.
    Spatial,
    /// Per-head offsets are tiled across the head width and added to the keys.
    Additive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    Sigmoid,
    /// Softmax across the channel axis.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub backbone_channels: [usize; 4],
    pub descriptor_channels: usize,
    pub reduced_channels: usize,
    pub grid: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub offset_scale: f64,
    pub tau_min: f64,
    pub deformable_mode: DeformableMode,
    pub semantic_mask: bool,
    pub gate: GateActivation,
    pub uncertainty: UncertaintyWeights,
    pub refine_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            backbone_channels: [16, 24, 32, 48],
            descriptor_channels: 16,
            reduced_channels: 16,
            grid: 32,
            patch: 2,
            embed_dim: 32,
            heads: 4,
            offset_scale: 0.1,
            tau_min: 0.1,
            deformable_mode: DeformableMode::Spatial,
            semantic_mask: true,
            gate: GateActivation::Sigmoid,
            uncertainty: UncertaintyWeights::default(),
            refine_hidden: 8,
        }
    }
}

impl ModelConfig {
    /// Side length of the token grid.
    pub fn token_side(&self) -> usize {
        self.grid / self.patch
    }

    pub fn num_tokens(&self) -> usize {
        self.token_side() * self.token_side()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return bad(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            ));
        }
        if self.patch == 0 || !self.grid.is_multiple_of(self.patch) {
            return bad(format!(
                "grid {} is not divisible by patch {}",
                self.grid, self.patch
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.deformable_mode == DeformableMode::Additive
            && !(self.embed_dim / self.heads).is_multiple_of(2)
        {
            return bad("additive offsets need an even head width".into());
        }
        if !(self.tau_min > 0.0 && self.tau_min < 1.0) {
            return bad(format!("tau_min {} must lie in (0, 1)", self.tau_min));
        }
        if self.backbone_channels.contains(&0)
            || self.reduced_channels == 0
            || self.descriptor_channels == 0
        {
            return bad("channel counts must be positive".into());
        }
        self.uncertainty
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Structural losses plus the Dirichlet evidential term.
    Evidential,
    /// Plain binary cross-entropy on every supervised output.
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub omega: [f64; 2],
    pub eta: [f64; 2],
    pub kappa: f64,
    pub lambda_focal: f64,
    pub beta_bnd: f64,
    pub gamma_focal: f64,
    pub structure_kernel: usize,
    pub structure_weight: f64,
    pub objective: Objective,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            omega: [1.0, 0.5],
            eta: [1.0, 0.5],
            kappa: 0.5,
            lambda_focal: 0.1,
            beta_bnd: 4.0,
            gamma_focal: 2.0,
            structure_kernel: 31,
            structure_weight: 5.0,
            objective: Objective::Evidential,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let all = self.omega.iter().chain(&self.eta).chain([
            &self.kappa,
            &self.lambda_focal,
            &self.beta_bnd,
            &self.gamma_focal,
        ]);
        if all.clone().any(|v| !(*v >= 0.0)) {
            return Err(ConfigError::Invalid(
                "loss weights must be non-negative".into(),
            ));
        }
        if self.omega.iter().chain(&self.eta).all(|v| *v == 0.0) && self.kappa == 0.0 {
            return Err(ConfigError::Invalid("every loss weight is zero".into()));
        }
        if self.structure_kernel.is_multiple_of(2) {
            return Err(ConfigError::Invalid("structure_kernel must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub backbone_lr_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hard cap on optimizer steps (0 = no cap).
    pub max_steps: usize,
    pub lr_floor: f64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 4e-3,
            backbone_lr_scale: 0.1,
            epochs: 100,
            batch_size: 4,
            max_steps: 500,
            lr_floor: 0.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectCount {
    Single,
    Multiple,
    /// Alternate single- and two-object scenes.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_scenes: usize,
    pub num_classes: usize,
    /// 0 keeps the object colour distinct from the background; 1 matches its
    /// first- and second-order statistics.
    pub similarity: f64,
    pub objects: ObjectCount,
    pub refs_per_sample: usize,
    /// Emit each scene once per object class it contains, so the reference decides the target.
    pub paired: bool,
    pub distractors: usize,
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_scenes: 10,
            num_classes: 3,
            similarity: 0.5,
            objects: ObjectCount::Single,
            refs_per_sample: 2,
            paired: true,
            distractors: 1,
            min_radius: 9.0,
            max_radius: 14.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Load an on-disk dataset instead of generating one.
    pub folder: Option<PathBuf>,
    pub split: String,
    pub seed: u64,
    pub layout: FolderLayout,
    pub synth: SynthConfig,
}

/// Directory names inside each category folder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FolderLayout {
    pub query_dir: String,
    pub reference_dir: String,
    pub images: String,
    pub masks: String,
}

impl Default for FolderLayout {
    fn default() -> Self {
        Self {
            query_dir: "camo".into(),
            reference_dir: "ref".into(),
            images: "images".into(),
            masks: "masks".into(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            folder: None,
            split: "train".into(),
            seed: 42,
            layout: FolderLayout::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Switches for the module ablations. Disabling `rgde`, `euqm`, `ega`, `umrm`
/// and `barm` together leaves a plain encoder-decoder trained on structure loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub rgde: bool,
    pub euqm: bool,
    pub ega: bool,
    pub umrm: bool,
    pub barm: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            rgde: true,
            euqm: true,
            ega: true,
            umrm: true,
            barm: true,
        }
    }
}

impl AblationConfig {
    /// Turns off one named module (`uaed` covers its three parts).
    pub fn disable(&mut self, module: &str) -> Result<(), ConfigError> {
        match module {
            "rgde" => self.rgde = false,
            "euqm" => self.euqm = false,
            "ega" => self.ega = false,
            "umrm" => self.umrm = false,
            "barm" => self.barm = false,
            "uaed" => {
                self.euqm = false;
                self.ega = false;
                self.umrm = false;
            }
            other => return Err(ConfigError::Invalid(format!("unknown module `{other}`"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    /// Desk-scale profile: 64×64 inputs, a 16×16 token grid, batch 4, 500 steps.
    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            // the toy backbone starts from random weights, so it trains at the full rate
            optim: OptimConfig {
                backbone_lr_scale: 1.0,
                ..OptimConfig::default()
            },
            data: DataConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    /// Full-scale profile: 352×352 inputs on an 88×88 grid with 4×4 patches.
    pub fn full() -> Self {
        let mut cfg = Self::toy();
        cfg.name = "full".into();
        cfg.model = ModelConfig {
            image_size: 352,
            backbone_channels: [64, 128, 320, 512],
            descriptor_channels: 64,
            reduced_channels: 64,
            grid: 88,
            patch: 4,
            embed_dim: 1024,
            heads: 8,
            refine_hidden: 16,
            ..ModelConfig::default()
        };
        cfg.optim = OptimConfig {
            base_lr: 1e-4,
            epochs: 150,
            batch_size: 16,
            max_steps: 0,
            checkpoint_every: 10,
            ..OptimConfig::default()
        };
        cfg.data.synth.image_size = 352;
        cfg
    }

    pub fn profile(name: &str) -> Result<Self, ConfigError> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(ConfigError::Invalid(format!("unknown profile `{other}`"))),
        }
    }

    /// Parses a TOML document on top of the toy profile.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::toy().overlay(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::toy().overlay_file(path)
    }

    /// `self` with every key present in `text` replaced. Tables merge key by
    /// key, so a document only needs the keys it changes.
    pub fn overlay(&self, text: &str) -> Result<Self, ConfigError> {
        let patch: toml::Table = toml::from_str(text)?;
        self.merged(patch)
    }

    pub fn overlay_file(&self, path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.overlay(&text)
    }

    fn merged(&self, patch: toml::Table) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = toml::from_str(&self.canonical())?;
        merge_tables(&mut doc, patch);
        let cfg: Self = toml::Value::Table(doc).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.optim.base_lr > 0.0) || self.optim.epochs == 0 || self.optim.batch_size == 0 {
            return Err(ConfigError::Invalid(
                "need base_lr > 0, epochs >= 1 and batch_size >= 1".into(),
            ));
        }
        let s = &self.data.synth;
        if !(0.0..=1.0).contains(&s.similarity) || s.num_classes < 2 || s.refs_per_sample == 0 {
            return Err(ConfigError::Invalid(
                "synth needs similarity in [0, 1], at least 2 classes and 1 reference".into(),
            ));
        }
        Ok(())
    }

    /// Canonical TOML text: fields in declaration order, defaults filled in.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// SHA-256 of the canonical text.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn fingerprint_hex(&self) -> String {
        hex(&self.fingerprint())
    }

    /// SHA-256 over the `[model]` and `[ablation]` sections only: the parts a
    /// checkpoint's parameters and forward pass depend on.
    pub fn architecture_fingerprint_hex(&self) -> String {
        #[derive(Serialize)]
        struct Architecture<'a> {
            model: &'a ModelConfig,
            ablation: &'a AblationConfig,
        }
        let text = toml::to_string(&Architecture {
            model: &self.model,
            ablation: &self.ablation,
        })
        .expect("config always serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    /// Applies `section.key=value` overrides. Values parse as TOML, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut patch = toml::Table::new();
        for raw in overrides {
            let raw = raw.as_ref();
            let bad = || ConfigError::Override(raw.to_string());
            let (path, value) = raw.split_once('=').ok_or_else(bad)?;
            let keys: Vec<&str> = path.trim().split('.').collect();
            let (last, parents) = keys.split_last().ok_or_else(bad)?;
            let mut table = &mut patch;
            for key in parents {
                table = table
                    .entry(key.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(bad)?;
            }
            table.insert(last.to_string(), parse_value(value.trim()));
        }
        self.merged(patch)
    }
}

/// Recursively copies `patch` into `doc`; non-table values replace wholesale.
fn merge_tables(doc: &mut toml::Table, patch: toml::Table) {
    for (key, value) in patch {
        match (doc.get_mut(&key), value) {
            (Some(toml::Value::Table(existing)), toml::Value::Table(sub)) => {
                merge_tables(existing, sub)
            }
            (_, value) => {
                doc.insert(key, value);
            }
        }
    }
}

fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
