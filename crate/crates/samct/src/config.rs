//! Model and experiment configuration.
//!
//! A run is reproducible from its resolved config file alone: every default
//! is materialized before the run starts and the resolved snapshot is written
//! into the output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SamctError};

/// One cross-branch interaction site: after ViT block `block`, exchange with
/// the CNN encoder map whose side is `input_size / scale_div`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSite {
    pub block: usize,
    pub scale_div: usize,
}

impl InteractionSite {
    /// CNN encoder stage (1..=4) producing this site's feature map.
    pub fn stage(&self) -> usize {
        self.scale_div.trailing_zeros() as usize
    }
}

/// Dimensional hyperparameters of the whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile_name: String,
    /// Square input resolution in pixels.
    pub input_size: usize,
    pub patch_size: usize,
    /// ViT embedding dimension (the patch dimension seen by interaction).
    pub d_vit: usize,
    /// Transformer block count.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Decoder / prompt embedding dimension (post-neck).
    pub d_model: usize,
    /// CNN stem channel count.
    pub d_c: usize,
    /// Adapter bottleneck reduction factor.
    pub adapter_ratio: usize,
    /// Hybrid multi-kernel stem with channel attention; `false` selects the
    /// plain double-conv stem.
    pub haam_stem: bool,
    pub interaction_sites: Vec<InteractionSite>,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            profile_name: "toy".into(),
            input_size: 64,
            patch_size: 8,
            d_vit: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            d_model: 64,
            d_c: 8,
            adapter_ratio: 4,
            haam_stem: true,
            interaction_sites: vec![
                InteractionSite { block: 1, scale_div: 2 },
                InteractionSite { block: 2, scale_div: 4 },
                InteractionSite { block: 3, scale_div: 8 },
            ],
            decoder_depth: 2,
            decoder_heads: 4,
        }
    }

    pub fn base() -> Self {
        Self {
            profile_name: "base".into(),
            input_size: 256,
            patch_size: 16,
            d_vit: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            d_model: 256,
            d_c: 16,
            adapter_ratio: 4,
            haam_stem: true,
            interaction_sites: vec![
                InteractionSite { block: 2, scale_div: 2 },
                InteractionSite { block: 5, scale_div: 4 },
                InteractionSite { block: 8, scale_div: 8 },
                InteractionSite { block: 11, scale_div: 16 },
            ],
            decoder_depth: 2,
            decoder_heads: 8,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "base" => Ok(Self::base()),
            other => Err(SamctError::Config(format!(
                "model.profile: unknown profile '{other}' (expected toy or base)"
            ))),
        }
    }

    /// Patch-grid side length.
    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_size
    }

    /// Window side `k` at an interaction site.
    pub fn site_window(&self, site: &InteractionSite) -> usize {
        self.patch_size / site.scale_div
    }

    /// CNN channel count at an interaction site's encoder stage.
    pub fn site_channels(&self, site: &InteractionSite) -> usize {
        self.d_c * site.scale_div
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(SamctError::Config(msg));
        if self.input_size == 0 || self.input_size % self.patch_size != 0 {
            return err(format!(
                "model.patch_size: input {} not divisible by patch {}",
                self.input_size, self.patch_size
            ));
        }
        if self.input_size % 16 != 0 {
            return err(format!(
                "model.input_size: {} not divisible by 16 (four CNN halvings)",
                self.input_size
            ));
        }
        if self.patch_size % 4 != 0 {
            return err(format!(
                "model.patch_size: {} not divisible by 4 (decoder upscaler)",
                self.patch_size
            ));
        }
        if self.d_vit % self.adapter_ratio != 0 {
            return err(format!(
                "model.adapter_ratio: {} does not divide d_vit {}",
                self.adapter_ratio, self.d_vit
            ));
        }
        if self.d_vit % self.heads != 0 {
            return err(format!(
                "model.heads: {} does not divide d_vit {}",
                self.heads, self.d_vit
            ));
        }
        if self.d_model % self.decoder_heads != 0 {
            return err(format!(
                "model.decoder_heads: {} does not divide d_model {}",
                self.decoder_heads, self.d_model
            ));
        }
        let mut prev_block = None;
        let mut prev_stage = None;
        for (i, site) in self.interaction_sites.iter().enumerate() {
            if site.block >= self.depth {
                return err(format!(
                    "model.interaction_sites[{i}]: block {} out of range (depth {})",
                    site.block, self.depth
                ));
            }
            if !matches!(site.scale_div, 2 | 4 | 8 | 16) {
                return err(format!(
                    "model.interaction_sites[{i}]: scale_div {} not one of 2,4,8,16",
                    site.scale_div
                ));
            }
            if self.patch_size % site.scale_div != 0 {
                return err(format!(
                    "model.interaction_sites[{i}]: CNN side {} does not align with \
                     patch grid {} (window would be fractional)",
                    self.input_size / site.scale_div,
                    self.grid_side()
                ));
            }
            if prev_block.is_some_and(|b| site.block <= b) {
                return err(format!(
                    "model.interaction_sites[{i}]: blocks must be strictly increasing"
                ));
            }
            if prev_stage.is_some_and(|s| site.stage() <= s) {
                return err(format!(
                    "model.interaction_sites[{i}]: CNN stages must be strictly increasing"
                ));
            }
            prev_block = Some(site.block);
            prev_stage = Some(site.stage());
        }
        Ok(())
    }
}

/// Prompt synthesis mode. The six modes match the benchmark rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    RandomPoint,
    CenterPoint,
    RandomBox,
    BoundingBox,
    CenterPointPlusBox,
    TaskIndicator,
}

impl PromptMode {
    pub const ALL: [PromptMode; 6] = [
        PromptMode::RandomPoint,
        PromptMode::CenterPoint,
        PromptMode::RandomBox,
        PromptMode::BoundingBox,
        PromptMode::CenterPointPlusBox,
        PromptMode::TaskIndicator,
    ];

    pub fn is_manual(&self) -> bool {
        !matches!(self, PromptMode::TaskIndicator)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random_point" => Ok(Self::RandomPoint),
            "center_point" => Ok(Self::CenterPoint),
            "random_box" => Ok(Self::RandomBox),
            "bounding_box" => Ok(Self::BoundingBox),
            "center_point_plus_box" | "cpoint+bbox" => Ok(Self::CenterPointPlusBox),
            "task_indicator" => Ok(Self::TaskIndicator),
            other => Err(SamctError::Config(format!(
                "prompt.mode: unknown mode '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::RandomPoint => "random_point",
            Self::CenterPoint => "center_point",
            Self::RandomBox => "random_box",
            Self::BoundingBox => "bounding_box",
            Self::CenterPointPlusBox => "center_point_plus_box",
            Self::TaskIndicator => "task_indicator",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub mode: PromptMode,
    /// Max box-edge offset as a fraction of box width/height.
    pub shift_fraction: f64,
    pub rng_seed: u64,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            mode: PromptMode::CenterPointPlusBox,
            shift_fraction: 0.05,
            rng_seed: 0,
        }
    }
}

impl PromptSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.shift_fraction) {
            return Err(SamctError::Config(format!(
                "prompt.shift_fraction: {} outside [0, 0.5)",
                self.shift_fraction
            )));
        }
        Ok(())
    }
}

/// Component on/off switches for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSwitches {
    pub cnn_branch: bool,
    pub cross_branch: bool,
    pub adapters: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        Self {
            cnn_branch: true,
            cross_branch: true,
            adapters: true,
        }
    }
}

impl AblationSwitches {
    pub fn validate(&self) -> Result<()> {
        if self.cross_branch && !self.cnn_branch {
            return Err(SamctError::Config(
                "switches.cross_branch: requires cnn_branch on".into(),
            ));
        }
        Ok(())
    }

    /// Parse a `cnn,cbi,adapter` subset list; absent components are off.
    pub fn parse(list: &str) -> Result<Self> {
        let mut sw = Self {
            cnn_branch: false,
            cross_branch: false,
            adapters: false,
        };
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "cnn" => sw.cnn_branch = true,
                "cbi" => sw.cross_branch = true,
                "adapter" | "adapters" => sw.adapters = true,
                other => {
                    return Err(SamctError::Config(format!(
                        "switches: unknown component '{other}' (expected cnn, cbi, adapter)"
                    )))
                }
            }
        }
        sw.validate()?;
        Ok(sw)
    }

    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "on" } else { "off" };
        format!(
            "cnn={} cbi={} adapter={}",
            mark(self.cnn_branch),
            mark(self.cross_branch),
            mark(self.adapters)
        )
    }
}

/// Parameter ranges for data augmentation. Names follow the training recipe:
/// rotation, scaling, cropping, contrast, gamma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub rotate_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop_min: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            rotate_deg: 25.0,
            scale_min: 0.9,
            scale_max: 1.1,
            crop_min: 0.9,
            contrast_min: 0.8,
            contrast_max: 1.2,
            gamma_min: 0.7,
            gamma_max: 1.5,
        }
    }
}

fn default_lr() -> f64 {
    6e-4
}
fn default_lr_drop_factor() -> f64 {
    6.0
}
fn default_lr_drop_at() -> f64 {
    0.2
}
fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    6
}
fn default_pretrain_epochs() -> usize {
    4
}
fn default_pretrain_lr() -> f64 {
    1e-3
}
fn default_pretrain_fraction() -> f64 {
    1.0
}
fn default_bg_fraction() -> f64 {
    0.10
}
fn default_bg_cap() -> usize {
    1000
}
fn default_true() -> bool {
    true
}

/// Main-model training settings. The learning rate drops by `lr_drop_factor`
/// once `lr_drop_at` of the epochs have run (6:1 step at 20% by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lr_drop_factor")]
    pub lr_drop_factor: f64,
    #[serde(default = "default_lr_drop_at")]
    pub lr_drop_at: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs for the from-scratch stand-in backbone when no base checkpoint
    /// is given.
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_lr: f64,
    /// Fraction of the train split used for backbone pretraining.
    #[serde(default = "default_pretrain_fraction")]
    pub pretrain_fraction: f64,
    /// Per-object fraction of full-background pairs kept each epoch.
    #[serde(default = "default_bg_fraction")]
    pub background_fraction: f64,
    #[serde(default = "default_bg_cap")]
    pub background_cap: usize,
    #[serde(default)]
    pub base_checkpoint: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SamctError::Config("train.batch_size: must be > 0".into()));
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return Err(SamctError::Config("train.lr: must be > 0".into()));
        }
        if !(self.lr_drop_factor >= 1.0) {
            return Err(SamctError::Config(
                "train.lr_drop_factor: must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) {
            return Err(SamctError::Config("train.lr_drop_at: outside [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.background_fraction) {
            return Err(SamctError::Config(
                "train.background_fraction: outside [0,1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.pretrain_fraction) {
            return Err(SamctError::Config(
                "train.pretrain_fraction: outside [0,1]".into(),
            ));
        }
        Ok(())
    }
}

fn default_ind_lr() -> f64 {
    3e-4
}
fn default_ind_batch() -> usize {
    12
}
fn default_ind_epochs() -> usize {
    6
}

/// Task-indicator training settings (lr 3e-4, batch 12 by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorTrainConfig {
    #[serde(default = "default_ind_lr")]
    pub lr: f64,
    #[serde(default = "default_ind_batch")]
    pub batch_size: usize,
    #[serde(default = "default_ind_epochs")]
    pub epochs: usize,
    /// Object ID the indicator is trained for.
    #[serde(default)]
    pub task_id: String,
}

impl Default for IndicatorTrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Manifest files produced by `ingest` (or `synth`).
    #[serde(default)]
    pub manifests: Vec<PathBuf>,
}

/// Everything a run needs; serializable so a run is reproducible from the
/// resolved snapshot alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_profile")]
    pub profile: String,
    /// Resolved model dims; filled from `profile` when absent.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub indicator: IndicatorTrainConfig,
    #[serde(default)]
    pub prompt: PromptSpec,
    #[serde(default)]
    pub switches: AblationSwitches,
    #[serde(default)]
    pub augment: AugmentRanges,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/out")
}
fn default_profile() -> String {
    "toy".into()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| SamctError::io(path.to_path_buf(), e))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| SamctError::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Materialize every default so the snapshot is complete.
    pub fn resolve(&mut self) -> Result<()> {
        if self.model.is_none() {
            self.model = Some(ModelConfig::by_name(&self.profile)?);
        }
        self.validate()?;
        Ok(())
    }

    pub fn model(&self) -> &ModelConfig {
        self.model.as_ref().expect("resolved config")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(model) = &self.model {
            model.validate()?;
        }
        self.train.validate()?;
        self.prompt.validate()?;
        self.switches.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SamctError::Serde(e.to_string()))
    }

    /// Write the resolved snapshot into the output directory.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| SamctError::io(self.out_dir.clone(), e))?;
        let path = self.out_dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| SamctError::io(path.clone(), e))?;
        Ok(path)
    }
}
