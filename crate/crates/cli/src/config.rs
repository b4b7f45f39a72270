//! Run configuration: a TOML document with `[architecture]`, `[train]` and
//! `[augment]` tables, resolved against presets, the dataset and CLI flags.

use std::fs;
use std::path::{Path, PathBuf};

use r3d_core::datapipe::AugmentConfig;
use r3d_core::trainer::TrainConfig;
use r3d_core::{ArchitectureSpec, Genre};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_KEEP_CHECKPOINTS: usize = 3;

/// The document as written. Every architecture field is optional so that a
/// preset can be named and selectively overridden.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Per-epoch checkpoints kept on disk; 0 keeps them all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_checkpoints: Option<usize>,
    #[serde(default)]
    pub architecture: ArchitectureSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genre: Option<Genre>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_depths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widen_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth_rate: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compression: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_shape: Option<[usize; 4]>,
}

/// Unset fields follow the architecture's clip shape and the standard
/// scale set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_scales: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_size: Option<usize>,
}

/// Fully resolved settings; written to `config.lock` in the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub keep_checkpoints: usize,
    pub architecture: ArchitectureSpec,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    /// Paths in the document are taken relative to the directory holding it.
    pub fn rebase(&mut self, dir: &Path) {
        for p in [&mut self.dataset, &mut self.output_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

impl ArchitectureSection {
    pub fn is_empty(&self) -> bool {
        *self == ArchitectureSection::default()
    }

    /// Builds the spec from the preset (if any) plus overrides. `fallback_classes`
    /// fills `num_classes` when the document leaves it unset.
    pub fn resolve(&self, fallback_classes: Option<usize>) -> Result<ArchitectureSpec, CliError> {
        let classes = self.num_classes.or(fallback_classes);
        let mut spec = match &self.preset {
            Some(name) => ArchitectureSpec::preset(name, classes.unwrap_or(2))?,
            None => {
                let need = |field: &str| CliError::config(format!("architecture requires field {field} (or a preset)"));
                let genre = self.genre.ok_or_else(|| need("genre"))?;
                ArchitectureSpec {
                    name: self.name.clone().unwrap_or_else(|| genre.to_string()),
                    genre,
                    stage_depths: self.stage_depths.clone().ok_or_else(|| need("stage_depths"))?,
                    base_width: self.base_width.ok_or_else(|| need("base_width"))?,
                    widen_factor: None,
                    cardinality: None,
                    growth_rate: None,
                    compression: None,
                    num_classes: 0,
                    clip_shape: r3d_core::blocks::DEFAULT_CLIP,
                }
            }
        };
        if let Some(v) = &self.name {
            spec.name = v.clone();
        }
        if let Some(v) = self.genre {
            spec.genre = v;
        }
        if let Some(v) = &self.stage_depths {
            spec.stage_depths = v.clone();
        }
        if let Some(v) = self.base_width {
            spec.base_width = v;
        }
        spec.widen_factor = self.widen_factor.or(spec.widen_factor);
        spec.cardinality = self.cardinality.or(spec.cardinality);
        spec.growth_rate = self.growth_rate.or(spec.growth_rate);
        spec.compression = self.compression.or(spec.compression);
        if let Some(v) = self.clip_shape {
            spec.clip_shape = v;
        }
        spec.num_classes = classes.ok_or_else(|| CliError::config("num_classes is not set (use --classes, the config or a dataset)"))?;
        spec.validate()?;
        Ok(spec)
    }
}

impl AugmentSection {
    pub fn resolve(&self, spec: &ArchitectureSpec) -> Result<AugmentConfig, CliError> {
        let d = AugmentConfig::default();
        let cfg = AugmentConfig {
            clip_len: self.clip_len.unwrap_or(spec.clip_shape[1]),
            crop_scales: self.crop_scales.clone().unwrap_or(d.crop_scales),
            flip_probability: self.flip_probability.unwrap_or(d.flip_probability),
            output_size: self.output_size.unwrap_or(spec.clip_shape[2]),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ResolvedConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid config lock: {e}")))
    }
}
