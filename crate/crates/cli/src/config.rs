//! The run configuration document shared by all subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use cgreid::backbone::BackboneSpec;
use cgreid::data::SynthSpec;
use cgreid::eval::Setting;
use cgreid::head::{HeadSpec, Variant};
use cgreid::model::ModelSpec;
use cgreid::seed;
use cgreid::trainer::{GridSpec, TrainSpec};
use cgreid::{Error, Result};
use serde::{Deserialize, Serialize};

/// Head options that do not depend on the backbone or the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub variant: Variant,
    pub n_c: usize,
    pub embed_dim: usize,
    pub shared_embed: bool,
    pub part_stripes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            variant: Variant::A,
            n_c: 8,
            embed_dim: 16,
            shared_embed: true,
            part_stripes: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub head: HeadConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub settings: Vec<Setting>,
    /// Length of the reported CMC curve; defaults to min(20, gallery size).
    pub k_max: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            settings: vec![Setting::Standard],
            k_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Where `gen-data` writes and where the other commands read the dataset.
    pub data_dir: Option<PathBuf>,
    /// Directory for checkpoints and logs, or the file for grid and feature output.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream: data generation, initialization,
    /// sampling, augmentation and label noise.
    pub seed: u64,
    pub data: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainSpec,
    pub eval: EvalConfig,
    pub grid: GridSpec,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_spec().validate()?;
        self.model_spec()?.validate()?;
        self.train_spec().validate()?;
        self.grid.validate()?;
        if self.eval.settings.is_empty() {
            return Err(Error::InvalidSpec("eval.settings must name at least one setting".into()));
        }
        if self.eval.k_max == Some(0) {
            return Err(Error::InvalidSpec("eval.k_max must be at least 1".into()));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        seed::derive(self.seed, "data")
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.data_seed(),
            ..self.data.clone()
        }
    }

    /// Model spec for the configured backbone and data; `C` and the class
    /// count are derived rather than configured.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let h = &self.model.head;
        let spec = ModelSpec {
            backbone: BackboneSpec {
                input_hw: self.data.image_hw,
                ..self.model.backbone.clone()
            },
            head: HeadSpec {
                variant: h.variant,
                n_c: h.n_c,
                c_total: self.model.backbone.out_channels(),
                embed_dim: h.embed_dim,
                n_id: self.data.n_train_ids,
                shared_embed: h.shared_embed,
                part_stripes: h.part_stripes,
            }
            .normalized(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The single-run training spec; its seed is the root seed, the same
    /// seed a one-seed grid over `[seed]` would use.
    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, "model")
    }
}
