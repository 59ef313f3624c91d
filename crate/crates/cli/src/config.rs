//! Run configuration: TOML sections layered over library defaults.
//!
//! Resolution order is defaults, then the config file, then command-line
//! flags. Every command echoes its resolved configuration as `config.toml`
//! into its output directory, and that file alone replays the command.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use egic::codec::CodecConfig;
use egic::data::DatasetSpec;
use egic::discriminator::OasisConfig;
use egic::evaluation::DEFAULT_PATCH;
use egic::losses::LossWeights;
use egic::realism::{OrpConfig, ALPHA_GRID};
use egic::training::{DiscriminatorKind, LrSchedule, Stage, Strategy, TrainPlan};
use serde::{Deserialize, Serialize};

pub const ECHO_FILE: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub gen_data: GenDataSection,
    pub codec: CodecConfig,
    pub train: TrainSection,
    pub weights: LossWeights,
    pub orp: OrpConfig,
    pub disc: DiscSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataSection {
    pub out: Option<PathBuf>,
    pub force: bool,
}

/// Training settings. Unset values fall back to the desk-scale plan of the
/// chosen stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub stage: Option<Stage>,
    pub steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_decay_step: Option<u64>,
    pub lr_decayed: Option<f64>,
    pub disc_lr: Option<f64>,
    pub strategy: Option<Strategy>,
    pub discriminator: Option<DiscriminatorKind>,
    pub seed: Option<u64>,
    pub checkpoint_every: Option<u64>,
    /// Samples at the end of the dataset kept out of training; a quarter of
    /// the dataset when unset.
    pub held_out: Option<usize>,
    pub data: Option<PathBuf>,
    pub run: Option<PathBuf>,
    /// Checkpoint of the previous stage.
    pub from: Option<PathBuf>,
    /// Pretrained discriminator checkpoint.
    pub disc: Option<PathBuf>,
}

/// Channel schedule of a pretrained OASIS-C discriminator; the desk
/// schedule when unset. Image size and class count come from the dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscSection {
    pub down_channels: Option<Vec<usize>>,
    pub up_channels: Option<Vec<usize>>,
    pub prep_width: Option<usize>,
}

impl DiscSection {
    pub fn resolve(&mut self, image_size: usize, num_classes: usize, latent_channels: usize) -> OasisConfig {
        let d = OasisConfig::desk(image_size, num_classes, latent_channels);
        OasisConfig {
            down_channels: self.down_channels.get_or_insert(d.down_channels).clone(),
            up_channels: self.up_channels.get_or_insert(d.up_channels).clone(),
            prep_width: *self.prep_width.get_or_insert(d.prep_width),
            ..d
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Features {
    /// Pooled bottleneck of the `disc` checkpoint, or pixels without one.
    #[default]
    Auto,
    Pixels,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Directory of already decoded `<id>.png` files, with optional
    /// `<id>.egic` streams for the rate; replaces `checkpoint`.
    pub decoded: Option<PathBuf>,
    pub disc: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub alpha: f64,
    pub patch: usize,
    pub features: Features,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            data: None,
            checkpoint: None,
            decoded: None,
            disc: None,
            out: None,
            alpha: 1.0,
            patch: DEFAULT_PATCH,
            features: Features::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub disc: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub alphas: Vec<f64>,
    pub patch: usize,
    pub features: Features,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            data: None,
            checkpoint: None,
            disc: None,
            out: None,
            alphas: ALPHA_GRID.to_vec(),
            patch: DEFAULT_PATCH,
            features: Features::Auto,
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid by `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

impl TrainSection {
    /// Fills every unset field from the stage defaults and returns the
    /// plan. Strategy II rewrites `weights` to the objective it trains.
    pub fn resolve(&mut self, weights: &mut LossWeights) -> egic::Result<TrainPlan> {
        let stage = self
            .stage
            .ok_or_else(|| egic::Error::Config("no stage given; pass --stage or set train.stage".into()))?;
        let d = TrainPlan::desk(stage);
        let lr = *self.lr.get_or_insert(d.lr.value);
        let plan = TrainPlan {
            stage,
            strategy: *self.strategy.get_or_insert(d.strategy),
            discriminator: *self.discriminator.get_or_insert(d.discriminator),
            steps: *self.steps.get_or_insert(d.steps),
            batch_size: *self.batch_size.get_or_insert(d.batch_size),
            lr: LrSchedule {
                value: lr,
                decay_step: self.lr_decay_step,
                decayed: *self.lr_decayed.get_or_insert(lr),
            },
            disc_lr: *self.disc_lr.get_or_insert(d.disc_lr),
            weights: *weights,
            seed: *self.seed.get_or_insert(d.seed),
            checkpoint_every: *self.checkpoint_every.get_or_insert(d.checkpoint_every),
        };
        *weights = plan.effective_weights();
        plan.validate()?;
        Ok(TrainPlan {
            weights: *weights,
            ..plan
        })
    }
}
