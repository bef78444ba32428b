//! Run configuration: built-in defaults, then an optional TOML file, then
//! flags given explicitly on the command line.

use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args};
use motionrnn_core::datagen::GeneratorConfig;
use motionrnn_core::metrics::Metric;
use motionrnn_core::model::ModelConfig;
use motionrnn_core::trainer::TrainConfig;
use motionrnn_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_count: usize,
    pub eval_count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { train_count: 2000, eval_count: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub metrics: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub dataset: DatasetConfig,
}

pub const DEFAULT_METRICS: &str = "mse,mae,ssim,psnr,gdl,csi@0.5";

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            metrics: DEFAULT_METRICS.into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
            dataset: DatasetConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config("config", format!("{}: {}", path.display(), e.message())))
    }

    /// Makes the generator and model agree with the sequence lengths and
    /// frame size, then validates every section.
    pub fn finish(&mut self) -> Result<()> {
        let (c, h) = (self.train.context, self.train.horizon);
        self.generator.split = c;
        self.generator.length = self.generator.length.max(c + h);
        self.model.in_channels = 1;
        self.model.height = self.generator.frame_size;
        self.model.width = self.generator.frame_size;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator.validate()?;
        self.model.validate()?;
        self.metric_list()?;
        Ok(())
    }

    pub fn metric_list(&self) -> Result<Vec<Metric>> {
        let list = Metric::parse_list(&self.metrics)?;
        if list.is_empty() {
            return Err(Error::config("metrics", "no metrics selected"));
        }
        Ok(list)
    }
}

pub fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.try_get_raw(id).ok().flatten().is_some() && m.value_source(id) == Some(ValueSource::CommandLine)
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Root seed; every random stream is derived from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML file with [model], [train], [generator] and [dataset] tables.
    /// Flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl CommonArgs {
    pub fn base(&self, m: &ArgMatches) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if explicit(m, "seed") || self.config.is_none() {
            cfg.seed = self.seed;
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Number of stacked ConvLSTM blocks.
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    /// Hidden channels per block (multiple of 4).
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    /// MotionGRU filter size (odd).
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Trend step size in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Space-to-depth patch factor.
    #[arg(long, default_value_t = 1)]
    pub patch: usize,
    /// ConvLSTM kernel size (odd).
    #[arg(long, default_value_t = 5)]
    pub lstm_kernel: usize,
    /// Disable the Motion Highway.
    #[arg(long)]
    pub no_mh: bool,
    /// Disable the transient variation.
    #[arg(long)]
    pub no_tv: bool,
    /// Disable the trending momentum.
    #[arg(long)]
    pub no_tm: bool,
}

impl ModelArgs {
    pub fn apply(&self, m: &ArgMatches, cfg: &mut ModelConfig) {
        if explicit(m, "layers") {
            cfg.layers = self.layers;
        }
        if explicit(m, "channels") {
            cfg.hidden = self.channels;
        }
        if explicit(m, "k") {
            cfg.k = self.k;
        }
        if explicit(m, "alpha") {
            cfg.alpha = self.alpha;
        }
        if explicit(m, "patch") {
            cfg.patch = self.patch;
        }
        if explicit(m, "lstm_kernel") {
            cfg.lstm_kernel = self.lstm_kernel;
        }
        if self.no_mh {
            cfg.enable_mh = false;
        }
        if self.no_tv {
            cfg.enable_tv = false;
        }
        if self.no_tm {
            cfg.enable_tm = false;
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Training iterations.
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    /// Minibatch size.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// Evaluate and checkpoint every N iterations (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub eval_interval: usize,
    /// Scheduled-sampling decay steps (default: half of --iters).
    #[arg(long)]
    pub decay_steps: Option<usize>,
}

impl TrainArgs {
    pub fn apply(&self, m: &ArgMatches, cfg: &mut TrainConfig) {
        if explicit(m, "iters") {
            cfg.iters = self.iters;
        }
        if explicit(m, "batch") {
            cfg.batch = self.batch;
        }
        if explicit(m, "lr") {
            cfg.adam.lr = self.lr;
        }
        if explicit(m, "eval_interval") {
            cfg.eval_interval = self.eval_interval;
        }
        if self.decay_steps.is_some() {
            cfg.decay_steps = self.decay_steps;
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct SeqArgs {
    /// Context frames fed to the model.
    #[arg(long, default_value_t = 10)]
    pub context: usize,
    /// Frames predicted after the context.
    #[arg(long, default_value_t = 10)]
    pub horizon: usize,
}

impl SeqArgs {
    pub fn apply(&self, m: &ArgMatches, cfg: &mut TrainConfig) {
        if explicit(m, "context") {
            cfg.context = self.context;
        }
        if explicit(m, "horizon") {
            cfg.horizon = self.horizon;
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    /// Frame side in pixels.
    #[arg(long, default_value_t = 64)]
    pub frame_size: usize,
    /// Sprite side at unit scale.
    #[arg(long, default_value_t = 28)]
    pub sprite_size: usize,
    /// Sprites per sequence.
    #[arg(long, default_value_t = 2)]
    pub digits: usize,
    /// IDX image file to draw sprites from instead of procedural glyphs.
    #[arg(long)]
    pub idx: Option<PathBuf>,
}

impl GenArgs {
    pub fn apply(&self, m: &ArgMatches, cfg: &mut GeneratorConfig) {
        if explicit(m, "frame_size") {
            cfg.frame_size = self.frame_size;
        }
        if explicit(m, "sprite_size") {
            cfg.sprite_size = self.sprite_size;
        }
        if explicit(m, "digits") {
            cfg.digits = self.digits;
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// VSEQ file to use instead of generated sequences.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// VSEQ file with held-out sequences (train and ablate only).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Generated training sequences when --data is absent.
    #[arg(long, default_value_t = 2000)]
    pub train_count: usize,
    /// Generated held-out sequences when --eval-data is absent.
    #[arg(long, default_value_t = 200)]
    pub eval_count: usize,
    #[command(flatten)]
    pub gen: GenArgs,
}

impl DataArgs {
    pub fn apply(&self, m: &ArgMatches, cfg: &mut RunConfig) {
        if explicit(m, "train_count") {
            cfg.dataset.train_count = self.train_count;
        }
        if explicit(m, "eval_count") {
            cfg.dataset.eval_count = self.eval_count;
        }
        self.gen.apply(m, &mut cfg.generator);
    }
}
