//! Flat run configuration. Every key is optional and top-level; unknown keys
//! are rejected before any work starts.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use vidprism::dbi::{DbiConfig, Interaction};
use vidprism::feature_io::SyntheticSpec;
use vidprism::hmoe::Combination;
use vidprism::model::{Aggregation, ModelConfig};
use vidprism::objectives::LossWeights;
use vidprism::rgsta::ScoreMixing;
use vidprism::trainer::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory; relative paths resolve against the config file.
    pub out_dir: Option<PathBuf>,
    /// Seeds data generation, the split, initialisation and shuffling.
    pub seed: Option<u64>,
    /// VPF dataset to read instead of generating one.
    pub data: Option<PathBuf>,
    pub eval_fraction: Option<f64>,

    pub num_classes: Option<usize>,
    pub clips_per_class: Option<usize>,
    pub t: Option<usize>,
    pub d: Option<usize>,
    pub content_axis_count: Option<usize>,
    pub motion_frequencies: Option<Vec<f64>>,
    pub noise_sigma: Option<f64>,

    pub rates: Option<Vec<usize>>,
    pub heads: Option<usize>,
    pub ffn_mult: Option<usize>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub delta: Option<f64>,
    pub metric_dim: Option<usize>,
    pub mixing: Option<ScoreMixing>,
    pub aggregation: Option<Aggregation>,
    pub threshold: Option<f64>,
    pub kernel: Option<usize>,
    pub interaction: Option<Interaction>,
    pub combination: Option<Combination>,

    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub eval_every: Option<usize>,

    pub lambda_rank: Option<f64>,
    pub lambda_div: Option<f64>,
    pub lambda_gate: Option<f64>,
    pub rank_temperature: Option<f64>,

    #[serde(skip)]
    base_dir: PathBuf,
}

pub const DEFAULT_EVAL_FRACTION: f64 = 0.25;

/// Where the clips come from.
pub enum DataSource {
    Synthetic(SyntheticSpec),
    File(PathBuf),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CliError> {
        let synthetic_keys = [
            self.num_classes.is_some(),
            self.clips_per_class.is_some(),
            self.t.is_some(),
            self.d.is_some(),
            self.content_axis_count.is_some(),
            self.motion_frequencies.is_some(),
            self.noise_sigma.is_some(),
        ];
        if self.data.is_some() && synthetic_keys.iter().any(|&k| k) {
            return Err(CliError::Usage(
                "`data` and synthetic dataset keys are mutually exclusive".into(),
            ));
        }
        let f = self.eval_fraction();
        if !(0.0..1.0).contains(&f) {
            return Err(CliError::Usage(format!("eval_fraction must lie in [0, 1), got {f}")));
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn eval_fraction(&self) -> f64 {
        self.eval_fraction.unwrap_or(DEFAULT_EVAL_FRACTION)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.base_dir
            .join(self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out")))
    }

    /// Overrides the output directory with a path relative to the working
    /// directory.
    pub fn set_out_dir(&mut self, dir: PathBuf) {
        self.out_dir = Some(std::path::absolute(&dir).unwrap_or(dir));
    }

    pub fn source(&self) -> Result<DataSource, CliError> {
        if let Some(p) = &self.data {
            return Ok(DataSource::File(self.base_dir.join(p)));
        }
        let base = SyntheticSpec::default();
        let spec = SyntheticSpec {
            num_classes: self.num_classes.unwrap_or(base.num_classes),
            clips_per_class: self.clips_per_class.unwrap_or(base.clips_per_class),
            t: self.t.unwrap_or(base.t),
            d: self.d.unwrap_or(base.d),
            content_axis_count: self.content_axis_count.unwrap_or(base.content_axis_count),
            motion_frequencies: self.motion_frequencies.clone().unwrap_or(base.motion_frequencies),
            noise_sigma: self.noise_sigma.unwrap_or(base.noise_sigma),
            seed: self.seed(),
        };
        spec.validate()?;
        Ok(DataSource::Synthetic(spec))
    }

    pub fn model_config(&self, dim: usize, num_classes: usize) -> ModelConfig {
        let mut m = ModelConfig::new(dim, num_classes);
        let dbi = DbiConfig::default();
        m.rates = self.rates.clone().unwrap_or(m.rates);
        m.heads = self.heads.unwrap_or(m.heads);
        m.ffn_mult = self.ffn_mult.unwrap_or(m.ffn_mult);
        m.alpha = self.alpha.unwrap_or(m.alpha);
        m.tau = self.tau.unwrap_or(m.tau);
        m.delta = self.delta.unwrap_or(m.delta);
        m.metric_dim = self.metric_dim.unwrap_or(m.metric_dim);
        m.mixing = self.mixing.unwrap_or(m.mixing);
        m.aggregation = self.aggregation.unwrap_or(m.aggregation);
        m.dbi = DbiConfig {
            threshold: self.threshold.unwrap_or(dbi.threshold),
            kernel: self.kernel.unwrap_or(dbi.kernel),
            interaction: self.interaction.unwrap_or(dbi.interaction),
        };
        m.combination = self.combination.unwrap_or(m.combination);
        m.seed = self.seed();
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = TrainConfig::default();
        let l = LossWeights::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(t.epochs),
            batch_size: self.batch_size.unwrap_or(t.batch_size),
            learning_rate: self.learning_rate.unwrap_or(t.learning_rate),
            beta1: self.beta1.unwrap_or(t.beta1),
            beta2: self.beta2.unwrap_or(t.beta2),
            eps: self.eps.unwrap_or(t.eps),
            weight_decay: self.weight_decay.unwrap_or(t.weight_decay),
            seed: self.seed(),
            eval_every: self.eval_every.unwrap_or(t.eval_every),
            loss: LossWeights {
                lambda_rank: self.lambda_rank.unwrap_or(l.lambda_rank),
                lambda_div: self.lambda_div.unwrap_or(l.lambda_div),
                lambda_gate: self.lambda_gate.unwrap_or(l.lambda_gate),
                rank_temperature: self.rank_temperature.unwrap_or(l.rank_temperature),
            },
        }
    }
}
