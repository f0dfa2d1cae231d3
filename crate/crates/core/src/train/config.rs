//! Training configuration file (JSON, every field optional).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorConfig;
use crate::eliminator::GrlConfig;
use crate::error::{Error, Result};
use crate::frontend::shipped_lexicon;
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::train::adam::AdamConfig;
use crate::train::corpus::CorpusConfig;
use crate::train::probe::ProbeConfig;
use crate::train::schedule::LrSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Total optimizer steps; `epochs` takes precedence when set.
    pub steps: u64,
    pub epochs: Option<u64>,
    pub batch_size: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub use_eliminator: bool,
    pub grl: GrlConfig,
    pub weights: LossWeights,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub corpus: CorpusConfig,
    pub probe: ProbeConfig,
    pub checkpoint_every_epochs: Option<u64>,
    pub probe_every_epochs: Option<u64>,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 2000,
            epochs: None,
            batch_size: 8,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            use_eliminator: true,
            grl: GrlConfig::default(),
            weights: LossWeights::default(),
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            corpus: CorpusConfig::default(),
            probe: ProbeConfig::default(),
            checkpoint_every_epochs: None,
            probe_every_epochs: None,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate(self.generator.mel_bins)?;
        self.grl.validate()?;
        self.schedule.validate()?;
        self.corpus.validate()?;
        self.probe.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let g = &self.generator;
        let c = &self.corpus;
        if g.singer_count != c.singers || g.language_count != c.languages || g.mel_bins != c.mel_bins {
            return Err(Error::Config(format!(
                "generator (singers {}, languages {}, mel_bins {}) disagrees with corpus ({}, {}, {})",
                g.singer_count, g.language_count, g.mel_bins, c.singers, c.languages, c.mel_bins
            )));
        }
        let vocab = shipped_lexicon().vocab_size();
        if g.phoneme_vocab < vocab {
            return Err(Error::Config(format!(
                "phoneme_vocab {} is smaller than the lexicon's {vocab}",
                g.phoneme_vocab
            )));
        }
        for w in [self.weights.adversarial, self.weights.feature_match, self.weights.singer] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {w} must be finite and >= 0")));
            }
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::Config("divergence_threshold must be > 0".into()));
        }
        if self.checkpoint_every_epochs == Some(0) || self.probe_every_epochs == Some(0) {
            return Err(Error::Config("epoch intervals must be >= 1".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.corpus.items.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        match self.epochs {
            Some(e) => e * self.steps_per_epoch(),
            None => self.steps,
        }
    }

    /// Whether any discriminator term reaches the generator objective.
    pub fn adversarial(&self) -> bool {
        self.weights.adversarial > 0.0 || self.weights.feature_match > 0.0
    }
}
