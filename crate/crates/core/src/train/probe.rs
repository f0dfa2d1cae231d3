//! Post-hoc singer probe on frozen encoder outputs.
//!
//! A fresh classifier with the eliminator topology (no reversal layer) is
//! trained on encoder outputs of a held-in split and scored on the rest.

use serde::{Deserialize, Serialize};

use crate::eliminator::{classify_singer, init_eliminator, singer_loss};
use crate::error::{Error, Result};
use crate::generator::{encode, GeneratorConfig};
use crate::params::ParamSet;
use crate::rng::{int_in, stream, Purpose};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::adam::{adam_step, AdamConfig, OptimizerState};
use crate::train::corpus::SyntheticCorpus;

const PREFIX: &str = "probe";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub conv_kernel: usize,
    /// Seed of the probe classifier initialization and batch sampling.
    pub seed: u64,
    /// Seed of the probe corpus when drawn separately from training data.
    pub corpus_seed: u64,
    pub corpus_items: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 500,
            batch_size: 8,
            lr: 3e-3,
            conv_kernel: 3,
            seed: 0,
            corpus_seed: 1_000_003,
            corpus_items: 150,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.corpus_items < 6 {
            return Err(Error::Config("probe needs batch_size >= 1 and >= 6 items".into()));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("probe conv_kernel must be odd".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("probe lr must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub held_out: usize,
}

/// Items `s + k·S` go to the held-out split when `k % 3 == 2`, which keeps
/// both splits balanced over singers.
fn is_held_out(index: usize, singers: usize) -> bool {
    (index / singers) % 3 == 2
}

fn predict(params: &ParamSet, x: &Tensor) -> Result<usize> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let v = tape.constant(x.clone());
    let out = classify_singer(&mut tape, v, &p, PREFIX, None)?;
    let probs = tape.value(out.probabilities).data();
    let mut best = 0;
    for (i, &v) in probs.iter().enumerate() {
        if v > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

fn accuracy(params: &ParamSet, data: &[(Tensor, usize)]) -> Result<f64> {
    let mut hits = 0;
    for (x, s) in data {
        hits += usize::from(predict(params, x)? == *s);
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Freezes the generator, trains a fresh singer classifier on encoder
/// outputs for `cfg.steps` steps and returns its held-out accuracy.
pub fn probe_eval(
    generator: &ParamSet,
    gen_cfg: &GeneratorConfig,
    corpus: &SyntheticCorpus,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    cfg.validate()?;
    let singers = gen_cfg.singer_count;
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, item) in corpus.items.iter().enumerate() {
        let mut tape = Tape::new();
        let p = generator.bind(&mut tape, false);
        let enc = encode(&mut tape, &p, gen_cfg, &item.sequence, item.language_id)?;
        let sample = (tape.value(enc).clone(), item.singer_id);
        if is_held_out(i, singers) {
            held.push(sample);
        } else {
            train.push(sample);
        }
    }
    if train.is_empty() || held.is_empty() {
        return Err(Error::Config("probe corpus too small for a held-out split".into()));
    }
    let mut params = init_eliminator(PREFIX, gen_cfg.hidden_dim, singers, cfg.conv_kernel, cfg.seed);
    let mut opt = OptimizerState::new(&params);
    let adam = AdamConfig::default();
    for step in 0..cfg.steps {
        let mut rng = stream(cfg.seed, Purpose::Probe, step);
        let mut grads = params.zeros_like();
        let scale = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let (x, s) = &train[int_in(&mut rng, 0, train.len() - 1)];
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let v = tape.constant(x.clone());
            let out = classify_singer(&mut tape, v, &p, PREFIX, None)?;
            let (loss, _) = singer_loss(&mut tape, out.probabilities, *s)?;
            let mut g = tape.backward(loss)?;
            grads.add_scaled(&p.grads(&mut g, PREFIX), scale);
        }
        adam_step(&mut params, &grads, &mut opt, cfg.lr, &adam)?;
    }
    Ok(ProbeReport {
        accuracy: accuracy(&params, &held)?,
        train_accuracy: accuracy(&params, &train)?,
        held_out: held.len(),
    })
}
