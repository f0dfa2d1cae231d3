//! Alternating discriminator / generator optimization.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::discriminator::{discriminate, init_discriminators, max_crop_start, CriticOutput};
use crate::eliminator::{batch_singer_loss, classify_singer, init_eliminator, PREFIX as ELIMINATOR};
use crate::error::{Error, Result};
use crate::frontend::shipped_lexicon;
use crate::generator::{generator_forward_train, init_generator};
use crate::losses::{acoustic_loss, feature_match_loss, lsgan_d_loss, lsgan_g_loss, total_generator_loss, LossParts};
use crate::params::ParamSet;
use crate::rng::{int_in, shuffle, stream, Purpose};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::adam::{adam_step, OptimizerState};
use crate::train::checkpoint::{read_checkpoint_file, write_checkpoint_file, Checkpoint};
use crate::train::config::TrainConfig;
use crate::train::corpus::{make_synthetic_corpus, CorpusItem, SyntheticCorpus};
use crate::train::probe::probe_eval;
use crate::train::schedule::lr_for_step;

/// Everything needed to continue training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Optimizer steps taken; also the counter of the step-keyed RNG streams.
    pub step: u64,
    /// `gen.*` and, with the eliminator enabled, `eliminator.*`.
    pub generator: ParamSet,
    /// `disc.*`
    pub discriminator: ParamSet,
    pub opt_generator: OptimizerState,
    pub opt_discriminator: OptimizerState,
}

const GEN_M: &str = "adam.generator.m.";
const GEN_V: &str = "adam.generator.v.";
const DISC_M: &str = "adam.discriminator.m.";
const DISC_V: &str = "adam.discriminator.v.";

fn prefixed(out: &mut ParamSet, prefix: &str, set: &ParamSet) {
    for (k, v) in set.iter() {
        out.insert(format!("{prefix}{k}"), v.clone());
    }
}

fn strip(set: &ParamSet, prefix: &str) -> ParamSet {
    set.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

impl TrainState {
    pub fn initial(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut generator = init_generator(&config.generator, config.seed)?;
        if config.use_eliminator {
            generator.extend(init_eliminator(
                ELIMINATOR,
                config.generator.hidden_dim,
                config.generator.singer_count,
                3,
                config.seed,
            ));
        }
        let discriminator = init_discriminators(&config.discriminator, config.seed);
        Ok(TrainState {
            opt_generator: OptimizerState::new(&generator),
            opt_discriminator: OptimizerState::new(&discriminator),
            config,
            step: 0,
            generator,
            discriminator,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = ParamSet::new();
        tensors.extend(self.generator.clone());
        tensors.extend(self.discriminator.clone());
        prefixed(&mut tensors, GEN_M, &self.opt_generator.m);
        prefixed(&mut tensors, GEN_V, &self.opt_generator.v);
        prefixed(&mut tensors, DISC_M, &self.opt_discriminator.m);
        prefixed(&mut tensors, DISC_V, &self.opt_discriminator.v);
        let meta = json!({
            "step": self.step,
            "rng": {"algorithm": "chacha8-stream", "seed": self.config.seed, "counter": self.step},
            "optimizer": {
                "generator_step": self.opt_generator.step,
                "discriminator_step": self.opt_discriminator.step,
            },
            "config": self.config,
        });
        Checkpoint { tensors, meta }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let field = |path: &[&str]| -> Result<&serde_json::Value> {
            let mut v = &ckpt.meta;
            for p in path {
                v = v
                    .get(p)
                    .ok_or_else(|| Error::Format(format!("checkpoint meta lacks `{}`", path.join("."))))?;
            }
            Ok(v)
        };
        let as_u64 = |path: &[&str]| -> Result<u64> {
            field(path)?
                .as_u64()
                .ok_or_else(|| Error::Format(format!("`{}` is not an integer", path.join("."))))
        };
        let config: TrainConfig = serde_json::from_value(field(&["config"])?.clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let step = as_u64(&["step"])?;
        let t = &ckpt.tensors;
        let generator: ParamSet = t
            .iter()
            .filter(|(k, _)| k.starts_with("gen.") || k.starts_with(&format!("{ELIMINATOR}.")))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let discriminator = t.with_prefix("disc.");
        let state = TrainState {
            opt_generator: OptimizerState {
                m: strip(t, GEN_M),
                v: strip(t, GEN_V),
                step: as_u64(&["optimizer", "generator_step"])?,
            },
            opt_discriminator: OptimizerState {
                m: strip(t, DISC_M),
                v: strip(t, DISC_V),
                step: as_u64(&["optimizer", "discriminator_step"])?,
            },
            config,
            step,
            generator,
            discriminator,
        };
        state.check_consistent()?;
        Ok(state)
    }

    fn check_consistent(&self) -> Result<()> {
        let expected = TrainState::initial(self.config.clone())?;
        let same_layout = |a: &ParamSet, b: &ParamSet| {
            a.len() == b.len() && a.iter().zip(b.iter()).all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
        };
        let ok = same_layout(&self.generator, &expected.generator)
            && same_layout(&self.discriminator, &expected.discriminator)
            && same_layout(&self.opt_generator.m, &expected.generator)
            && same_layout(&self.opt_generator.v, &expected.generator)
            && same_layout(&self.opt_discriminator.m, &expected.discriminator)
            && same_layout(&self.opt_discriminator.v, &expected.discriminator);
        if ok {
            Ok(())
        } else {
            Err(Error::Format("checkpoint tensors do not match its config".into()))
        }
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_checkpoint_file(&state.to_checkpoint(), path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    TrainState::from_checkpoint(&read_checkpoint_file(path)?)
}

/// One line of the metrics log; losses are batch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    #[serde(rename = "L_a")]
    pub l_a: f64,
    #[serde(rename = "L_adv")]
    pub l_adv: f64,
    #[serde(rename = "L_f")]
    pub l_f: f64,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    pub d_loss: Option<f64>,
    pub mel_l1: f64,
    pub duration_mse: f64,
    pub grl_lambda: f64,
    pub clamped: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub probe_acc: Option<f64>,
}

pub struct Trainer {
    state: TrainState,
    corpus: SyntheticCorpus,
    probe_corpus: Option<SyntheticCorpus>,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        Self::resume(TrainState::initial(config)?)
    }

    pub fn resume(state: TrainState) -> Result<Self> {
        state.config.validate()?;
        let corpus = make_synthetic_corpus(&state.config.corpus, &shipped_lexicon(), state.config.seed)?;
        Ok(Trainer {
            state,
            corpus,
            probe_corpus: None,
            order: None,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn corpus(&self) -> &SyntheticCorpus {
        &self.corpus
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.corpus.len()).collect();
            shuffle(&mut order, &mut stream(self.state.config.seed, Purpose::Shuffle, epoch));
            self.order = Some((epoch, order));
        }
        &self.order.as_ref().expect("just set").1
    }

    fn batch(&mut self, step: u64) -> Vec<usize> {
        let spe = self.state.config.steps_per_epoch();
        let b = self.state.config.batch_size;
        let pos = (step % spe) as usize;
        let order = self.epoch_order(step / spe);
        order[pos * b..((pos + 1) * b).min(order.len())].to_vec()
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let cfg = self.state.config.clone();
        let s = self.state.step;
        let spe = cfg.steps_per_epoch();
        let epoch = s / spe;
        let lr = lr_for_step(s, spe, &cfg.schedule);
        let lambda = cfg.grl.lambda_at(s);
        let batch = self.batch(s);
        let items: Vec<&CorpusItem> = batch.iter().map(|&i| &self.corpus.items[i]).collect();
        let scale = 1.0 / items.len() as f64;
        let mut crop_rng = stream(cfg.seed, Purpose::Crop, s);
        let crops: Vec<usize> = items
            .iter()
            .map(|it| int_in(&mut crop_rng, 0, max_crop_start(it.target_mel.rows(), &cfg.discriminator)))
            .collect();

        // Generator forward passes, kept alive until after the D update.
        let mut graphs = Vec::with_capacity(items.len());
        for item in &items {
            let mut tape = Tape::new();
            let p = self.state.generator.bind(&mut tape, true);
            let out = generator_forward_train(
                &mut tape,
                &p,
                &cfg.generator,
                &item.sequence,
                item.language_id,
                item.singer_id,
                Some(&item.sequence.note_durations),
            )?;
            graphs.push((tape, p, out));
        }

        let mut d_loss = None;
        if cfg.adversarial() {
            let mut grads = self.state.discriminator.zeros_like();
            let mut total = 0.0;
            for ((item, (tape, _, out)), &crop) in items.iter().zip(&graphs).zip(&crops) {
                let mut dt = Tape::new();
                let dp = self.state.discriminator.bind(&mut dt, true);
                let real = dt.constant(item.target_mel.clone());
                let fake = dt.constant(tape.value(out.mel).clone());
                let r = discriminate(&mut dt, real, &dp, &cfg.discriminator, crop)?;
                let f = discriminate(&mut dt, fake, &dp, &cfg.discriminator, crop)?;
                let loss = lsgan_d_loss(&mut dt, &scores(&r), &scores(&f))?;
                total += dt.scalar_value(loss);
                let mut g = dt.backward(loss)?;
                grads.add_scaled(&dp.grads(&mut g, "disc."), scale);
            }
            let d = total * scale;
            self.check_divergence("d_loss", d, s)?;
            adam_step(&mut self.state.discriminator, &grads, &mut self.state.opt_discriminator, lr, &cfg.adam)?;
            d_loss = Some(d);
        }

        let mut grads = self.state.generator.zeros_like();
        let mut sums = [0.0; 6];
        let mut clamped = 0;
        for ((item, (mut tape, p, out)), &crop) in items.iter().zip(graphs).zip(&crops) {
            let ac = acoustic_loss(
                &mut tape,
                out.mel,
                &item.target_mel,
                out.log_durations,
                &item.sequence.note_durations,
            )?;
            let (mut adv, mut fm) = (None, None);
            if cfg.adversarial() {
                let dp = self.state.discriminator.bind(&mut tape, false);
                let real = tape.constant(item.target_mel.clone());
                let r = discriminate(&mut tape, real, &dp, &cfg.discriminator, crop)?;
                let real_feats: Vec<Vec<Tensor>> = r
                    .iter()
                    .map(|c| c.feature_maps.iter().map(|&v| tape.value(v).clone()).collect())
                    .collect();
                let f = discriminate(&mut tape, out.mel, &dp, &cfg.discriminator, crop)?;
                let fake_feats: Vec<Vec<Var>> = f.iter().map(|c| c.feature_maps.clone()).collect();
                adv = Some(lsgan_g_loss(&mut tape, &scores(&f))?);
                fm = Some(feature_match_loss(&mut tape, &real_feats, &fake_feats)?);
            }
            let mut singer = None;
            if cfg.use_eliminator {
                let c = classify_singer(&mut tape, out.encoder_out, &p, ELIMINATOR, Some(lambda))?;
                let (l, n) = batch_singer_loss(&mut tape, &[(c.probabilities, item.singer_id)])?;
                clamped += n;
                singer = Some(l);
            }
            let parts = LossParts {
                acoustic: ac.total,
                adversarial: adv,
                feature_match: fm,
                singer,
            };
            let total = total_generator_loss(&mut tape, &parts, &cfg.weights)?;
            let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar_value(v));
            let vals = [
                tape.scalar_value(ac.total),
                value(adv),
                value(fm),
                value(singer),
                tape.scalar_value(ac.mel_l1),
                tape.scalar_value(ac.duration_mse),
            ];
            for (acc, v) in sums.iter_mut().zip(vals) {
                *acc += v * scale;
            }
            self.check_divergence("generator loss", tape.scalar_value(total), s)?;
            let mut g = tape.backward(total)?;
            grads.add_scaled(&p.grads(&mut g, "gen."), scale);
            grads.add_scaled(&p.grads(&mut g, &format!("{ELIMINATOR}.")), scale);
        }
        adam_step(&mut self.state.generator, &grads, &mut self.state.opt_generator, lr, &cfg.adam)?;
        self.state.step += 1;

        let mut probe_acc = None;
        if let Some(k) = cfg.probe_every_epochs {
            if self.state.step % spe == 0 && (self.state.step / spe) % k == 0 {
                probe_acc = Some(self.probe()?);
            }
        }
        Ok(StepMetrics {
            step: s,
            epoch,
            lr,
            l_a: sums[0],
            l_adv: sums[1],
            l_f: sums[2],
            l_s: sums[3],
            d_loss,
            mel_l1: sums[4],
            duration_mse: sums[5],
            grl_lambda: if cfg.use_eliminator { lambda } else { 0.0 },
            clamped,
            probe_acc,
        })
    }

    /// Probe accuracy of the current encoder on the configured probe corpus.
    pub fn probe(&mut self) -> Result<f64> {
        let cfg = &self.state.config;
        if self.probe_corpus.is_none() {
            let corpus_cfg = crate::train::corpus::CorpusConfig {
                items: cfg.probe.corpus_items,
                ..cfg.corpus.clone()
            };
            self.probe_corpus = Some(make_synthetic_corpus(&corpus_cfg, &shipped_lexicon(), cfg.probe.corpus_seed)?);
        }
        let corpus = self.probe_corpus.as_ref().expect("just built");
        Ok(probe_eval(&self.state.generator, &cfg.generator, corpus, &cfg.probe)?.accuracy)
    }

    fn check_divergence(&self, what: &str, value: f64, step: u64) -> Result<()> {
        if !value.is_finite() || value > self.state.config.divergence_threshold {
            return Err(Error::Numeric(format!("training diverged at step {step}: {what} = {value}")));
        }
        Ok(())
    }
}

fn scores(outputs: &[CriticOutput]) -> Vec<Var> {
    outputs.iter().map(|c| c.score_map).collect()
}

/// Diagnostic summary written when training aborts.
fn divergence_dump(state: &TrainState, last: Option<&StepMetrics>, error: &Error) -> serde_json::Value {
    let norms: serde_json::Map<String, serde_json::Value> = state
        .generator
        .iter()
        .chain(state.discriminator.iter())
        .map(|(k, v)| (k.clone(), json!(v.max_abs())))
        .collect();
    json!({
        "error": error.to_string(),
        "step": state.step,
        "last_metrics": last,
        "max_abs_param": norms,
    })
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

/// Runs a trainer until `until` steps. With `out_dir`, writes
/// `metrics.jsonl`, periodic `checkpoint_epoch{N}.xsng`, the final
/// `checkpoint.xsng`, and `divergence.json` on abort.
pub fn run_training(mut trainer: Trainer, until: u64, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let spe = trainer.state().config.steps_per_epoch();
    let ckpt_every = trainer.state().config.checkpoint_every_epochs;
    let mut metrics: Vec<StepMetrics> = Vec::new();
    while trainer.state().step < until {
        let m = match trainer.step() {
            Ok(m) => m,
            Err(e) => {
                if let Some(dir) = out_dir {
                    let dump = divergence_dump(trainer.state(), metrics.last(), &e);
                    let path = dir.join("divergence.json");
                    std::fs::write(&path, serde_json::to_vec_pretty(&dump)?).map_err(|err| Error::io(&path, err))?;
                }
                return Err(e);
            }
        };
        if let Some((w, path)) = log.as_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            w.write_all(b"\n").map_err(|e| Error::io(path.clone(), e))?;
        }
        metrics.push(m);
        let step = trainer.state().step;
        if let (Some(dir), Some(k)) = (out_dir, ckpt_every) {
            if step % spe == 0 && (step / spe) % k == 0 {
                save_checkpoint(trainer.state(), &dir.join(format!("checkpoint_epoch{}.xsng", step / spe)))?;
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        save_checkpoint(trainer.state(), &dir.join("checkpoint.xsng"))?;
    }
    Ok(TrainOutcome {
        state: trainer.into_state(),
        metrics,
    })
}

/// Trains from scratch for `config.total_steps()` steps.
pub fn train(config: TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let total = config.total_steps();
    run_training(Trainer::new(config)?, total, out_dir)
}
