//! Adversarial, feature-matching, acoustic and combined generator losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Offset inside the log of target durations.
pub const LOG_DURATION_OFFSET: f64 = 1e-8;

fn mean_sq_shifted(tape: &mut Tape, x: Var, target: f64) -> Var {
    let shifted = tape.add_scalar(x, -target);
    let sq = tape.square(shifted);
    tape.mean(sq)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let total = tape.add_all(terms)?;
    Ok(tape.scale(total, 1.0 / terms.len() as f64))
}

/// Mean over critics of `½·E[(D(real) − 1)²] + ½·E[D(fake)²]`.
pub fn lsgan_d_loss(tape: &mut Tape, real_scores: &[Var], fake_scores: &[Var]) -> Result<Var> {
    if real_scores.is_empty() || real_scores.len() != fake_scores.len() {
        return Err(Error::Contract(format!(
            "lsgan_d_loss needs matching non-empty lists, got {} real / {} fake",
            real_scores.len(),
            fake_scores.len()
        )));
    }
    let mut per_critic = Vec::with_capacity(real_scores.len());
    for (&r, &f) in real_scores.iter().zip(fake_scores) {
        let lr = mean_sq_shifted(tape, r, 1.0);
        let lf = mean_sq_shifted(tape, f, 0.0);
        let both = tape.add(lr, lf)?;
        per_critic.push(tape.scale(both, 0.5));
    }
    mean_of(tape, &per_critic)
}

/// Mean over critics of `½·E[(D(fake) − 1)²]`.
pub fn lsgan_g_loss(tape: &mut Tape, fake_scores: &[Var]) -> Result<Var> {
    if fake_scores.is_empty() {
        return Err(Error::Contract("lsgan_g_loss needs at least one critic".into()));
    }
    let per_critic: Vec<Var> = fake_scores
        .iter()
        .map(|&f| {
            let l = mean_sq_shifted(tape, f, 1.0);
            tape.scale(l, 0.5)
        })
        .collect();
    mean_of(tape, &per_critic)
}

/// Mean absolute difference per layer, averaged over layers, then critics.
/// Real features act as constants.
pub fn feature_match_loss(tape: &mut Tape, real_feats: &[Vec<Tensor>], fake_feats: &[Vec<Var>]) -> Result<Var> {
    if real_feats.is_empty() || real_feats.len() != fake_feats.len() {
        return Err(Error::Contract(format!(
            "feature_match_loss: {} real vs {} fake critics",
            real_feats.len(),
            fake_feats.len()
        )));
    }
    let mut per_critic = Vec::with_capacity(real_feats.len());
    for (reals, fakes) in real_feats.iter().zip(fake_feats) {
        if reals.is_empty() || reals.len() != fakes.len() {
            return Err(Error::Contract(format!(
                "feature_match_loss: {} real vs {} fake layers",
                reals.len(),
                fakes.len()
            )));
        }
        let mut per_layer = Vec::with_capacity(reals.len());
        for (real, &fake) in reals.iter().zip(fakes) {
            if real.shape() != tape.shape(fake) {
                return Err(Error::Contract(format!(
                    "feature shapes differ: {:?} vs {:?}",
                    real.shape(),
                    tape.shape(fake)
                )));
            }
            let r = tape.constant(real.clone());
            let diff = tape.sub(fake, r)?;
            let a = tape.abs(diff);
            per_layer.push(tape.mean(a));
        }
        per_critic.push(mean_of(tape, &per_layer)?);
    }
    mean_of(tape, &per_critic)
}

#[derive(Clone, Copy, Debug)]
pub struct AcousticLoss {
    pub total: Var,
    pub mel_l1: Var,
    pub duration_mse: Var,
}

/// `mean|pred − target|` over the mel plus `mean((pred_log_dur − ln(dur + 1e-8))²)`.
pub fn acoustic_loss(
    tape: &mut Tape,
    pred_mel: Var,
    target_mel: &Tensor,
    pred_log_dur: Var,
    target_dur: &[usize],
) -> Result<AcousticLoss> {
    if tape.shape(pred_mel) != target_mel.shape() {
        return Err(Error::Contract(format!(
            "mel shapes differ: {:?} vs {:?}",
            tape.shape(pred_mel),
            target_mel.shape()
        )));
    }
    if tape.value(pred_log_dur).numel() != target_dur.len() {
        return Err(Error::Contract(format!(
            "{} predicted durations vs {} targets",
            tape.value(pred_log_dur).numel(),
            target_dur.len()
        )));
    }
    let target = tape.constant(target_mel.clone());
    let diff = tape.sub(pred_mel, target)?;
    let abs = tape.abs(diff);
    let mel_l1 = tape.mean(abs);
    let log_target = Tensor::new(
        tape.shape(pred_log_dur).to_vec(),
        target_dur
            .iter()
            .map(|&d| (d as f64 + LOG_DURATION_OFFSET).ln())
            .collect(),
    )?;
    let lt = tape.constant(log_target);
    let ddiff = tape.sub(pred_log_dur, lt)?;
    let dsq = tape.square(ddiff);
    let duration_mse = tape.mean(dsq);
    let total = tape.add(mel_l1, duration_mse)?;
    Ok(AcousticLoss {
        total,
        mel_l1,
        duration_mse,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adversarial: f64,
    pub feature_match: f64,
    pub singer: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 1.0,
            feature_match: 1.0,
            singer: 0.5,
        }
    }
}

/// Loss terms entering the generator objective; absent terms count as zero.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub acoustic: Var,
    pub adversarial: Option<Var>,
    pub feature_match: Option<Var>,
    pub singer: Option<Var>,
}

/// `L_a + λ_adv·L_adv + λ_fm·L_f + λ_s·L_s`.
pub fn total_generator_loss(tape: &mut Tape, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let named = [
        ("acoustic", Some(parts.acoustic), 1.0),
        ("adversarial", parts.adversarial, w.adversarial),
        ("feature_match", parts.feature_match, w.feature_match),
        ("singer", parts.singer, w.singer),
    ];
    let mut terms = Vec::with_capacity(4);
    for (name, var, weight) in named {
        let Some(var) = var else { continue };
        let v = tape.scalar_value(var);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term `{name}` is {v}")));
        }
        terms.push(if weight == 1.0 { var } else { tape.scale(var, weight) });
    }
    tape.add_all(&terms)
}

/// Scalar form of [`total_generator_loss`].
pub fn combine_loss_values(acoustic: f64, adversarial: f64, feature_match: f64, singer: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("acoustic", acoustic),
        ("adversarial", adversarial),
        ("feature_match", feature_match),
        ("singer", singer),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term `{name}` is {v}")));
        }
    }
    Ok(acoustic + w.adversarial * adversarial + w.feature_match * feature_match + w.singer * singer)
}
