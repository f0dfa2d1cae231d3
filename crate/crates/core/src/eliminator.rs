//! Singer bias eliminator: a gradient reversal layer feeding a singer
//! classifier (three conv layers, average pooling over time, linear + softmax).
//!
//! Its parameters live under `eliminator.` and train with the generator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv_seq;
use crate::params::{Bound, ParamSet};
use crate::rng::{stream, Purpose};
use crate::tape::{Tape, Var};

pub const PREFIX: &str = "eliminator";
pub const CONV_LAYERS: usize = 3;

/// Probability floor before the log in the singer loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrlConfig {
    pub lambda: f64,
    /// Linear 0 → `lambda` ramp over `[start_step, end_step)`.
    pub ramp: Option<(u64, u64)>,
}

impl Default for GrlConfig {
    fn default() -> Self {
        GrlConfig {
            lambda: 1.0,
            ramp: None,
        }
    }
}

impl GrlConfig {
    /// The ramp used when enabled: 0 → λ over the first 1000 steps.
    pub const DEFAULT_RAMP: (u64, u64) = (0, 1000);

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("GRL lambda {} must be >= 0", self.lambda)));
        }
        if let Some((s, e)) = self.ramp {
            if s >= e {
                return Err(Error::Config(format!("GRL ramp start {s} must be < end {e}")));
            }
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        match self.ramp {
            None => self.lambda,
            Some((s, _)) if step < s => 0.0,
            Some((_, e)) if step >= e => self.lambda,
            Some((s, e)) => self.lambda * (step - s) as f64 / (e - s) as f64,
        }
    }
}

/// Classifier parameters (`d → d` convs with kernel `kernel`, then `d × S`).
pub fn init_eliminator(prefix: &str, hidden_dim: usize, singer_count: usize, kernel: usize, seed: u64) -> ParamSet {
    let mut rng = stream(seed, Purpose::Init, 2);
    let mut p = ParamSet::new();
    let d = hidden_dim;
    let std_conv = 1.0 / ((d * kernel) as f64).sqrt();
    for i in 0..CONV_LAYERS {
        p.randn(&format!("{prefix}.conv.{i}.w"), &[d, d, kernel], std_conv, &mut rng);
        p.zeros(&format!("{prefix}.conv.{i}.b"), &[d]);
    }
    p.randn(&format!("{prefix}.linear.w"), &[d, singer_count], 1.0 / (d as f64).sqrt(), &mut rng);
    p
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    /// `[1 × d]` pooled singer embedding.
    pub embedding: Var,
    /// `[1 × S]`
    pub logits: Var,
    /// `[1 × S]`
    pub probabilities: Var,
}

/// Singer classifier on encoder output; `lambda = None` omits the reversal
/// layer (used for probing).
pub fn classify_singer(
    tape: &mut Tape,
    encoder_out: Var,
    p: &Bound,
    prefix: &str,
    lambda: Option<f64>,
) -> Result<ClassifierOutput> {
    if tape.shape(encoder_out).len() != 2 {
        return Err(Error::Contract("encoder output must be [T × d]".into()));
    }
    let mut x = match lambda {
        Some(l) => tape.grl(encoder_out, l),
        None => encoder_out,
    };
    for i in 0..CONV_LAYERS {
        let c = conv_seq(
            tape,
            x,
            p.get(&format!("{prefix}.conv.{i}.w"))?,
            p.get(&format!("{prefix}.conv.{i}.b"))?,
        )?;
        x = tape.relu(c);
    }
    let embedding = tape.mean_rows(x);
    let logits = tape.matmul(embedding, p.get(&format!("{prefix}.linear.w"))?)?;
    let probabilities = tape.softmax(logits);
    Ok(ClassifierOutput {
        embedding,
        logits,
        probabilities,
    })
}

/// `−ln max(P[true], 1e-12)` for 0-based `true_singer`; the flag reports
/// whether clamping happened.
pub fn singer_loss(tape: &mut Tape, probabilities: Var, true_singer: usize) -> Result<(Var, bool)> {
    let s = tape.value(probabilities).numel();
    if true_singer >= s {
        return Err(Error::Contract(format!(
            "true singer {true_singer} out of range for {s} singers"
        )));
    }
    let p = tape.pick(probabilities, true_singer)?;
    let clamped = tape.scalar_value(p) <= PROB_FLOOR;
    let log = tape.log_clamped(p, PROB_FLOOR);
    Ok((tape.scale(log, -1.0), clamped))
}

/// Batch form: mean of the per-sample losses.
pub fn batch_singer_loss(tape: &mut Tape, samples: &[(Var, usize)]) -> Result<(Var, usize)> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut losses = Vec::with_capacity(samples.len());
    let mut clamped = 0;
    for &(probs, target) in samples {
        let (l, c) = singer_loss(tape, probs, target)?;
        clamped += usize::from(c);
        losses.push(l);
    }
    let total = tape.add_all(&losses)?;
    Ok((tape.scale(total, 1.0 / samples.len() as f64), clamped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn ramp_schedule() {
        let g = GrlConfig {
            lambda: 1.0,
            ramp: Some(GrlConfig::DEFAULT_RAMP),
        };
        assert_eq!(g.lambda_at(0), 0.0);
        assert_eq!(g.lambda_at(500), 0.5);
        assert_eq!(g.lambda_at(1000), 1.0);
        assert_eq!(GrlConfig::default().lambda_at(0), 1.0);
        assert!(GrlConfig { lambda: -1.0, ramp: None }.validate().is_err());
        assert!(GrlConfig { lambda: 1.0, ramp: Some((5, 5)) }.validate().is_err());
    }

    #[test]
    fn loss_values() {
        let mut t = Tape::new();
        let perfect = t.constant(Tensor::vector(vec![0.0, 1.0, 0.0]).unwrap());
        let (l, clamped) = singer_loss(&mut t, perfect, 1).unwrap();
        assert_eq!(t.scalar_value(l), 0.0);
        assert!(!clamped);
        let (l, clamped) = singer_loss(&mut t, perfect, 0).unwrap();
        assert!(clamped);
        assert!((t.scalar_value(l) - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(singer_loss(&mut t, perfect, 3).is_err());
    }
}
