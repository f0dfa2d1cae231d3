//! Acoustic generator: score embeddings → ConvFFT encoder (language CLN in the
//! first block) → singer injection → duration prediction and length
//! regulation → ConvFFT decoder → mel projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{shipped_lexicon, SequenceTriple};
use crate::nn::{affine_layer_norm, conv_seq, linear, positional_encoding, self_attention};
use crate::params::{Bound, ParamSet};
use crate::rng::{stream, Purpose};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Lower edges of the note-duration buckets; the last bucket is open-ended.
pub const DURATION_BUCKETS: [usize; 12] = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64];

pub fn duration_bucket(frames: usize) -> usize {
    DURATION_BUCKETS
        .iter()
        .rposition(|&edge| frames >= edge)
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub hidden_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub parallel_conv_branches: usize,
    pub mel_bins: usize,
    pub phoneme_vocab: usize,
    pub pitch_vocab: usize,
    pub duration_bucket_vocab: usize,
    pub language_count: usize,
    pub singer_count: usize,
    pub epsilon: f64,
    /// Condition the first encoder block on the language embedding.
    pub use_cln: bool,
    /// Upper bound on one phoneme's predicted frame count at inference.
    pub max_phoneme_frames: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            hidden_dim: 64,
            encoder_blocks: 2,
            decoder_blocks: 2,
            attention_heads: 2,
            ffn_dim: 256,
            conv_kernel: 3,
            parallel_conv_branches: 2,
            mel_bins: 16,
            phoneme_vocab: shipped_lexicon().vocab_size(),
            pitch_vocab: 128,
            duration_bucket_vocab: DURATION_BUCKETS.len(),
            language_count: 3,
            singer_count: 3,
            epsilon: 1e-5,
            use_cln: true,
            max_phoneme_frames: 512,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hidden_dim", self.hidden_dim),
            ("encoder_blocks", self.encoder_blocks),
            ("attention_heads", self.attention_heads),
            ("ffn_dim", self.ffn_dim),
            ("conv_kernel", self.conv_kernel),
            ("mel_bins", self.mel_bins),
            ("phoneme_vocab", self.phoneme_vocab),
            ("pitch_vocab", self.pitch_vocab),
            ("duration_bucket_vocab", self.duration_bucket_vocab),
            ("language_count", self.language_count),
            ("singer_count", self.singer_count),
            ("max_phoneme_frames", self.max_phoneme_frames),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if self.duration_bucket_vocab < DURATION_BUCKETS.len() {
            return Err(Error::Config(format!(
                "duration_bucket_vocab must be >= {}",
                DURATION_BUCKETS.len()
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

fn init_block(p: &mut ParamSet, prefix: &str, cfg: &GeneratorConfig, rng: &mut crate::rng::StreamRng) {
    let d = cfg.hidden_dim;
    let std_d = 1.0 / (d as f64).sqrt();
    for w in ["wq", "wk", "wv", "wo"] {
        p.randn(&format!("{prefix}.attn.{w}"), &[d, d], std_d, rng);
    }
    let std_conv = 1.0 / ((d * cfg.conv_kernel) as f64).sqrt();
    for b in 0..cfg.parallel_conv_branches {
        p.randn(&format!("{prefix}.conv.{b}.w"), &[d, d, cfg.conv_kernel], std_conv, rng);
        p.zeros(&format!("{prefix}.conv.{b}.b"), &[d]);
    }
    for ln in ["ln1", "ln2"] {
        p.ones(&format!("{prefix}.{ln}.gain"), &[d]);
        p.zeros(&format!("{prefix}.{ln}.bias"), &[d]);
    }
    p.randn(&format!("{prefix}.ffn.w1"), &[d, cfg.ffn_dim], std_d, rng);
    p.zeros(&format!("{prefix}.ffn.b1"), &[cfg.ffn_dim]);
    p.randn(&format!("{prefix}.ffn.w2"), &[cfg.ffn_dim, d], 1.0 / (cfg.ffn_dim as f64).sqrt(), rng);
    p.zeros(&format!("{prefix}.ffn.b2"), &[d]);
}

/// Minimum-norm `W` (d×d) with `Wᵀ e_l = 1⃗` for every language row `e_l` of
/// `embeddings`, so conditional normalization starts out as plain
/// normalization for all languages.
fn unit_scale_projection(embeddings: &Tensor) -> Result<Tensor> {
    let (l, d) = (embeddings.shape()[0], embeddings.shape()[1]);
    let gram = embeddings.matmul(&embeddings.transpose()?)?;
    let inv = invert_small(&gram)?;
    // W = Eᵀ (E Eᵀ)⁻¹ 1_{l×d}
    let ones = Tensor::full(&[l, d], 1.0);
    embeddings.transpose()?.matmul(&inv.matmul(&ones)?)
}

fn invert_small(m: &Tensor) -> Result<Tensor> {
    let n = m.shape()[0];
    let mut a = m.clone();
    let mut inv = Tensor::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a.get(&[i, col]).abs().total_cmp(&a.get(&[j, col]).abs()))
            .unwrap();
        if a.get(&[pivot, col]).abs() < 1e-12 {
            return Err(Error::Numeric("singular language-embedding Gram matrix".into()));
        }
        for c in 0..n {
            let (x, y) = (a.get(&[col, c]), a.get(&[pivot, c]));
            a.set(&[col, c], y);
            a.set(&[pivot, c], x);
            let (x, y) = (inv.get(&[col, c]), inv.get(&[pivot, c]));
            inv.set(&[col, c], y);
            inv.set(&[pivot, c], x);
        }
        let p = a.get(&[col, col]);
        for c in 0..n {
            a.set(&[col, c], a.get(&[col, c]) / p);
            inv.set(&[col, c], inv.get(&[col, c]) / p);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a.get(&[r, col]);
            for c in 0..n {
                a.set(&[r, c], a.get(&[r, c]) - f * a.get(&[col, c]));
                inv.set(&[r, c], inv.get(&[r, c]) - f * inv.get(&[col, c]));
            }
        }
    }
    Ok(inv)
}

/// Freshly initialized generator parameters under the `gen.` prefix.
pub fn init_generator(cfg: &GeneratorConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = stream(seed, Purpose::Init, 0);
    let mut p = ParamSet::new();
    let d = cfg.hidden_dim;
    let emb_std = 0.5;
    p.randn("gen.emb.phoneme", &[cfg.phoneme_vocab, d], emb_std, &mut rng);
    p.randn("gen.emb.pitch", &[cfg.pitch_vocab, d], emb_std, &mut rng);
    p.randn("gen.emb.duration", &[cfg.duration_bucket_vocab, d], emb_std, &mut rng);
    p.randn("gen.emb.language", &[cfg.language_count, d], 1.0, &mut rng);
    p.randn("gen.emb.singer", &[cfg.singer_count, d], emb_std, &mut rng);
    for i in 0..cfg.encoder_blocks {
        init_block(&mut p, &format!("gen.enc.{i}"), cfg, &mut rng);
    }
    for i in 0..cfg.decoder_blocks {
        init_block(&mut p, &format!("gen.dec.{i}"), cfg, &mut rng);
    }
    let lang = p.require("gen.emb.language")?.clone();
    let w_alpha = if cfg.language_count <= d {
        unit_scale_projection(&lang)?
    } else {
        crate::rng::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng)
    };
    p.insert("gen.cln.w_alpha", w_alpha);
    p.zeros("gen.cln.w_beta", &[d, d]);
    let std_conv = 1.0 / ((d * cfg.conv_kernel) as f64).sqrt();
    for c in ["conv1", "conv2"] {
        p.randn(&format!("gen.dur.{c}.w"), &[d, d, cfg.conv_kernel], std_conv, &mut rng);
        p.zeros(&format!("gen.dur.{c}.b"), &[d]);
    }
    p.randn("gen.dur.out.w", &[d, 1], 1.0 / (d as f64).sqrt(), &mut rng);
    p.zeros("gen.dur.out.b", &[1]);
    p.randn("gen.mel.w", &[d, cfg.mel_bins], 1.0 / (d as f64).sqrt(), &mut rng);
    p.zeros("gen.mel.b", &[cfg.mel_bins]);
    Ok(p)
}

/// Sum of phoneme, pitch and duration-bucket embeddings plus positions.
pub fn embed_inputs(tape: &mut Tape, p: &Bound, seq: &SequenceTriple) -> Result<Var> {
    seq.validate()?;
    let buckets: Vec<usize> = seq.note_durations.iter().map(|&d| duration_bucket(d)).collect();
    let ph = tape.gather_rows(p.get("gen.emb.phoneme")?, &seq.phoneme_ids, "phoneme")?;
    let pi = tape.gather_rows(p.get("gen.emb.pitch")?, &seq.note_pitches, "pitch")?;
    let du = tape.gather_rows(p.get("gen.emb.duration")?, &buckets, "duration")?;
    let d = tape.shape(ph)[1];
    let pe = tape.constant(positional_encoding(seq.len(), d));
    tape.add_all(&[ph, pi, du, pe])
}

/// Language-conditional layer normalization: `α ⊙ (x − μ)/σ + β` with
/// `α = W_αᵀ e_l` and `β = W_βᵀ e_l`, normalized per row.
pub fn cln(tape: &mut Tape, x: Var, e_l: Var, w_alpha: Var, w_beta: Var, epsilon: f64) -> Result<Var> {
    let d = tape.shape(x)[1];
    let e_row = if tape.shape(e_l).len() == 2 {
        e_l
    } else {
        tape.reshape(e_l, &[1, d])?
    };
    let alpha = tape.matmul(e_row, w_alpha)?;
    let beta = tape.matmul(e_row, w_beta)?;
    let normed = tape.layer_norm(x, epsilon);
    let scaled = tape.mul_row(normed, alpha)?;
    tape.add_row(scaled, beta)
}

/// Language condition for the last normalization of a block.
#[derive(Clone, Copy, Debug)]
pub struct LanguageCondition {
    pub embedding: Var,
    pub w_alpha: Var,
    pub w_beta: Var,
}

/// One ConvFFT block:
/// `y1 = LN(x + MHA(x) + Σ convs(x))`, `y = NORM(y1 + FFN(y1))`, where NORM is
/// the conditional norm when `condition` is given.
pub fn conv_fft_block(
    tape: &mut Tape,
    x: Var,
    p: &Bound,
    prefix: &str,
    cfg: &GeneratorConfig,
    condition: Option<LanguageCondition>,
) -> Result<Var> {
    let attn = self_attention(tape, x, p, &format!("{prefix}.attn"), cfg.attention_heads)?;
    let mut terms = vec![x, attn];
    for b in 0..cfg.parallel_conv_branches {
        let c = conv_seq(
            tape,
            x,
            p.get(&format!("{prefix}.conv.{b}.w"))?,
            p.get(&format!("{prefix}.conv.{b}.b"))?,
        )?;
        terms.push(tape.relu(c));
    }
    let summed = tape.add_all(&terms)?;
    let y1 = affine_layer_norm(
        tape,
        summed,
        p.get(&format!("{prefix}.ln1.gain"))?,
        p.get(&format!("{prefix}.ln1.bias"))?,
        cfg.epsilon,
    )?;
    let h = linear(tape, y1, p.get(&format!("{prefix}.ffn.w1"))?, Some(p.get(&format!("{prefix}.ffn.b1"))?))?;
    let h = tape.relu(h);
    let f = linear(tape, h, p.get(&format!("{prefix}.ffn.w2"))?, Some(p.get(&format!("{prefix}.ffn.b2"))?))?;
    let z = tape.add(y1, f)?;
    match condition {
        Some(c) => cln(tape, z, c.embedding, c.w_alpha, c.w_beta, cfg.epsilon),
        None => affine_layer_norm(
            tape,
            z,
            p.get(&format!("{prefix}.ln2.gain"))?,
            p.get(&format!("{prefix}.ln2.bias"))?,
            cfg.epsilon,
        ),
    }
}

/// Repeats row `t` of `x` `durations[t]` times.
pub fn length_regulate(tape: &mut Tape, x: Var, durations: &[usize]) -> Result<Var> {
    tape.repeat_rows(x, durations)
}

/// Log-frame durations `[T]` from two conv layers and a linear head.
pub fn predict_durations(tape: &mut Tape, h: Var, p: &Bound) -> Result<Var> {
    let c1 = conv_seq(tape, h, p.get("gen.dur.conv1.w")?, p.get("gen.dur.conv1.b")?)?;
    let c1 = tape.relu(c1);
    let c2 = conv_seq(tape, c1, p.get("gen.dur.conv2.w")?, p.get("gen.dur.conv2.b")?)?;
    let c2 = tape.relu(c2);
    let out = linear(tape, c2, p.get("gen.dur.out.w")?, Some(p.get("gen.dur.out.b")?))?;
    let t = tape.shape(out)[0];
    tape.reshape(out, &[t])
}

/// Frames for one phoneme from a predicted log duration.
pub fn frames_from_log_duration(log_frames: f64, max_frames: usize) -> usize {
    let frames = log_frames.exp().round();
    if frames.is_nan() || frames < 1.0 {
        1
    } else {
        (frames as usize).clamp(1, max_frames)
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// `[F × mel_bins]`
    pub mel: Var,
    /// `[T × d]`, before singer injection.
    pub encoder_out: Var,
    /// `[T]` predicted log frames.
    pub log_durations: Var,
    /// Durations used for length regulation; they sum to F.
    pub frame_durations: Vec<usize>,
}

/// Encoder stack only; `encoder_out` does not depend on the singer.
pub fn encode(
    tape: &mut Tape,
    p: &Bound,
    cfg: &GeneratorConfig,
    seq: &SequenceTriple,
    language_id: usize,
) -> Result<Var> {
    if language_id >= cfg.language_count {
        return Err(Error::Lookup {
            table: "language".into(),
            id: language_id,
            size: cfg.language_count,
        });
    }
    let mut x = embed_inputs(tape, p, seq)?;
    for i in 0..cfg.encoder_blocks {
        let condition = if i == 0 && cfg.use_cln {
            Some(LanguageCondition {
                embedding: tape.gather_rows(p.get("gen.emb.language")?, &[language_id], "language")?,
                w_alpha: p.get("gen.cln.w_alpha")?,
                w_beta: p.get("gen.cln.w_beta")?,
            })
        } else {
            None
        };
        x = conv_fft_block(tape, x, p, &format!("gen.enc.{i}"), cfg, condition)?;
    }
    Ok(x)
}

/// Full generator pass. With `durations` given (training) they drive length
/// regulation; otherwise the rounded predictions do.
pub fn generator_forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &GeneratorConfig,
    seq: &SequenceTriple,
    language_id: usize,
    singer_id: usize,
    durations: Option<&[usize]>,
) -> Result<GeneratorOutput> {
    let encoder_out = encode(tape, p, cfg, seq, language_id)?;
    let singer = tape.gather_rows(p.get("gen.emb.singer")?, &[singer_id], "singer")?;
    let h = tape.add_row(encoder_out, singer)?;
    let log_durations = predict_durations(tape, h, p)?;
    let frame_durations = match durations {
        Some(d) => {
            if d.len() != seq.len() {
                return Err(Error::Contract(format!(
                    "{} durations for {} phonemes",
                    d.len(),
                    seq.len()
                )));
            }
            d.to_vec()
        }
        None => tape
            .value(log_durations)
            .data()
            .iter()
            .map(|&v| frames_from_log_duration(v, cfg.max_phoneme_frames))
            .collect(),
    };
    let frames = length_regulate(tape, h, &frame_durations)?;
    let total: usize = frame_durations.iter().sum();
    let pe = tape.constant(positional_encoding(total, cfg.hidden_dim));
    let mut y = tape.add(frames, pe)?;
    for i in 0..cfg.decoder_blocks {
        y = conv_fft_block(tape, y, p, &format!("gen.dec.{i}"), cfg, None)?;
    }
    let mel = linear(tape, y, p.get("gen.mel.w")?, Some(p.get("gen.mel.b")?))?;
    Ok(GeneratorOutput {
        mel,
        encoder_out,
        log_durations,
        frame_durations,
    })
}

/// Training-mode entry point: durations are mandatory.
pub fn generator_forward_train(
    tape: &mut Tape,
    p: &Bound,
    cfg: &GeneratorConfig,
    seq: &SequenceTriple,
    language_id: usize,
    singer_id: usize,
    durations: Option<&[usize]>,
) -> Result<GeneratorOutput> {
    let durations = durations
        .ok_or_else(|| Error::Contract("training mode requires ground-truth durations".into()))?;
    generator_forward(tape, p, cfg, seq, language_id, singer_id, Some(durations))
}
