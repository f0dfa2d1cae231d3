//! Multi-band critics over mel-spectrograms.
//!
//! One detail discriminator per frequency sub-band sees the full-length band
//! slice; one segment discriminator sees a fixed-length time crop of the full
//! band. All share the same topology: three same-padded 2-d convolutions over
//! time × bins, LeakyReLU between them, and a one-channel score map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng::{stream, Purpose};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PREFIX: &str = "disc";
pub const CONV_LAYERS: usize = 3;

/// Half-open bin ranges partitioning the mel axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubBandSplit {
    pub edges: Vec<(usize, usize)>,
}

impl SubBandSplit {
    /// `bands` contiguous bands of (nearly) equal width; the last absorbs any
    /// remainder.
    pub fn even(bins: usize, bands: usize) -> Result<Self> {
        if bands == 0 || bands > bins {
            return Err(Error::Config(format!("cannot split {bins} bins into {bands} bands")));
        }
        let width = bins / bands;
        let edges = (0..bands)
            .map(|b| (b * width, if b + 1 == bands { bins } else { (b + 1) * width }))
            .collect();
        Ok(SubBandSplit { edges })
    }

    pub fn validate(&self, bins: usize) -> Result<()> {
        let mut next = 0;
        for &(lo, hi) in &self.edges {
            if lo != next || hi <= lo {
                return Err(Error::Config(format!(
                    "band edges {:?} do not partition {bins} bins",
                    self.edges
                )));
            }
            next = hi;
        }
        if next != bins || self.edges.is_empty() {
            return Err(Error::Config(format!(
                "band edges {:?} do not partition {bins} bins",
                self.edges
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Slices `mel [F × B]` along the bin axis in band order.
pub fn split_subbands(tape: &mut Tape, mel: Var, split: &SubBandSplit) -> Result<Vec<Var>> {
    let bins = tape.shape(mel)[1];
    split.validate(bins)?;
    split
        .edges
        .iter()
        .map(|&(lo, hi)| tape.slice_cols(mel, lo, hi))
        .collect()
}

/// Value-level band split.
pub fn split_subband_values(mel: &Tensor, split: &SubBandSplit) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let m = tape.constant(mel.clone());
    let parts = split_subbands(&mut tape, m, split)?;
    Ok(parts.iter().map(|v| tape.value(*v).clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub bands: usize,
    pub channels: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub segment_frames: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            bands: 2,
            channels: 8,
            kernel: 3,
            leaky_slope: 0.2,
            segment_frames: 32,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self, mel_bins: usize) -> Result<()> {
        if self.channels == 0 || self.segment_frames == 0 {
            return Err(Error::Config("discriminator sizes must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("discriminator kernel must be odd".into()));
        }
        let split = SubBandSplit::even(mel_bins, self.bands)?;
        if split.edges.iter().any(|(lo, hi)| hi - lo < self.kernel) {
            return Err(Error::Config(format!(
                "bands narrower than the {}-bin kernel",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Names of the critics in evaluation order: detail bands, then segment.
    pub fn critic_prefixes(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.bands).map(|b| format!("{PREFIX}.detail.{b}")).collect();
        names.push(format!("{PREFIX}.segment"));
        names
    }
}

fn init_critic(p: &mut ParamSet, prefix: &str, cfg: &DiscriminatorConfig, rng: &mut crate::rng::StreamRng) {
    let k = cfg.kernel;
    let chans = [(1, cfg.channels), (cfg.channels, cfg.channels), (cfg.channels, 1)];
    for (i, (c_in, c_out)) in chans.into_iter().enumerate() {
        let std = 1.0 / ((c_in * k * k) as f64).sqrt();
        p.randn(&format!("{prefix}.conv.{i}.w"), &[c_out, c_in, k, k], std, rng);
        p.zeros(&format!("{prefix}.conv.{i}.b"), &[c_out]);
    }
}

pub fn init_discriminators(cfg: &DiscriminatorConfig, seed: u64) -> ParamSet {
    let mut rng = stream(seed, Purpose::Init, 3);
    let mut p = ParamSet::new();
    for name in cfg.critic_prefixes() {
        init_critic(&mut p, &name, cfg, &mut rng);
    }
    p
}

#[derive(Clone, Debug)]
pub struct CriticOutput {
    /// `[F' × B']`
    pub score_map: Var,
    /// One activation per conv layer, the last being the score map itself.
    pub feature_maps: Vec<Var>,
}

/// One critic on `x [F' × B']`.
pub fn disc_forward(tape: &mut Tape, x: Var, p: &Bound, prefix: &str, leaky_slope: f64) -> Result<CriticOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::Contract(format!("critic input must be 2-d, got {shape:?}")));
    }
    let (f, b) = (shape[0], shape[1]);
    let mut h = tape.reshape(x, &[1, f, b])?;
    let mut feature_maps = Vec::with_capacity(CONV_LAYERS);
    for i in 0..CONV_LAYERS {
        let c = tape.conv2d(h, p.get(&format!("{prefix}.conv.{i}.w"))?)?;
        let biased = tape.add_channel_bias(c, p.get(&format!("{prefix}.conv.{i}.b"))?)?;
        h = if i + 1 < CONV_LAYERS {
            tape.leaky_relu(biased, leaky_slope)
        } else {
            biased
        };
        feature_maps.push(h);
    }
    let score_map = tape.reshape(h, &[f, b])?;
    Ok(CriticOutput {
        score_map,
        feature_maps,
    })
}

/// Runs every critic on `mel [F × B]`. The segment critic sees frames
/// `crop_start .. crop_start + min(segment_frames, F)`.
pub fn discriminate(
    tape: &mut Tape,
    mel: Var,
    p: &Bound,
    cfg: &DiscriminatorConfig,
    crop_start: usize,
) -> Result<Vec<CriticOutput>> {
    let (frames, bins) = (tape.shape(mel)[0], tape.shape(mel)[1]);
    let split = SubBandSplit::even(bins, cfg.bands)?;
    let bands = split_subbands(tape, mel, &split)?;
    let mut outputs = Vec::with_capacity(bands.len() + 1);
    for (b, band) in bands.into_iter().enumerate() {
        outputs.push(disc_forward(tape, band, p, &format!("{PREFIX}.detail.{b}"), cfg.leaky_slope)?);
    }
    let len = cfg.segment_frames.min(frames);
    if crop_start + len > frames {
        return Err(Error::Contract(format!(
            "segment crop {crop_start}+{len} exceeds {frames} frames"
        )));
    }
    let seg = if len == frames { mel } else { tape.slice_rows(mel, crop_start, crop_start + len)? };
    outputs.push(disc_forward(tape, seg, p, &format!("{PREFIX}.segment"), cfg.leaky_slope)?);
    Ok(outputs)
}

/// Largest valid segment crop start for `frames` frames.
pub fn max_crop_start(frames: usize, cfg: &DiscriminatorConfig) -> usize {
    frames - cfg.segment_frames.min(frames)
}
