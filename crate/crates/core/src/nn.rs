//! Layer building blocks shared by the networks.

use crate::error::Result;
use crate::params::Bound;
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;

/// `x · w + b` over rows of a `[T × in]` input.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Same-padded 1-d convolution of a time-major `[T × c_in]` sequence plus bias.
pub fn conv_seq(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.conv1d_time_major(x, w, Padding::Same)?;
    tape.add_row(y, b)
}

/// Layer norm followed by a learned per-channel gain and bias.
pub fn affine_layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var, epsilon: f64) -> Result<Var> {
    let n = tape.layer_norm(x, epsilon);
    let s = tape.mul_row(n, gain)?;
    tape.add_row(s, bias)
}

/// Multi-head scaled dot-product self-attention without masking.
pub fn self_attention(tape: &mut Tape, x: Var, p: &Bound, prefix: &str, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    let dh = d / heads;
    let q = tape.matmul(x, p.get(&format!("{prefix}.wq"))?)?;
    let k = tape.matmul(x, p.get(&format!("{prefix}.wk"))?)?;
    let v = tape.matmul(x, p.get(&format!("{prefix}.wv"))?)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, lo, hi)?, tape.slice_cols(k, lo, hi)?, tape.slice_cols(v, lo, hi)?)
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores);
        ctx.push(tape.matmul(attn, vh)?);
    }
    let joined = if heads == 1 { ctx[0] } else { tape.concat_cols(&ctx)? };
    tape.matmul(joined, p.get(&format!("{prefix}.wo"))?)
}

/// Fixed sinusoidal position table `[len × d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, d]);
    for t in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = t as f64 / rate;
            pe.set(&[t, i], if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}
