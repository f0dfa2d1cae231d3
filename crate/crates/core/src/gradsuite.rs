//! Finite-difference checks of every differentiable model operation on
//! seeded random inputs.

use serde::Serialize;

use crate::discriminator::{discriminate, init_discriminators, DiscriminatorConfig};
use crate::eliminator::{classify_singer, init_eliminator};
use crate::error::Result;
use crate::frontend::{shipped_lexicon, SequenceTriple};
use crate::generator::{cln, conv_fft_block, generator_forward, init_generator, predict_durations, GeneratorConfig, LanguageCondition};
use crate::gradcheck::grad_check;
use crate::losses::{acoustic_loss, feature_match_loss, lsgan_d_loss, lsgan_g_loss};
use crate::params::{Bound, ParamSet};
use crate::rng::{randn, stream, uniform, Purpose};
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub module: &'static str,
    pub op: &'static str,
    /// Worst relative error over every checked input of the op.
    pub max_rel_error: f64,
    pub checked_inputs: usize,
}

pub const MODULES: [&str; 5] = ["tensor", "generator", "eliminator", "discriminators", "losses"];

fn rand(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, 1.0, &mut stream(seed, Purpose::Test, 0))
}

/// `Σ w ⊙ y` with fixed uniform weights in `[-1, 1)`.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let mut rng = stream(seed, Purpose::Test, 1);
    let mut w = Tensor::zeros(&shape);
    for v in w.data_mut() {
        *v = 2.0 * uniform(&mut rng) - 1.0;
    }
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Toy dimensions used for the network-level checks.
pub fn toy_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        hidden_dim: 8,
        attention_heads: 2,
        ffn_dim: 16,
        mel_bins: 8,
        phoneme_vocab: shipped_lexicon().vocab_size(),
        ..GeneratorConfig::default()
    }
}

/// A 4-phoneme sequence ("ka ma" in Japanese) with durations summing to 11.
pub fn toy_sequence() -> SequenceTriple {
    let lex = shipped_lexicon();
    let id = |s: &str| lex.symbol_id(s).expect("shipped symbol");
    SequenceTriple {
        phoneme_ids: vec![id("k"), id("a"), id("m"), id("a")],
        note_durations: vec![2, 4, 1, 4],
        note_pitches: vec![60, 60, 64, 64],
        language_id: 1,
        source_events: vec![0, 0, 1, 1],
    }
}

/// Generic toy generator parameters: the conditional-norm matrices are
/// random instead of the identity-scale initialization.
pub fn toy_generator_params(cfg: &GeneratorConfig, seed: u64) -> Result<ParamSet> {
    let mut p = init_generator(cfg, seed)?;
    let d = cfg.hidden_dim;
    let mut rng = stream(seed, Purpose::Test, 2);
    p.insert("gen.cln.w_alpha", randn(&[d, d], 0.5, &mut rng));
    p.insert("gen.cln.w_beta", randn(&[d, d], 0.5, &mut rng));
    for (name, t) in p.iter_mut() {
        if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with(".bias") {
            *t = randn(t.shape(), 0.1, &mut rng);
        }
    }
    Ok(p)
}

/// Checks `f` with respect to every tensor in `params`, one at a time.
fn check_params<F>(params: &ParamSet, h: f64, f: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for (name, value) in params.iter() {
        let err = grad_check(
            |t, v| {
                let mut b = params.bind(t, false);
                b.set(name, v);
                f(t, &b)
            },
            value,
            h,
        )?;
        worst = worst.max(err);
    }
    Ok((worst, params.len()))
}

struct Suite {
    filter: Option<String>,
    h: f64,
    reports: Vec<GradCheckReport>,
}

impl Suite {
    fn wants(&self, module: &str, op: &str) -> bool {
        self.filter.as_deref().is_none_or(|f| f == module || f == op)
    }

    fn run(&mut self, module: &'static str, op: &'static str, body: impl FnOnce(f64) -> Result<(f64, usize)>) -> Result<()> {
        if self.wants(module, op) {
            let (max_rel_error, checked_inputs) = body(self.h)?;
            self.reports.push(GradCheckReport {
                module,
                op,
                max_rel_error,
                checked_inputs,
            });
        }
        Ok(())
    }
}

fn worst(errs: &[f64]) -> (f64, usize) {
    (errs.iter().copied().fold(0.0, f64::max), errs.len())
}

/// Runs the checks whose module or op name equals `filter` (all when
/// `None`) at step `h`.
pub fn gradient_suite(filter: Option<&str>, h: f64) -> Result<Vec<GradCheckReport>> {
    let mut s = Suite {
        filter: filter.map(str::to_string),
        h,
        reports: Vec::new(),
    };

    s.run("tensor", "matmul", |h| {
        let (a, b) = (rand(&[3, 4], 1), rand(&[4, 5], 2));
        let wrt_a = grad_check(
            |t, x| {
                let bb = t.constant(b.clone());
                let y = t.matmul(x, bb)?;
                project(t, y, 10)
            },
            &a,
            h,
        )?;
        let wrt_b = grad_check(
            |t, x| {
                let aa = t.constant(a.clone());
                let y = t.matmul(aa, x)?;
                project(t, y, 10)
            },
            &b,
            h,
        )?;
        Ok(worst(&[wrt_a, wrt_b]))
    })?;

    s.run("tensor", "conv1d", |h| {
        let (x, w) = (rand(&[3, 7], 3), rand(&[4, 3, 3], 4));
        let mut errs = Vec::new();
        for padding in [Padding::Same, Padding::Valid] {
            errs.push(grad_check(
                |t, v| {
                    let k = t.constant(w.clone());
                    let y = t.conv1d(v, k, padding)?;
                    project(t, y, 11)
                },
                &x,
                h,
            )?);
            errs.push(grad_check(
                |t, v| {
                    let xx = t.constant(x.clone());
                    let y = t.conv1d(xx, v, padding)?;
                    project(t, y, 11)
                },
                &w,
                h,
            )?);
        }
        Ok(worst(&errs))
    })?;

    s.run("tensor", "conv2d", |h| {
        let (x, w) = (rand(&[2, 5, 6], 5), rand(&[3, 2, 3, 3], 6));
        let wrt_x = grad_check(
            |t, v| {
                let k = t.constant(w.clone());
                let y = t.conv2d(v, k)?;
                project(t, y, 12)
            },
            &x,
            h,
        )?;
        let wrt_w = grad_check(
            |t, v| {
                let xx = t.constant(x.clone());
                let y = t.conv2d(xx, v)?;
                project(t, y, 12)
            },
            &w,
            h,
        )?;
        Ok(worst(&[wrt_x, wrt_w]))
    })?;

    s.run("tensor", "layer_norm", |h| {
        let x = rand(&[4, 6], 7);
        let e = grad_check(
            |t, v| {
                let y = t.layer_norm(v, 1e-5);
                project(t, y, 13)
            },
            &x,
            h,
        )?;
        Ok(worst(&[e]))
    })?;

    s.run("tensor", "softmax", |h| {
        let x = rand(&[3, 5], 8);
        let e = grad_check(
            |t, v| {
                let y = t.softmax(v);
                project(t, y, 14)
            },
            &x,
            h,
        )?;
        Ok(worst(&[e]))
    })?;

    let cfg = toy_generator_config();
    let gen = toy_generator_params(&cfg, 21)?;

    s.run("generator", "cln", |h| {
        let d = cfg.hidden_dim;
        let inputs = [rand(&[5, d], 30), rand(&[d], 31), rand(&[d, d], 32), rand(&[d, d], 33)];
        let mut errs = Vec::new();
        for which in 0..inputs.len() {
            errs.push(grad_check(
                |t, v| {
                    let vars: Vec<Var> = (0..inputs.len())
                        .map(|i| if i == which { v } else { t.constant(inputs[i].clone()) })
                        .collect();
                    let y = cln(t, vars[0], vars[1], vars[2], vars[3], 1e-5)?;
                    project(t, y, 15)
                },
                &inputs[which],
                h,
            )?);
        }
        Ok(worst(&errs))
    })?;

    s.run("generator", "conv_fft_block", |h| {
        let x = rand(&[6, cfg.hidden_dim], 34);
        let block = |t: &mut Tape, b: &Bound, x: Var| -> Result<Var> {
            let e = t.gather_rows(b.get("gen.emb.language")?, &[2], "language")?;
            let cond = LanguageCondition {
                embedding: e,
                w_alpha: b.get("gen.cln.w_alpha")?,
                w_beta: b.get("gen.cln.w_beta")?,
            };
            let y = conv_fft_block(t, x, b, "gen.enc.0", &cfg, Some(cond))?;
            project(t, y, 16)
        };
        let wrt_x = grad_check(
            |t, v| {
                let b = gen.bind(t, false);
                block(t, &b, v)
            },
            &x,
            h,
        )?;
        let mut used = gen.with_prefix("gen.enc.0.");
        used.extend(gen.with_prefix("gen.cln."));
        used.insert("gen.emb.language", gen.require("gen.emb.language")?.clone());
        let (wrt_p, n) = check_params(&used, h, |t, b| {
            let mut full = gen.bind(t, false);
            full.merge(b.clone());
            let xx = t.constant(x.clone());
            block(t, &full, xx)
        })?;
        Ok((wrt_x.max(wrt_p), n + 1))
    })?;

    s.run("generator", "duration_predictor", |h| {
        let x = rand(&[6, cfg.hidden_dim], 35);
        let wrt_x = grad_check(
            |t, v| {
                let b = gen.bind(t, false);
                let y = predict_durations(t, v, &b)?;
                project(t, y, 17)
            },
            &x,
            h,
        )?;
        let (wrt_p, n) = check_params(&gen.with_prefix("gen.dur."), h, |t, b| {
            let xx = t.constant(x.clone());
            let y = predict_durations(t, xx, b)?;
            project(t, y, 17)
        })?;
        Ok((wrt_x.max(wrt_p), n + 1))
    })?;

    s.run("generator", "generator", |h| {
        let seq = toy_sequence();
        let durations = seq.note_durations.clone();
        check_params(&gen, h, |t, b| {
            let out = generator_forward(t, b, &cfg, &seq, seq.language_id, 2, Some(&durations))?;
            let m = project(t, out.mel, 18)?;
            let d = project(t, out.log_durations, 19)?;
            t.add(m, d)
        })
    })?;

    s.run("eliminator", "classifier", |h| {
        let d = cfg.hidden_dim;
        let params = init_eliminator("eliminator", d, 3, 3, 40);
        let x = rand(&[6, d], 41);
        let wrt_x = grad_check(
            |t, v| {
                let b = params.bind(t, false);
                let out = classify_singer(t, v, &b, "eliminator", None)?;
                project(t, out.probabilities, 20)
            },
            &x,
            h,
        )?;
        let (wrt_p, n) = check_params(&params, h, |t, b| {
            let xx = t.constant(x.clone());
            let out = classify_singer(t, xx, b, "eliminator", None)?;
            project(t, out.probabilities, 20)
        })?;
        Ok((wrt_x.max(wrt_p), n + 1))
    })?;

    s.run("discriminators", "discriminators", |h| {
        let dcfg = DiscriminatorConfig {
            channels: 3,
            segment_frames: 6,
            ..DiscriminatorConfig::default()
        };
        let params = init_discriminators(&dcfg, 50);
        let mel = rand(&[9, 8], 51);
        let critics = |t: &mut Tape, b: &Bound, m: Var| -> Result<Var> {
            let outs = discriminate(t, m, b, &dcfg, 2)?;
            let mut terms = Vec::new();
            for (i, o) in outs.iter().enumerate() {
                for (j, &f) in o.feature_maps.iter().enumerate() {
                    terms.push(project(t, f, 100 + 10 * i as u64 + j as u64)?);
                }
            }
            t.add_all(&terms)
        };
        let wrt_mel = grad_check(
            |t, v| {
                let b = params.bind(t, false);
                critics(t, &b, v)
            },
            &mel,
            h,
        )?;
        let (wrt_p, n) = check_params(&params, h, |t, b| {
            let m = t.constant(mel.clone());
            critics(t, b, m)
        })?;
        Ok((wrt_mel.max(wrt_p), n + 1))
    })?;

    s.run("losses", "losses", |h| {
        let (real, fake) = (rand(&[4, 3], 60), rand(&[4, 3], 61));
        let (target, durs) = (rand(&[5, 3], 62), vec![2usize, 5, 1]);
        let d = grad_check(
            |t, v| {
                let r = t.constant(real.clone());
                lsgan_d_loss(t, &[r, v], &[v, r])
            },
            &fake,
            h,
        )?;
        let g = grad_check(|t, v| lsgan_g_loss(t, &[v]), &fake, h)?;
        let f = grad_check(|t, v| feature_match_loss(t, &[vec![real.clone()]], &[vec![v]]), &fake, h)?;
        let pred = rand(&[5, 3], 63);
        let a = grad_check(
            |t, v| {
                let ld = t.constant(Tensor::vector(vec![0.3, 1.2, -0.4])?);
                Ok(acoustic_loss(t, v, &target, ld, &durs)?.total)
            },
            &pred,
            h,
        )?;
        let ld = Tensor::vector(vec![0.3, 1.2, -0.4])?;
        let l = grad_check(
            |t, v| {
                let p = t.constant(pred.clone());
                Ok(acoustic_loss(t, p, &target, v, &durs)?.total)
            },
            &ld,
            h,
        )?;
        Ok(worst(&[d, g, f, a, l]))
    })?;

    if let Some(f) = filter {
        if s.reports.is_empty() {
            return Err(crate::error::Error::Validation(format!(
                "unknown gradcheck module or op `{f}` (modules: {})",
                MODULES.join(", ")
            )));
        }
    }
    Ok(s.reports)
}
