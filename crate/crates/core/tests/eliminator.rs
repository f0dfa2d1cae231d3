use proptest::prelude::*;
use xsng_core::eliminator::{batch_singer_loss, classify_singer, init_eliminator, singer_loss, GrlConfig};
use xsng_core::params::ParamSet;
use xsng_core::rng::{randn, stream, Purpose};
use xsng_core::{Tape, Tensor};

const P: &str = "eliminator";

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, 1.0, &mut stream(seed, Purpose::Test, 0))
}

fn probs_of(params: &ParamSet, x: &Tensor, lambda: Option<f64>) -> Vec<f64> {
    let mut t = Tape::new();
    let p = params.bind(&mut t, false);
    let v = t.constant(x.clone());
    let out = classify_singer(&mut t, v, &p, P, lambda).unwrap();
    t.value(out.probabilities).data().to_vec()
}

#[test]
fn grl_forward_is_identity_and_backward_flips() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.5, -2.0]).unwrap());
    let y = t.grl(x, 1.0);
    assert_eq!(t.value(y).data(), &[1.5, -2.0]);
    // loss = 1·y0 + 2·y1 gives upstream gradient [1, 2]
    let w = t.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let prod = t.mul(y, w).unwrap();
    let loss = t.sum(prod);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).data(), &[-1.0, -2.0]);
}

/// Gradient of `mean(h²) + 0.5·L_s` w.r.t. an upstream matrix `U`, where
/// `h = x·U` feeds the classifier with or without reversal.
fn upstream_grads(lambda: Option<f64>, with_singer: bool) -> Tensor {
    let d = 6;
    let params = init_eliminator(P, d, 3, 3, 11);
    let mut t = Tape::new();
    let p = params.bind(&mut t, false);
    let x = t.constant(rand_tensor(&[5, d], 1));
    let u = t.param(rand_tensor(&[d, d], 2));
    let h = t.matmul(x, u).unwrap();
    let sq = t.square(h);
    let recon = t.mean(sq);
    let loss = if with_singer {
        let out = classify_singer(&mut t, h, &p, P, lambda).unwrap();
        let (ls, _) = singer_loss(&mut t, out.probabilities, 2).unwrap();
        let weighted = t.scale(ls, 0.5);
        t.add(recon, weighted).unwrap()
    } else {
        recon
    };
    t.backward(loss).unwrap().get(u)
}

#[test]
fn grl_twin_graph_contribution_is_negated() {
    let base = upstream_grads(None, false);
    let plain = upstream_grads(None, true).zip_map(&base, |a, b| a - b);
    assert!(plain.max_abs() > 1e-3);
    for lambda in [0.0, 0.5, 1.0] {
        let reversed = upstream_grads(Some(lambda), true).zip_map(&base, |a, b| a - b);
        let want = plain.map(|v| -lambda * v);
        assert!(reversed.max_abs_diff(&want) < 1e-10, "lambda {lambda}");
    }
}

#[test]
fn grl_forward_is_bit_equal_for_classifier() {
    let params = init_eliminator(P, 8, 3, 3, 4);
    let x = rand_tensor(&[7, 8], 5);
    assert_eq!(probs_of(&params, &x, Some(0.7)), probs_of(&params, &x, None));
}

#[test]
fn zero_linear_gives_uniform() {
    let mut params = init_eliminator(P, 8, 4, 3, 1);
    params.insert(format!("{P}.linear.w"), Tensor::zeros(&[8, 4]));
    for &p in &probs_of(&params, &rand_tensor(&[5, 8], 2), Some(1.0)) {
        assert!((p - 0.25).abs() < 1e-15);
    }
}

#[test]
fn zero_convs_single_frame_gives_uniform() {
    let mut params = init_eliminator(P, 8, 3, 3, 1);
    for i in 0..3 {
        params.insert(format!("{P}.conv.{i}.w"), Tensor::zeros(&[8, 8, 3]));
    }
    let mut t = Tape::new();
    let p = params.bind(&mut t, false);
    let v = t.constant(rand_tensor(&[1, 8], 3));
    let out = classify_singer(&mut t, v, &p, P, Some(1.0)).unwrap();
    assert_eq!(t.value(out.embedding).max_abs(), 0.0);
    for &p in t.value(out.probabilities).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

/// Same-padded cross-correlation `y[t][o] = b[o] + Σ_i Σ_j w[o][i][j]·x[t+j−1][i]`.
fn naive_conv(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (time, d) = (x.len(), x[0].len());
    let k = w.shape()[2];
    let pad = (k - 1) / 2;
    let mut y = vec![vec![0.0; d]; time];
    for t in 0..time {
        for o in 0..d {
            let mut acc = b.data()[o];
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= time as isize {
                    continue;
                }
                for i in 0..d {
                    acc += w.get(&[o, i, j]) * x[src as usize][i];
                }
            }
            y[t][o] = acc;
        }
    }
    y
}

#[test]
fn classifier_matches_stage_oracle() {
    let (d, s, time) = (5, 3, 6);
    let mut params = init_eliminator(P, d, s, 3, 9);
    for i in 0..3 {
        params.insert(format!("{P}.conv.{i}.b"), rand_tensor(&[d], 20 + i as u64).map(|v| 0.1 * v));
    }
    let x = rand_tensor(&[time, d], 30);
    let mut h: Vec<Vec<f64>> = (0..time).map(|r| x.row(r).to_vec()).collect();
    for i in 0..3 {
        let w = params.get(&format!("{P}.conv.{i}.w")).unwrap();
        let b = params.get(&format!("{P}.conv.{i}.b")).unwrap();
        h = naive_conv(&h, w, b)
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
    }
    let pooled: Vec<f64> = (0..d).map(|c| h.iter().map(|r| r[c]).sum::<f64>() / time as f64).collect();
    let lw = params.get(&format!("{P}.linear.w")).unwrap();
    let logits: Vec<f64> = (0..s).map(|k| (0..d).map(|c| pooled[c] * lw.get(&[c, k])).sum()).collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let want: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
    let got = probs_of(&params, &x, Some(1.0));
    for k in 0..s {
        assert!((got[k] - want[k]).abs() < 1e-12);
    }
    assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn loss_examples() {
    let mut t = Tape::new();
    let perfect = t.constant(Tensor::vector(vec![1.0, 0.0, 0.0]).unwrap());
    let (l, _) = singer_loss(&mut t, perfect, 0).unwrap();
    assert_eq!(t.scalar_value(l), 0.0);
    let uniform = t.constant(Tensor::full(&[4], 0.25));
    let (l, _) = singer_loss(&mut t, uniform, 3).unwrap();
    assert!((t.scalar_value(l) - 4f64.ln()).abs() < 1e-12);
    let half = t.constant(Tensor::vector(vec![0.5, 0.5]).unwrap());
    let (mean, clamped) = batch_singer_loss(&mut t, &[(perfect, 0), (uniform, 1), (half, 1)]).unwrap();
    let want = (0.0 + 4f64.ln() + 2f64.ln()) / 3.0;
    assert!((t.scalar_value(mean) - want).abs() < 1e-12);
    assert!((t.scalar_value(mean) - 0.6931).abs() < 1e-4);
    assert_eq!(clamped, 0);
}

#[test]
fn zero_probability_is_clamped_and_flagged() {
    let mut t = Tape::new();
    let p = t.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
    let (l, clamped) = singer_loss(&mut t, p, 1).unwrap();
    assert!(clamped);
    assert!((t.scalar_value(l) - 1e-12f64.ln().abs()).abs() < 1e-9);
}

#[test]
fn ramp_is_linear() {
    let g = GrlConfig {
        lambda: 1.0,
        ramp: Some(GrlConfig::DEFAULT_RAMP),
    };
    assert_eq!(g.lambda_at(250), 0.25);
    assert_eq!(g.lambda_at(5000), 1.0);
}

proptest! {
    #[test]
    fn permuting_singers_permutes_probabilities(seed in 0u64..500, shift in 1usize..3) {
        let (d, s) = (6, 3);
        let params = init_eliminator(P, d, s, 3, seed);
        let w = params.get(&format!("{P}.linear.w")).unwrap().clone();
        let mut permuted = w.clone();
        for c in 0..d {
            for k in 0..s {
                permuted.set(&[c, (k + shift) % s], w.get(&[c, k]));
            }
        }
        let mut params2 = params.clone();
        params2.insert(format!("{P}.linear.w"), permuted);
        let x = rand_tensor(&[4, d], seed + 1);
        let a = probs_of(&params, &x, Some(1.0));
        let b = probs_of(&params2, &x, Some(1.0));
        for k in 0..s {
            prop_assert!((b[(k + shift) % s] - a[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn singer_loss_is_non_negative(raw in proptest::collection::vec(0.0f64..1.0, 2..6), pick in 0usize..6) {
        let total: f64 = raw.iter().sum::<f64>() + 1e-3;
        let probs: Vec<f64> = raw.iter().map(|v| (v + 1e-3 / raw.len() as f64) / total).collect();
        let k = pick % probs.len();
        let mut t = Tape::new();
        let p = t.constant(Tensor::vector(probs.clone()).unwrap());
        let (l, _) = singer_loss(&mut t, p, k).unwrap();
        prop_assert!(t.scalar_value(l) >= 0.0);
        prop_assert!((t.scalar_value(l) + probs[k].ln()).abs() < 1e-12);
    }
}
