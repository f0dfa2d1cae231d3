use proptest::prelude::*;
use xsng_core::eliminator::{classify_singer, singer_loss};
use xsng_core::frontend::shipped_lexicon;
use xsng_core::generator::generator_forward_train;
use xsng_core::losses::LossWeights;
use xsng_core::params::ParamSet;
use xsng_core::train::{
    adam_step, decode_checkpoint, encode_checkpoint, load_checkpoint, lr_at, lr_for_step, make_synthetic_corpus,
    probe_eval, run_training, save_checkpoint, train, AdamConfig, CorpusConfig, LrSchedule, OptimizerState,
    TrainConfig, TrainState, Trainer,
};
use xsng_core::{Error, Tape, Tensor};

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        corpus: CorpusConfig {
            items: 12,
            ..CorpusConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    encode_checkpoint(&state.to_checkpoint()).unwrap()
}

#[test]
fn lr_examples() {
    let s = LrSchedule::default();
    assert_eq!(lr_at(0, 0, &s), 1e-4);
    assert_eq!(lr_at(5000, 0, &s), 1e-2);
    assert!((lr_at(2500, 0, &s) - 0.00505).abs() < 1e-15);
    assert!(lr_at(4999, 0, &s) < lr_at(5000, 0, &s));
}

#[test]
fn lr_decays_once_per_epoch_after_warmup() {
    let s = LrSchedule::default();
    let spe = 100;
    let start = s.first_decay_epoch(spe) * spe;
    assert_eq!(start, 5000);
    for e in 0..10u64 {
        let at_epoch = lr_for_step(start + e * spe, spe, &s);
        assert_eq!(at_epoch, lr_for_step(start + e * spe + spe - 1, spe, &s));
        assert!((at_epoch - 1e-2 * 0.99f64.powi(e as i32)).abs() < 1e-15);
    }
}

/// Textbook Adam on `½ Σ a_i (w_i − c_i)²`, written independently of the
/// library update.
fn reference_adam(w0: &[f64], a: &[f64], c: &[f64], lr: f64, steps: usize) -> Vec<Vec<f64>> {
    let (b1, b2, eps) = (0.9f64, 0.98f64, 1e-9f64);
    let mut w = w0.to_vec();
    let mut m = vec![0.0; w.len()];
    let mut v = vec![0.0; w.len()];
    let mut trace = Vec::new();
    for t in 1..=steps {
        for i in 0..w.len() {
            let g = a[i] * (w[i] - c[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / (1.0 - b1.powf(t as f64));
            let vh = v[i] / (1.0 - b2.powf(t as f64));
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
        trace.push(w.clone());
    }
    trace
}

#[test]
fn adam_matches_reference_trace_on_quadratic() {
    let w0 = [1.0, -2.0, 0.5, 3.0];
    let a = [1.0, 0.5, 4.0, 0.1];
    let c = [0.2, 0.0, -1.0, 2.5];
    let lr = 0.01;
    let want = reference_adam(&w0, &a, &c, lr, 10);
    let mut params: ParamSet = [("w".to_string(), Tensor::vector(w0.to_vec()).unwrap())].into_iter().collect();
    let mut state = OptimizerState::new(&params);
    for step in &want {
        let w = params.get("w").unwrap().data().to_vec();
        let g: Vec<f64> = (0..4).map(|i| a[i] * (w[i] - c[i])).collect();
        let grads: ParamSet = [("w".to_string(), Tensor::vector(g).unwrap())].into_iter().collect();
        adam_step(&mut params, &grads, &mut state, lr, &AdamConfig::default()).unwrap();
        for (got, want) in params.get("w").unwrap().data().iter().zip(step) {
            assert!((got - want).abs() < 1e-12);
        }
    }
    assert_eq!(state.step, 10);
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut params: ParamSet = [("w".to_string(), Tensor::vector(vec![1.0, 1.0]).unwrap())].into_iter().collect();
    let mut state = OptimizerState::new(&params);
    let grads: ParamSet = [("w".to_string(), Tensor::vector(vec![3.0, -0.2]).unwrap())].into_iter().collect();
    adam_step(&mut params, &grads, &mut state, 0.01, &AdamConfig::default()).unwrap();
    let w = params.get("w").unwrap().data().to_vec();
    assert!((w[0] - 0.99).abs() < 1e-9);
    assert!((w[1] - 1.01).abs() < 1e-9);

    let before_m = state.m.get("w").unwrap().clone();
    let zero: ParamSet = [("w".to_string(), Tensor::zeros(&[2]))].into_iter().collect();
    let mut fresh = params.clone();
    let mut fresh_state = OptimizerState::new(&fresh);
    adam_step(&mut fresh, &zero, &mut fresh_state, 0.01, &AdamConfig::default()).unwrap();
    assert_eq!(fresh, params);
    adam_step(&mut params, &zero, &mut state, 0.01, &AdamConfig::default()).unwrap();
    assert_eq!(state.m.get("w").unwrap(), &before_m.map(|v| 0.9 * v));
}

#[test]
fn adam_rejects_non_finite_gradient_without_touching_state() {
    let mut params: ParamSet = [("gen.mel.w".to_string(), Tensor::vector(vec![1.0]).unwrap())].into_iter().collect();
    let mut state = OptimizerState::new(&params);
    let grads: ParamSet = [("gen.mel.w".to_string(), Tensor::vector(vec![f64::NAN]).unwrap())].into_iter().collect();
    let err = adam_step(&mut params, &grads, &mut state, 0.01, &AdamConfig::default()).unwrap_err();
    assert!(matches!(&err, Error::Numeric(m) if m.contains("gen.mel.w")));
    assert_eq!(state.step, 0);
    assert_eq!(params.get("gen.mel.w").unwrap().data(), &[1.0]);
}

#[test]
fn corpus_is_deterministic_and_bijective() {
    let cfg = CorpusConfig::default();
    let lex = shipped_lexicon();
    let a = make_synthetic_corpus(&cfg, &lex, 42).unwrap();
    let b = make_synthetic_corpus(&cfg, &lex, 42).unwrap();
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    assert_ne!(a, make_synthetic_corpus(&cfg, &lex, 43).unwrap());
    let mut language_of = vec![None; cfg.singers];
    for item in &a.items {
        let seen = language_of[item.singer_id].get_or_insert(item.language_id);
        assert_eq!(*seen, item.language_id);
        assert_eq!(item.sequence.language_id, item.language_id);
    }
    let mut langs: Vec<usize> = language_of.into_iter().map(Option::unwrap).collect();
    langs.sort();
    assert_eq!(langs, vec![0, 1, 2]);
}

#[test]
fn corpus_items_satisfy_sequence_invariants() {
    let cfg = CorpusConfig::default();
    let corpus = make_synthetic_corpus(&cfg, &shipped_lexicon(), 7).unwrap();
    assert_eq!(corpus.len(), 60);
    for item in &corpus.items {
        let seq = &item.sequence;
        seq.validate().unwrap();
        assert!((4..=12).contains(&seq.len()));
        assert!(seq.note_durations.iter().all(|&d| d >= 1));
        assert!(seq.note_pitches.iter().all(|&p| (55..=72).contains(&p)));
        assert_eq!(item.target_mel.shape(), &[seq.total_frames(), cfg.mel_bins]);
        assert!(item.target_mel.all_finite());
    }
}

#[test]
fn incompatible_singer_language_counts_are_config_errors() {
    let cfg = CorpusConfig {
        singers: 3,
        languages: 2,
        ..CorpusConfig::default()
    };
    assert!(matches!(make_synthetic_corpus(&cfg, &shipped_lexicon(), 1), Err(Error::Config(_))));
}

#[test]
fn zero_epochs_returns_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: Some(0),
        ..small_config()
    };
    let outcome = train(cfg.clone(), Some(dir.path())).unwrap();
    assert!(outcome.metrics.is_empty());
    let init = checkpoint_bytes(&TrainState::initial(cfg).unwrap());
    assert_eq!(checkpoint_bytes(&outcome.state), init);
    assert_eq!(std::fs::read(dir.path().join("checkpoint.xsng")).unwrap(), init);
}

#[test]
fn supervised_mel_l1_decreases_every_step() {
    let cfg = TrainConfig {
        steps: 50,
        batch_size: 12,
        use_eliminator: false,
        weights: LossWeights {
            adversarial: 0.0,
            feature_match: 0.0,
            singer: 0.0,
        },
        ..small_config()
    };
    let outcome = train(cfg, None).unwrap();
    let l1: Vec<f64> = outcome.metrics.iter().map(|m| m.mel_l1).collect();
    assert_eq!(l1.len(), 50);
    for w in l1.windows(2) {
        assert!(w[1] < w[0], "{l1:?}");
    }
    assert!(outcome.metrics.iter().all(|m| m.d_loss.is_none()));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 2,
        ..small_config()
    };
    let outcome = train(cfg, None).unwrap();
    let a = dir.path().join("a.xsng");
    let b = dir.path().join("b.xsng");
    save_checkpoint(&outcome.state, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.step, 2);

    let mut bytes = std::fs::read(&a).unwrap();
    bytes[0] = b'Y';
    assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
    std::fs::write(&b, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&b), Err(Error::Format(_))));
    let full = std::fs::read(&a).unwrap();
    assert!(matches!(decode_checkpoint(&full[..full.len() / 2]), Err(Error::Format(_))));
}

#[test]
fn resumed_training_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 6,
        ..small_config()
    };
    let straight = train(cfg.clone(), None).unwrap();
    let first = run_training(Trainer::new(cfg).unwrap(), 4, None).unwrap();
    let path = dir.path().join("mid.xsng");
    save_checkpoint(&first.state, &path).unwrap();
    let resumed = run_training(Trainer::resume(load_checkpoint(&path).unwrap()).unwrap(), 6, None).unwrap();
    assert_eq!(checkpoint_bytes(&resumed.state), checkpoint_bytes(&straight.state));
    let tail: Vec<String> = straight.metrics[4..].iter().map(|m| serde_json::to_string(m).unwrap()).collect();
    let again: Vec<String> = resumed.metrics.iter().map(|m| serde_json::to_string(m).unwrap()).collect();
    assert_eq!(tail, again);
}

#[test]
fn singer_loss_reaches_encoder_reversed() {
    let cfg = small_config();
    let state = TrainState::initial(cfg.clone()).unwrap();
    let corpus = make_synthetic_corpus(&cfg.corpus, &shipped_lexicon(), cfg.seed).unwrap();
    let item = &corpus.items[1];
    let grads = |lambda: Option<f64>| {
        let mut t = Tape::new();
        let p = state.generator.bind(&mut t, true);
        let g = generator_forward_train(
            &mut t,
            &p,
            &cfg.generator,
            &item.sequence,
            item.language_id,
            item.singer_id,
            Some(&item.sequence.note_durations),
        )
        .unwrap();
        let out = classify_singer(&mut t, g.encoder_out, &p, "eliminator", lambda).unwrap();
        let (ls, _) = singer_loss(&mut t, out.probabilities, item.singer_id).unwrap();
        let weighted = t.scale(ls, cfg.weights.singer);
        let mut back = t.backward(weighted).unwrap();
        p.grads(&mut back, "gen.enc")
    };
    let reversed = grads(Some(1.0));
    let plain = grads(None);
    let mut nonzero = 0;
    for (name, g) in reversed.iter() {
        let want = plain.get(name).unwrap().map(|v| -v);
        assert!(g.max_abs_diff(&want) < 1e-10, "{name}");
        nonzero += usize::from(g.max_abs() > 0.0);
    }
    assert!(nonzero > 0);
}

#[test]
fn divergence_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 3,
        divergence_threshold: 1e-3,
        ..small_config()
    };
    let Err(err) = train(cfg, Some(dir.path())) else {
        panic!("training should diverge")
    };
    assert!(matches!(&err, Error::Numeric(m) if m.contains("diverged")));
    let dump: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("divergence.json")).unwrap()).unwrap();
    assert_eq!(dump["step"], 0);
    assert!(dump["error"].as_str().unwrap().contains("diverged"));
}

#[test]
fn untrained_encoder_probe_is_near_chance() {
    let cfg = TrainConfig::default();
    let state = TrainState::initial(cfg.clone()).unwrap();
    let corpus_cfg = CorpusConfig {
        items: cfg.probe.corpus_items,
        ..cfg.corpus.clone()
    };
    let corpus = make_synthetic_corpus(&corpus_cfg, &shipped_lexicon(), cfg.probe.corpus_seed).unwrap();
    let report = probe_eval(&state.generator, &cfg.generator, &corpus, &cfg.probe).unwrap();
    assert!((report.accuracy - 1.0 / 3.0).abs() <= 0.15, "{}", report.accuracy);
}

#[test]
fn config_round_trips_through_json() {
    let cfg = TrainConfig::default();
    assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    assert!(matches!(TrainConfig::from_json("{\"batch_size\": 0}"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::from_json("{\"seed\": \"x\"}"), Err(Error::Validation(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn lr_is_continuous_and_bounded(step in 0u64..20_000, spe in 1u64..200) {
        let s = LrSchedule::default();
        let lr = lr_for_step(step, spe, &s);
        prop_assert!(lr > 0.0 && lr <= s.peak);
        if step > 0 && step < s.warmup_steps {
            prop_assert!(lr > lr_for_step(step - 1, spe, &s));
        }
    }

    #[test]
    fn corpus_seed_determinism(seed in 0u64..1_000) {
        let cfg = CorpusConfig { items: 6, ..CorpusConfig::default() };
        let lex = shipped_lexicon();
        prop_assert_eq!(make_synthetic_corpus(&cfg, &lex, seed).unwrap(), make_synthetic_corpus(&cfg, &lex, seed).unwrap());
    }
}
