#[pyo3::pymodule]
mod xsng {
    use std::path::Path;

    use pyo3::exceptions::{PyIOError, PyValueError};
    use pyo3::prelude::*;
    use xsng_core::frontend::{parse_score, score_to_sequences, shipped_lexicon, Language};
    use xsng_core::generator::generator_forward;
    use xsng_core::gradsuite::gradient_suite;
    use xsng_core::train::{load_checkpoint, make_synthetic_corpus, probe_eval, CorpusConfig, TrainConfig};
    use xsng_core::{Error, Tape};

    fn py_err(e: Error) -> PyErr {
        match e {
            Error::Io { .. } => PyIOError::new_err(e.to_string()),
            _ => PyValueError::new_err(e.to_string()),
        }
    }

    fn language(code: &str) -> PyResult<Language> {
        code.parse().map_err(py_err)
    }

    /// Score document to `(phoneme_ids, note_durations, note_pitches)`.
    #[pyfunction]
    #[pyo3(signature = (score, lang = "ZH"))]
    fn frontend(score: &str, lang: &str) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let score = parse_score(score).map_err(py_err)?;
        let seq = score_to_sequences(&score, &shipped_lexicon(), language(lang)?).map_err(py_err)?;
        Ok((seq.phoneme_ids, seq.note_durations, seq.note_pitches))
    }

    /// Trains from a JSON config and writes the run into `out_dir`;
    /// returns the per-step `L_a` curve.
    #[pyfunction]
    #[pyo3(signature = (out_dir, config = "{}", steps = None))]
    fn train(py: Python<'_>, out_dir: &str, config: &str, steps: Option<u64>) -> PyResult<Vec<f64>> {
        let mut cfg = TrainConfig::from_json(config).map_err(py_err)?;
        if let Some(s) = steps {
            cfg.steps = s;
            cfg.epochs = None;
        }
        let outcome = py
            .detach(|| xsng_core::train::train(cfg, Some(Path::new(out_dir))))
            .map_err(py_err)?;
        Ok(outcome.metrics.iter().map(|m| m.l_a).collect())
    }

    /// Mel spectrogram as `(frames, bins, row-major data)`.
    #[pyfunction]
    fn synth(checkpoint: &str, score: &str, lang: &str, singer: usize) -> PyResult<(usize, usize, Vec<f64>)> {
        let state = load_checkpoint(Path::new(checkpoint)).map_err(py_err)?;
        let cfg = &state.config.generator;
        if singer >= cfg.singer_count {
            return Err(PyValueError::new_err(format!(
                "singer {singer} out of range for {} singers",
                cfg.singer_count
            )));
        }
        let lang = language(lang)?;
        let score = parse_score(score).map_err(py_err)?;
        let seq = score_to_sequences(&score, &shipped_lexicon(), lang).map_err(py_err)?;
        let mut tape = Tape::new();
        let p = state.generator.bind(&mut tape, false);
        let out = generator_forward(&mut tape, &p, cfg, &seq, lang.id(), singer, None).map_err(py_err)?;
        let mel = tape.value(out.mel);
        Ok((mel.rows(), mel.cols(), mel.data().to_vec()))
    }

    /// Held-out singer accuracy of a probe trained on the frozen encoder.
    #[pyfunction]
    fn probe(checkpoint: &str, corpus_seed: u64) -> PyResult<f64> {
        let state = load_checkpoint(Path::new(checkpoint)).map_err(py_err)?;
        let cfg = &state.config;
        let corpus_cfg = CorpusConfig {
            items: cfg.probe.corpus_items,
            ..cfg.corpus.clone()
        };
        let corpus = make_synthetic_corpus(&corpus_cfg, &shipped_lexicon(), corpus_seed).map_err(py_err)?;
        let report = probe_eval(&state.generator, &cfg.generator, &corpus, &cfg.probe).map_err(py_err)?;
        Ok(report.accuracy)
    }

    /// `(module, op, max_rel_error)` for every finite-difference check.
    #[pyfunction]
    #[pyo3(signature = (module = None, h = 1e-5))]
    fn gradcheck(module: Option<&str>, h: f64) -> PyResult<Vec<(String, String, f64)>> {
        let reports = gradient_suite(module, h).map_err(py_err)?;
        Ok(reports
            .into_iter()
            .map(|r| (r.module.to_string(), r.op.to_string(), r.max_rel_error))
            .collect())
    }
}
