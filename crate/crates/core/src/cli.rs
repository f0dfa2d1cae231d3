//! `xsng` command-line interface.
//!
//! Exit codes: 0 success, 1 usage, 2 missing file, 3 invalid input or
//! configuration, 4 numeric or internal failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frontend::{load_lexicon_dir, parse_score, score_to_sequences, shipped_lexicon, Language, SequenceTriple, UnifiedLexicon};
use crate::generator::generator_forward;
use crate::gradsuite::gradient_suite;
use crate::tape::Tape;
use crate::train::{load_checkpoint, make_synthetic_corpus, probe_eval, train, CorpusConfig, TrainConfig};

pub const SEED_ENV: &str = "XSNG_SEED";
/// Tolerance reported as pass/fail by `gradcheck`.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "xsng", version, about = "Cross-lingual singing voice synthesis toolkit", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a score into phoneme, duration and pitch sequences (JSON).
    Frontend {
        /// Score file (JSON lines).
        score: PathBuf,
        /// Conditioning language; defaults to the first sung note's language.
        #[arg(long)]
        lang: Option<Language>,
        /// Directory with zh.lex / ja.lex / en.lex replacing the shipped lexicons.
        #[arg(long)]
        lexicon_dir: Option<PathBuf>,
    },
    /// Train on the synthetic corpus.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed and XSNG_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Render a mel-spectrogram for a score from a checkpoint.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        lang: Language,
        /// 0-based singer index.
        #[arg(long)]
        singer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Module (tensor, generator, eliminator, discriminators, losses) or op name.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
    },
    /// Train a fresh singer probe on a checkpoint's frozen encoder.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus_seed: u64,
        #[arg(long)]
        items: Option<usize>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 2,
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Validation(_)
        | Error::OutOfVocabulary { .. }
        | Error::Lookup { .. }
        | Error::Format(_)
        | Error::Json(_) => 3,
        Error::Numeric(_) | Error::Dimension { .. } | Error::Contract(_) => 4,
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_line(out: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

/// Seed precedence: flag, then `XSNG_SEED`, then the config value.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        None => Ok(config),
    }
}

#[derive(Serialize)]
struct FrontendOutput<'a> {
    language: Language,
    phonemes: Vec<&'a str>,
    #[serde(flatten)]
    sequence: &'a SequenceTriple,
}

#[derive(Serialize)]
struct MelOutput<'a> {
    shape: [usize; 2],
    language: Language,
    singer: usize,
    durations: &'a [usize],
    data: &'a [f64],
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Frontend { score, lang, lexicon_dir } => {
            let lexicon = match lexicon_dir {
                Some(dir) => load_lexicon_dir(&dir)?,
                None => shipped_lexicon(),
            };
            let score = parse_score(&read_text(&score)?)?;
            let language = lang.unwrap_or_else(|| {
                score
                    .events
                    .iter()
                    .find(|e| !e.is_rest())
                    .map_or(Language::Zh, |e| e.language)
            });
            let seq = score_to_sequences(&score, &lexicon, language)?;
            let names = symbol_names(&lexicon);
            let output = FrontendOutput {
                language,
                phonemes: seq.phoneme_ids.iter().map(|&id| names[id]).collect(),
                sequence: &seq,
            };
            write_line(out, &serde_json::to_string_pretty(&output)?)?;
            Ok(0)
        }
        Command::Train { config, out: dir, seed, steps } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => TrainConfig::default(),
            };
            let env = std::env::var(SEED_ENV).ok();
            cfg.seed = resolve_seed(seed, env.as_deref(), cfg.seed)?;
            if let Some(s) = steps {
                cfg.steps = s;
                cfg.epochs = None;
            }
            cfg.validate()?;
            let outcome = train(cfg, Some(&dir))?;
            let last = outcome.metrics.last();
            write_line(
                out,
                &format!(
                    "trained {} steps; final L_a {:.6}; checkpoint {}",
                    outcome.state.step,
                    last.map_or(f64::NAN, |m| m.l_a),
                    dir.join("checkpoint.xsng").display()
                ),
            )?;
            Ok(0)
        }
        Command::Synth {
            checkpoint,
            score,
            lang,
            singer,
            out: path,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let cfg = &state.config.generator;
            if singer >= cfg.singer_count {
                return Err(Error::Validation(format!(
                    "singer {singer} out of range for {} singers",
                    cfg.singer_count
                )));
            }
            let score = parse_score(&read_text(&score)?)?;
            let seq = score_to_sequences(&score, &shipped_lexicon(), lang)?;
            let mut tape = Tape::new();
            let p = state.generator.bind(&mut tape, false);
            let g = generator_forward(&mut tape, &p, cfg, &seq, lang.id(), singer, None)?;
            let mel = tape.value(g.mel);
            if !mel.all_finite() {
                return Err(Error::Numeric("synthesized mel is not finite".into()));
            }
            let output = MelOutput {
                shape: [mel.rows(), mel.cols()],
                language: lang,
                singer,
                durations: &g.frame_durations,
                data: mel.data(),
            };
            let mut text = serde_json::to_string(&output)?;
            text.push('\n');
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            write_line(out, &format!("wrote {} frames x {} bins to {}", mel.rows(), mel.cols(), path.display()))?;
            Ok(0)
        }
        Command::Gradcheck { module, h } => {
            let reports = gradient_suite(module.as_deref(), h)?;
            let mut failed = false;
            for r in &reports {
                let pass = r.max_rel_error < GRAD_TOLERANCE;
                failed |= !pass;
                write_line(
                    out,
                    &format!(
                        "{:<15} {:<20} max_rel_error {:.3e}  {}",
                        r.module,
                        r.op,
                        r.max_rel_error,
                        if pass { "ok" } else { "FAIL" }
                    ),
                )?;
            }
            if failed {
                return Err(Error::Numeric(format!("gradient check above {GRAD_TOLERANCE}")));
            }
            Ok(0)
        }
        Command::Probe {
            checkpoint,
            corpus_seed,
            items,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let cfg = &state.config;
            let corpus_cfg = CorpusConfig {
                items: items.unwrap_or(cfg.probe.corpus_items),
                ..cfg.corpus.clone()
            };
            let corpus = make_synthetic_corpus(&corpus_cfg, &shipped_lexicon(), corpus_seed)?;
            let report = probe_eval(&state.generator, &cfg.generator, &corpus, &cfg.probe)?;
            write_line(
                out,
                &format!(
                    "probe_accuracy {:.4} (train {:.4}, {} held-out items)",
                    report.accuracy, report.train_accuracy, report.held_out
                ),
            )?;
            Ok(0)
        }
    }
}

fn symbol_names(lexicon: &UnifiedLexicon) -> Vec<&str> {
    let mut names = vec!["<rest>"; lexicon.vocab_size()];
    for (sym, &id) in lexicon.symbol_table() {
        names[id] = sym;
    }
    names
}
