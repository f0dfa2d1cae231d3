//! Synthetic monolingual-singer corpus.
//!
//! Each item is a random score sung by one singer in that singer's only
//! language. Target mels are a fixed random linear rendering of phoneme,
//! pitch and singer timbre per frame, plus seeded noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{score_to_sequences, Language, NoteEvent, Score, SequenceTriple, UnifiedLexicon};
use crate::rng::{int_in, normal, randn, stream, Purpose};
use crate::tensor::Tensor;

/// Which syllables lyrics are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LyricPool {
    /// Syllables whose IPA transcription exists in every language.
    Shared,
    /// Every syllable of the singer's language.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub items: usize,
    pub singers: usize,
    pub languages: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub min_note_frames: usize,
    pub max_note_frames: usize,
    pub min_pitch: u8,
    pub max_pitch: u8,
    pub mel_bins: usize,
    pub lyric_pool: LyricPool,
    pub noise_std: f64,
    pub timbre_std: f64,
    /// Seed of the rendering matrices; independent of the item seed so that
    /// corpora drawn with different seeds share one target mapping.
    pub render_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            items: 60,
            singers: 3,
            languages: 3,
            min_phonemes: 4,
            max_phonemes: 12,
            min_note_frames: 3,
            max_note_frames: 8,
            min_pitch: 55,
            max_pitch: 72,
            mel_bins: 16,
            lyric_pool: LyricPool::Shared,
            noise_std: 0.05,
            timbre_std: 1.0,
            render_seed: 0x5EED,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.singers < 2 || self.languages < 2 {
            return Err(Error::Config(format!(
                "corpus needs >= 2 singers and >= 2 languages, got {} / {}",
                self.singers, self.languages
            )));
        }
        if self.singers != self.languages {
            return Err(Error::Config(format!(
                "{} singers cannot be mapped one-to-one onto {} languages",
                self.singers, self.languages
            )));
        }
        if self.languages > Language::ALL.len() {
            return Err(Error::Config(format!(
                "only {} languages are available",
                Language::ALL.len()
            )));
        }
        if self.items == 0 || self.mel_bins == 0 {
            return Err(Error::Config("corpus items and mel_bins must be >= 1".into()));
        }
        for (name, v) in [("noise_std", self.noise_std), ("timbre_std", self.timbre_std)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} {v} must be finite and >= 0")));
            }
        }
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return Err(Error::Config("phoneme length range is empty".into()));
        }
        if self.min_note_frames == 0 || self.min_note_frames > self.max_note_frames {
            return Err(Error::Config("note frame range is empty".into()));
        }
        if self.min_pitch == 0 || self.min_pitch > self.max_pitch || self.max_pitch > 127 {
            return Err(Error::Config("pitch range must lie in 1..=127".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub score: Score,
    pub sequence: SequenceTriple,
    /// `[F × mel_bins]`
    pub target_mel: Tensor,
    pub singer_id: usize,
    pub language_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub items: Vec<CorpusItem>,
    /// `singer_language[s]` is singer `s`'s only language.
    pub singer_language: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Rendering tables shared by every corpus with the same `render_seed`.
struct Renderer {
    phoneme: Tensor,
    pitch: Tensor,
    timbre: Tensor,
}

impl Renderer {
    fn new(cfg: &CorpusConfig, vocab: usize) -> Self {
        let mut rng = stream(cfg.render_seed, Purpose::Render, 0);
        Renderer {
            phoneme: randn(&[vocab, cfg.mel_bins], 1.0, &mut rng),
            pitch: randn(&[128, cfg.mel_bins], 0.5, &mut rng),
            timbre: randn(&[cfg.singers, cfg.mel_bins], cfg.timbre_std, &mut rng),
        }
    }

    fn render(&self, seq: &SequenceTriple, singer: usize, noise_std: f64, rng: &mut crate::rng::StreamRng) -> Tensor {
        let bins = self.phoneme.cols();
        let frames = seq.total_frames();
        let mut data = Vec::with_capacity(frames * bins);
        for t in 0..seq.len() {
            let ph = self.phoneme.row(seq.phoneme_ids[t]);
            let pi = self.pitch.row(seq.note_pitches[t]);
            let ti = self.timbre.row(singer);
            for _ in 0..seq.note_durations[t] {
                for b in 0..bins {
                    data.push(ph[b] + pi[b] + ti[b] + noise_std * normal(rng));
                }
            }
        }
        Tensor::from_parts(vec![frames, bins], data)
    }
}

fn lyric_pool(lexicon: &UnifiedLexicon, language: Language, pool: LyricPool) -> Result<Vec<(String, usize)>> {
    let syllables = match pool {
        LyricPool::Shared => lexicon.shared_syllables(language),
        LyricPool::Full => lexicon
            .entries(language)
            .map(|e| e.keys().cloned().collect())
            .unwrap_or_default(),
    };
    let out: Vec<(String, usize)> = syllables
        .into_iter()
        .filter_map(|s| lexicon.transcription(language, &s).map(|ipa| (s.clone(), ipa.len())))
        .collect();
    if out.is_empty() {
        return Err(Error::Config(format!("no lyric syllables available for {language}")));
    }
    Ok(out)
}

/// Deterministic corpus for `seed`. Singer `s` sings only in language `s`;
/// items cycle through singers so each appears equally often.
pub fn make_synthetic_corpus(cfg: &CorpusConfig, lexicon: &UnifiedLexicon, seed: u64) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let renderer = Renderer::new(cfg, lexicon.vocab_size());
    let singer_language: Vec<usize> = (0..cfg.singers).collect();
    let pools: Vec<Vec<(String, usize)>> = (0..cfg.languages)
        .map(|l| lyric_pool(lexicon, Language::ALL[l], cfg.lyric_pool))
        .collect::<Result<_>>()?;
    let mut items = Vec::with_capacity(cfg.items);
    for i in 0..cfg.items {
        let mut rng = stream(seed, Purpose::Corpus, i as u64);
        let singer_id = i % cfg.singers;
        let language_id = singer_language[singer_id];
        let language = Language::ALL[language_id];
        let pool = &pools[language_id];
        let target = int_in(&mut rng, cfg.min_phonemes, cfg.max_phonemes);
        let mut events = Vec::new();
        let mut phonemes = 0;
        while phonemes < target {
            let fitting: Vec<&(String, usize)> = pool
                .iter()
                .filter(|(_, n)| phonemes + n <= cfg.max_phonemes)
                .collect();
            if fitting.is_empty() {
                break;
            }
            let (syllable, n) = fitting[int_in(&mut rng, 0, fitting.len() - 1)];
            let lo = cfg.min_note_frames.max(*n);
            let hi = cfg.max_note_frames.max(lo);
            events.push(NoteEvent {
                syllable: syllable.clone(),
                language,
                midi_pitch: int_in(&mut rng, cfg.min_pitch as usize, cfg.max_pitch as usize) as u8,
                duration_frames: int_in(&mut rng, lo, hi),
            });
            phonemes += n;
        }
        if phonemes < cfg.min_phonemes {
            return Err(Error::Config(format!(
                "cannot fill {} phonemes from the {language} lyric pool",
                cfg.min_phonemes
            )));
        }
        let score = Score::new(events)?;
        let sequence = score_to_sequences(&score, lexicon, language)?;
        let target_mel = renderer.render(&sequence, singer_id, cfg.noise_std, &mut rng);
        items.push(CorpusItem {
            score,
            sequence,
            target_mel,
            singer_id,
            language_id,
        });
    }
    Ok(SyntheticCorpus {
        seed,
        items,
        singer_language,
    })
}
