use serde::{Deserialize, Serialize};

use super::lexicon::UnifiedLexicon;
use super::score::Score;
use super::Language;
use crate::error::{Error, Result};

/// Phoneme-level model input: ids, frame durations and pitches aligned 1:1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceTriple {
    pub phoneme_ids: Vec<usize>,
    pub note_durations: Vec<usize>,
    pub note_pitches: Vec<usize>,
    pub language_id: usize,
    /// Index of the score event each phoneme came from.
    pub source_events: Vec<usize>,
}

impl SequenceTriple {
    pub fn len(&self) -> usize {
        self.phoneme_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phoneme_ids.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.note_durations.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.phoneme_ids.len();
        if n == 0 {
            return Err(Error::Validation("empty sequence".into()));
        }
        if self.note_durations.len() != n || self.note_pitches.len() != n || self.source_events.len() != n {
            return Err(Error::Validation(format!(
                "sequence lengths differ: {} ids, {} durations, {} pitches, {} sources",
                n,
                self.note_durations.len(),
                self.note_pitches.len(),
                self.source_events.len()
            )));
        }
        if self.note_durations.iter().any(|&d| d == 0) {
            return Err(Error::Validation("zero phoneme duration".into()));
        }
        if self.note_pitches.iter().any(|&p| p > 127) {
            return Err(Error::Validation("pitch outside 0..=127".into()));
        }
        Ok(())
    }
}

/// Splits `frames` over a syllable's phonemes.
///
/// Leading consonants share 30% of the frames equally, at least one frame
/// each; the nucleus and trailing phonemes split the remainder evenly with
/// any leftover frames going to the nucleus. A syllable without a vowel is
/// treated as all nucleus.
pub fn split_note_frames(is_vowel: &[bool], frames: usize) -> Result<Vec<usize>> {
    let n = is_vowel.len();
    if n == 0 {
        return Err(Error::Validation("syllable without phonemes".into()));
    }
    if frames < n {
        return Err(Error::Validation(format!(
            "{frames} frames cannot cover {n} phonemes"
        )));
    }
    let mut onset = is_vowel.iter().take_while(|v| !**v).count();
    if onset == n {
        onset = 0;
    }
    let rest = n - onset;
    let mut out = Vec::with_capacity(n);
    let mut remaining = frames;
    if onset > 0 {
        let mut each = ((3 * frames / 10) / onset).max(1);
        if onset * each > frames - rest {
            each = (frames - rest) / onset;
        }
        out.extend(std::iter::repeat_n(each, onset));
        remaining -= onset * each;
    }
    let base = remaining / rest;
    let extra = remaining % rest;
    out.push(base + extra);
    out.extend(std::iter::repeat_n(base, rest - 1));
    Ok(out)
}

/// Expands a score into phoneme-level sequences. Each event is looked up in
/// the lexicon of its own language; `language` is the conditioning language
/// recorded in the result.
pub fn score_to_sequences(score: &Score, lexicon: &UnifiedLexicon, language: Language) -> Result<SequenceTriple> {
    let mut seq = SequenceTriple {
        phoneme_ids: Vec::new(),
        note_durations: Vec::new(),
        note_pitches: Vec::new(),
        language_id: language.id(),
        source_events: Vec::new(),
    };
    for (pos, event) in score.events.iter().enumerate() {
        if event.is_rest() {
            seq.phoneme_ids.push(0);
            seq.note_durations.push(event.duration_frames);
            seq.note_pitches.push(0);
            seq.source_events.push(pos);
            continue;
        }
        let ids = lexicon
            .encode(event.language, &event.syllable)
            .ok_or_else(|| Error::OutOfVocabulary {
                syllable: event.syllable.clone(),
                position: pos,
            })?;
        let vowels: Vec<bool> = ids.iter().map(|&id| lexicon.is_vowel_id(id)).collect();
        let durations = split_note_frames(&vowels, event.duration_frames)
            .map_err(|e| Error::Validation(format!("event {pos} `{}`: {e}", event.syllable)))?;
        for (id, dur) in ids.into_iter().zip(durations) {
            seq.phoneme_ids.push(id);
            seq.note_durations.push(dur);
            seq.note_pitches.push(event.midi_pitch as usize);
            seq.source_events.push(pos);
        }
    }
    Ok(seq)
}
