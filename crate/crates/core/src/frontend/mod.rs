//! Score and lexicon frontend.
//!
//! A score is parsed into note events, each syllable is looked up in a
//! per-language lexicon whose IPA symbols share one id space, and each note's
//! frames are split over its phonemes to produce the aligned phoneme,
//! duration and pitch sequences consumed by the generator.

mod ipa;
mod lexicon;
mod score;
mod sequence;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use ipa::{IpaInventory, PhoneClass};
pub use lexicon::{build_lexicon, load_lexicon_dir, shipped_lexicon, shipped_lexicon_sources, UnifiedLexicon};
pub use score::{parse_score, NoteEvent, Score};
pub use sequence::{score_to_sequences, split_note_frames, SequenceTriple};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Language {
    #[serde(rename = "ZH")]
    Zh,
    #[serde(rename = "JA")]
    Ja,
    #[serde(rename = "EN")]
    En,
}

impl Language {
    pub const ALL: [Language; 3] = [Language::Zh, Language::Ja, Language::En];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            Language::Zh => "ZH",
            Language::Ja => "JA",
            Language::En => "EN",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "ZH" => Ok(Language::Zh),
            "JA" => Ok(Language::Ja),
            "EN" => Ok(Language::En),
            other => Err(Error::Validation(format!("unknown language `{other}`"))),
        }
    }
}
