use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ipa::IpaInventory;
use super::Language;
use crate::error::{Error, Result};

/// Per-language syllable → IPA maps over one shared phoneme-id space.
///
/// Ids are assigned from 1 in codepoint order of the distinct symbols; id 0 is
/// reserved for padding and rests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnifiedLexicon {
    entries: BTreeMap<Language, BTreeMap<String, Vec<String>>>,
    symbol_table: BTreeMap<String, usize>,
    #[serde(skip)]
    vowels: Vec<bool>,
}

impl UnifiedLexicon {
    pub fn symbol_table(&self) -> &BTreeMap<String, usize> {
        &self.symbol_table
    }

    /// Number of ids including the reserved 0.
    pub fn vocab_size(&self) -> usize {
        self.symbol_table.len() + 1
    }

    pub fn languages(&self) -> impl Iterator<Item = Language> + '_ {
        self.entries.keys().copied()
    }

    pub fn entries(&self, language: Language) -> Option<&BTreeMap<String, Vec<String>>> {
        self.entries.get(&language)
    }

    pub fn transcription(&self, language: Language, syllable: &str) -> Option<&[String]> {
        self.entries
            .get(&language)?
            .get(syllable)
            .map(Vec::as_slice)
    }

    pub fn symbol_id(&self, symbol: &str) -> Option<usize> {
        self.symbol_table.get(symbol).copied()
    }

    pub fn encode(&self, language: Language, syllable: &str) -> Option<Vec<usize>> {
        self.transcription(language, syllable).map(|syms| {
            syms.iter()
                .map(|s| self.symbol_table[s.as_str()])
                .collect()
        })
    }

    /// Whether phoneme `id` is a vowel; id 0 counts as non-vowel.
    pub fn is_vowel_id(&self, id: usize) -> bool {
        self.vowels.get(id).copied().unwrap_or(false)
    }

    /// Syllables of `language` whose transcription occurs in every language.
    pub fn shared_syllables(&self, language: Language) -> Vec<String> {
        let Some(own) = self.entries.get(&language) else {
            return Vec::new();
        };
        own.iter()
            .filter(|(_, ipa)| {
                self.entries
                    .values()
                    .all(|other| other.values().any(|o| o == *ipa))
            })
            .map(|(s, _)| s.clone())
            .collect()
    }

    fn index_vowels(&mut self, inventory: &IpaInventory) {
        let mut vowels = vec![false; self.vocab_size()];
        for (sym, &id) in &self.symbol_table {
            vowels[id] = inventory.is_vowel(sym);
        }
        self.vowels = vowels;
    }
}

fn parse_lexicon_text(
    language: Language,
    text: &str,
    inventory: &IpaInventory,
) -> Result<BTreeMap<String, Vec<String>>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (syllable, ipa) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            field: "ipa".into(),
            message: format!("{language} lexicon: expected `syllable<TAB>ipa ...`"),
        })?;
        let syllable = syllable.trim();
        if syllable.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                field: "syllable".into(),
                message: format!("{language} lexicon: empty syllable"),
            });
        }
        let symbols: Vec<String> = ipa.split_whitespace().map(str::to_string).collect();
        if symbols.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                field: "ipa".into(),
                message: format!("{language} lexicon: `{syllable}` has no IPA symbols"),
            });
        }
        if let Some(bad) = symbols.iter().find(|s| !inventory.contains(s)) {
            return Err(Error::Validation(format!(
                "unknown IPA symbol `{bad}` in {language} lexicon (syllable `{syllable}`)"
            )));
        }
        map.insert(syllable.to_string(), symbols);
    }
    Ok(map)
}

/// Merges per-language lexicon texts into one symbol table.
pub fn build_lexicon(sources: &[(Language, &str)], inventory: &IpaInventory) -> Result<UnifiedLexicon> {
    let mut entries: BTreeMap<Language, BTreeMap<String, Vec<String>>> = BTreeMap::new();
    for (language, text) in sources {
        let parsed = parse_lexicon_text(*language, text, inventory)?;
        entries.entry(*language).or_default().extend(parsed);
    }
    let mut symbols: Vec<&String> = entries
        .values()
        .flat_map(|m| m.values().flatten())
        .collect();
    symbols.sort();
    symbols.dedup();
    let symbol_table = symbols
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i + 1))
        .collect();
    let mut lex = UnifiedLexicon {
        entries,
        symbol_table,
        vowels: Vec::new(),
    };
    lex.index_vowels(inventory);
    Ok(lex)
}

const SHIPPED: [(Language, &str); 3] = [
    (Language::Zh, include_str!("../../data/lexicons/zh.lex")),
    (Language::Ja, include_str!("../../data/lexicons/ja.lex")),
    (Language::En, include_str!("../../data/lexicons/en.lex")),
];

pub fn shipped_lexicon_sources() -> &'static [(Language, &'static str)] {
    &SHIPPED
}

pub fn shipped_lexicon() -> UnifiedLexicon {
    build_lexicon(&SHIPPED, &IpaInventory::shipped()).expect("shipped lexicons are valid")
}

/// Loads `zh.lex`, `ja.lex` and `en.lex` (whichever exist) from `dir`.
pub fn load_lexicon_dir(dir: &Path) -> Result<UnifiedLexicon> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "lexicon directory not found"),
        ));
    }
    let mut texts = Vec::new();
    for lang in Language::ALL {
        let path = dir.join(format!("{}.lex", lang.code().to_ascii_lowercase()));
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            texts.push((lang, text));
        }
    }
    if texts.is_empty() {
        return Err(Error::Validation(format!(
            "no *.lex files found in {}",
            dir.display()
        )));
    }
    let borrowed: Vec<(Language, &str)> = texts.iter().map(|(l, t)| (*l, t.as_str())).collect();
    build_lexicon(&borrowed, &IpaInventory::shipped())
}
