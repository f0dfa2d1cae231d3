use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhoneClass {
    Vowel,
    Consonant,
}

/// The set of IPA symbols lexicons may use.
#[derive(Clone, Debug)]
pub struct IpaInventory {
    classes: BTreeMap<String, PhoneClass>,
}

const SHIPPED_INVENTORY: &str = include_str!("../../data/ipa_inventory.txt");

impl IpaInventory {
    pub fn shipped() -> Self {
        Self::parse(SHIPPED_INVENTORY).expect("shipped inventory is well-formed")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut classes = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (sym, class) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                field: "class".into(),
                message: "expected `symbol<TAB>class`".into(),
            })?;
            let class = match class.trim() {
                "vowel" => PhoneClass::Vowel,
                "consonant" => PhoneClass::Consonant,
                other => {
                    return Err(Error::Parse {
                        line: i + 1,
                        field: "class".into(),
                        message: format!("unknown class `{other}`"),
                    })
                }
            };
            classes.insert(sym.to_string(), class);
        }
        Ok(IpaInventory { classes })
    }

    pub fn class(&self, symbol: &str) -> Option<PhoneClass> {
        self.classes.get(symbol).copied()
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.classes.contains_key(symbol)
    }

    pub fn is_vowel(&self, symbol: &str) -> bool {
        self.class(symbol) == Some(PhoneClass::Vowel)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}
