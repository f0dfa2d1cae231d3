use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Language;
use crate::error::{Error, Result};

/// One note of a score. `midi_pitch == 0` marks a rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub syllable: String,
    pub language: Language,
    pub midi_pitch: u8,
    pub duration_frames: usize,
}

impl NoteEvent {
    pub fn is_rest(&self) -> bool {
        self.midi_pitch == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.midi_pitch > 127 {
            return Err(Error::Validation(format!(
                "pitch {} outside 0..=127",
                self.midi_pitch
            )));
        }
        if self.duration_frames == 0 {
            return Err(Error::Validation("duration must be >= 1 frame".into()));
        }
        if self.is_rest() && !self.syllable.is_empty() {
            return Err(Error::Validation(format!(
                "rest carries syllable `{}`",
                self.syllable
            )));
        }
        if !self.is_rest() && self.syllable.is_empty() {
            return Err(Error::Validation("sung note has an empty syllable".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub events: Vec<NoteEvent>,
    /// Metadata only.
    pub frame_rate_hz: f64,
}

pub const DEFAULT_FRAME_RATE_HZ: f64 = 100.0;

impl Score {
    pub fn new(events: Vec<NoteEvent>) -> Result<Self> {
        let score = Score {
            events,
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
        };
        score.validate()?;
        Ok(score)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            e.validate()
                .map_err(|err| Error::Validation(format!("event {i}: {err}")))?;
        }
        if !self.events.iter().any(|e| !e.is_rest()) {
            return Err(Error::Validation("score has no sung notes".into()));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.events.iter().map(|e| e.duration_frames).sum()
    }

    /// Serializes in the line-oriented score format.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let line = serde_json::json!({
                "syllable": e.syllable,
                "lang": e.language.code(),
                "pitch": e.midi_pitch,
                "dur": e.duration_frames,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str, line: usize) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::Parse {
        line,
        field: name.into(),
        message: "missing field".into(),
    })
}

fn int_field(obj: &serde_json::Map<String, Value>, name: &str, line: usize) -> Result<i64> {
    field(obj, name, line)?.as_i64().ok_or_else(|| Error::Parse {
        line,
        field: name.into(),
        message: "expected an integer".into(),
    })
}

/// Parses a score document: one JSON object per line, `#` lines ignored.
pub fn parse_score(document: &str) -> Result<Score> {
    let mut events = Vec::new();
    for (i, raw) in document.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            field: "<line>".into(),
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line: line_no,
            field: "<line>".into(),
            message: "expected a JSON object".into(),
        })?;
        let syllable = field(obj, "syllable", line_no)?
            .as_str()
            .ok_or_else(|| Error::Parse {
                line: line_no,
                field: "syllable".into(),
                message: "expected a string".into(),
            })?
            .to_string();
        let lang_str = field(obj, "lang", line_no)?.as_str().ok_or_else(|| Error::Parse {
            line: line_no,
            field: "lang".into(),
            message: "expected a string".into(),
        })?;
        let language = match lang_str {
            "ZH" => Language::Zh,
            "JA" => Language::Ja,
            "EN" => Language::En,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    field: "lang".into(),
                    message: format!("expected ZH, JA or EN, got `{other}`"),
                })
            }
        };
        let pitch = int_field(obj, "pitch", line_no)?;
        if !(0..=127).contains(&pitch) {
            return Err(Error::Validation(format!(
                "line {line_no}: pitch {pitch} outside 0..=127"
            )));
        }
        let dur = int_field(obj, "dur", line_no)?;
        if dur < 1 {
            return Err(Error::Validation(format!(
                "line {line_no}: duration {dur} must be >= 1 frame"
            )));
        }
        let event = NoteEvent {
            syllable,
            language,
            midi_pitch: pitch as u8,
            duration_frames: dur as usize,
        };
        event
            .validate()
            .map_err(|e| Error::Validation(format!("line {line_no}: {e}")))?;
        events.push(event);
    }
    Score::new(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_note_document() {
        let s = parse_score(r#"{"syllable": "ka", "lang": "JA", "pitch": 60, "dur": 10}"#).unwrap();
        assert_eq!(s.events.len(), 1);
        assert_eq!(s.events[0].midi_pitch, 60);
        assert_eq!(s.events[0].language, Language::Ja);
    }

    #[test]
    fn rest_event_and_comments() {
        let doc = "# header\n\n{\"syllable\": \"ka\", \"lang\": \"JA\", \"pitch\": 60, \"dur\": 10}\n{\"syllable\": \"\", \"lang\": \"JA\", \"pitch\": 0, \"dur\": 5}\n";
        let s = parse_score(doc).unwrap();
        assert!(s.events[1].is_rest());
        assert_eq!(s.events[1].duration_frames, 5);
        assert_eq!(s.total_frames(), 15);
    }

    #[test]
    fn out_of_range_pitch_is_validation_error() {
        let err = parse_score(r#"{"syllable": "ka", "lang": "JA", "pitch": 200, "dur": 10}"#).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_lines_report_line_and_field() {
        let doc = "# c\n{\"syllable\": \"ka\", \"lang\": \"JA\", \"pitch\": 60, \"dur\": 10}\n{\"syllable\": \"ka\", \"lang\": \"FR\", \"pitch\": 60, \"dur\": 10}\n";
        match parse_score(doc).unwrap_err() {
            Error::Parse { line, field, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "lang");
            }
            other => panic!("{other}"),
        }
        match parse_score("{\"syllable\": \"ka\", \"lang\": \"JA\", \"dur\": 10}").unwrap_err() {
            Error::Parse { field, .. } => assert_eq!(field, "pitch"),
            other => panic!("{other}"),
        }
        assert!(matches!(parse_score("not json").unwrap_err(), Error::Parse { line: 1, .. }));
    }

    #[test]
    fn all_rest_score_is_rejected() {
        let err = parse_score(r#"{"syllable": "", "lang": "JA", "pitch": 0, "dur": 5}"#).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn document_round_trip() {
        let doc = "{\"syllable\":\"ka\",\"lang\":\"JA\",\"pitch\":60,\"dur\":10}\n{\"syllable\":\"\",\"lang\":\"ZH\",\"pitch\":0,\"dur\":3}\n";
        let s = parse_score(doc).unwrap();
        assert_eq!(parse_score(&s.to_document()).unwrap(), s);
    }
}
