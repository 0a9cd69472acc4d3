//! Dialog representation, masking and the speaker-prefixed serialization
//! consumed by generator backends.
//!
//! Turn indices in this module's public API are 1-based.
//!
//! Serialization is write-only: utterance text is not escaped, so a text
//! containing a sequence such as `" 1:"` cannot be told apart from a segment
//! boundary. Ingestion rejects the mask literal, but colon patterns are
//! allowed through; never try to parse a serialized dialog back.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default mask glyph.
pub const MASK: &str = "⋄";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Speaker {
    /// The document author, who answers (`0`).
    Writer,
    /// The imagined reader, who asks (`1`).
    Reader,
}

impl Speaker {
    pub fn id(self) -> u8 {
        match self {
            Speaker::Writer => 0,
            Speaker::Reader => 1,
        }
    }
}

impl TryFrom<u8> for Speaker {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            0 => Ok(Speaker::Writer),
            1 => Ok(Speaker::Reader),
            other => Err(format!("speaker must be 0 or 1, got {other}")),
        }
    }
}

impl From<Speaker> for u8 {
    fn from(s: Speaker) -> u8 {
        s.id()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Prompt,
    Sentence,
    Generated,
    Masked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub source: Source,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>, source: Source) -> Self {
        Self {
            speaker,
            text: text.into(),
            source,
        }
    }

    pub fn masked(speaker: Speaker, mask: &str) -> Self {
        Self::new(speaker, mask, Source::Masked)
    }

    pub fn is_masked(&self) -> bool {
        self.source == Source::Masked
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub title: String,
    pub passage_id: Option<String>,
    pub utterances: Vec<Utterance>,
}

impl Dialog {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Turn at a 1-based index.
    pub fn turn(&self, index: usize) -> Result<&Utterance> {
        index
            .checked_sub(1)
            .and_then(|i| self.utterances.get(i))
            .ok_or(Error::TurnOutOfRange {
                index,
                len: self.len(),
            })
    }

    /// 1-based indices of masked turns.
    pub fn masked_indices(&self) -> Vec<usize> {
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.is_masked())
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Passage id if set, otherwise the dialog id.
    pub fn source_passage_id(&self) -> &str {
        self.passage_id.as_deref().unwrap_or(&self.id)
    }
}

/// A non-empty set of 1-based turn indices to mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    indices: BTreeSet<usize>,
}

impl MaskSpec {
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let indices: BTreeSet<usize> = indices.into_iter().collect();
        if indices.is_empty() {
            return Err(Error::InvalidMask("mask spec is empty".into()));
        }
        if indices.contains(&0) {
            return Err(Error::InvalidMask("turn indices are 1-based".into()));
        }
        Ok(Self { indices })
    }

    pub fn single(index: usize) -> Result<Self> {
        Self::new([index])
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn check(&self, len: usize) -> Result<()> {
        match self.indices.iter().next_back() {
            Some(&max) if max > len => Err(Error::InvalidMask(format!(
                "turn {max} out of range for dialog of length {len}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Copy of `d` with every turn in `spec` replaced by the mask literal.
pub fn mask_utterances(d: &Dialog, spec: &MaskSpec, mask: &str) -> Result<Dialog> {
    spec.check(d.len())?;
    let mut out = d.clone();
    for index in spec.indices() {
        let u = &mut out.utterances[index - 1];
        u.text = mask.to_string();
        u.source = Source::Masked;
    }
    Ok(out)
}

/// Renders `"speaker:text"` segments joined by single spaces. Masked turns
/// render as `"speaker:<mask>"` whatever their stored text.
pub fn serialize(d: &Dialog, mask: &str) -> String {
    let mut out = String::new();
    for (i, u) in d.utterances.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(if u.speaker == Speaker::Writer { "0:" } else { "1:" });
        out.push_str(if u.is_masked() { mask } else { &u.text });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// 1-based turn index; 0 for dialog-level rules.
    pub turn: usize,
    pub rule: &'static str,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.turn == 0 {
            write!(f, "dialog: {}", self.rule)
        } else {
            write!(f, "turn {}: {}", self.turn, self.rule)
        }
    }
}

pub fn validate(d: &Dialog, mask: &str) -> Vec<Violation> {
    let mut out = Vec::new();
    if d.utterances.is_empty() {
        out.push(Violation {
            turn: 0,
            rule: "dialog has no utterances",
        });
    }
    for (i, u) in d.utterances.iter().enumerate() {
        let turn = i + 1;
        let is_mask_text = u.text == mask;
        if u.is_masked() && !is_mask_text {
            out.push(Violation {
                turn,
                rule: "masked turn must carry the mask literal",
            });
        }
        if !u.is_masked() && is_mask_text {
            out.push(Violation {
                turn,
                rule: "mask literal on a turn not marked masked",
            });
        }
        if !u.is_masked() && u.text.is_empty() {
            out.push(Violation {
                turn,
                rule: "unmasked turn has empty text",
            });
        }
        if u.source == Source::Prompt && u.speaker != Speaker::Writer {
            out.push(Violation {
                turn,
                rule: "prompt turn must be spoken by the writer",
            });
        }
    }
    out
}
