//! Passage ingestion: whitespace normalization, sentence segmentation,
//! truncation, and construction of the partial dialog that seeds inpainting.

use std::collections::HashSet;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::dialog::{Dialog, Source, Speaker, Utterance};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_SENTENCES: usize = 6;

/// Writer utterance that opens every partial dialog; `{title}` is replaced
/// by the passage title.
pub const DEFAULT_PROMPT_TEMPLATE: &str =
    "Hello, I am an automated assistant and can answer questions about {title}";

const DEFAULT_ABBREVIATIONS: &str = include_str!("../data/abbreviations.txt");

/// Passage JSONL record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub id: String,
    pub title: String,
    pub text: String,
}

pub trait SentenceSplitter: Send + Sync {
    fn split(&self, text: &str) -> Vec<String>;
}

/// Splits on `.`, `!` or `?` (optionally followed by closing quotes or
/// brackets) when the next token starts with an uppercase letter, a digit
/// or an opening quote. A single `.` after a listed abbreviation or a lone
/// capital letter (an initial) does not split.
#[derive(Debug, Clone)]
pub struct RuleSplitter {
    abbreviations: HashSet<String>,
}

impl RuleSplitter {
    pub fn new(abbreviations: impl IntoIterator<Item = String>) -> Self {
        Self {
            abbreviations: abbreviations
                .into_iter()
                .map(|a| a.trim().trim_end_matches('.').to_lowercase())
                .filter(|a| !a.is_empty())
                .collect(),
        }
    }

    /// Parses an abbreviation list: one entry per line, `#` comments.
    pub fn from_list(list: &str) -> Self {
        Self::new(
            list.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from),
        )
    }

    fn is_abbreviation(&self, word: &str) -> bool {
        let word = word.trim_start_matches(|c: char| OPENERS.contains(&c) || c == '[');
        let mut chars = word.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            if c.is_uppercase() {
                return true;
            }
        }
        self.abbreviations.contains(&word.to_lowercase())
    }
}

impl Default for RuleSplitter {
    fn default() -> Self {
        static DEFAULT: LazyLock<RuleSplitter> =
            LazyLock::new(|| RuleSplitter::from_list(DEFAULT_ABBREVIATIONS));
        DEFAULT.clone()
    }
}

const TERMINALS: [char; 3] = ['.', '!', '?'];
const CLOSERS: [char; 6] = ['"', '\'', '”', '’', ')', ']'];
const OPENERS: [char; 5] = ['"', '\'', '“', '‘', '('];

impl SentenceSplitter for RuleSplitter {
    fn split(&self, text: &str) -> Vec<String> {
        let text = normalize_whitespace(text);
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut out = Vec::new();
        let mut start = 0usize;
        let mut i = 0usize;
        while i < chars.len() {
            if !TERMINALS.contains(&chars[i].1) {
                i += 1;
                continue;
            }
            let run_start = i;
            while i < chars.len() && TERMINALS.contains(&chars[i].1) {
                i += 1;
            }
            let single_period = i - run_start == 1 && chars[run_start].1 == '.';
            while i < chars.len() && CLOSERS.contains(&chars[i].1) {
                i += 1;
            }
            // normalized text: exactly one space between tokens
            let boundary = i + 1 < chars.len()
                && chars[i].1 == ' '
                && starts_sentence(chars[i + 1].1);
            if !boundary {
                continue;
            }
            if single_period {
                let word_start = text[..chars[run_start].0]
                    .rfind(' ')
                    .map_or(start, |p| p + 1)
                    .max(start);
                if self.is_abbreviation(&text[word_start..chars[run_start].0]) {
                    continue;
                }
            }
            let end = chars[i].0;
            out.push(text[start..end].to_string());
            start = chars[i + 1].0;
            i += 1;
        }
        if start < text.len() {
            out.push(text[start..].to_string());
        }
        out
    }
}

fn starts_sentence(c: char) -> bool {
    c.is_uppercase() || c.is_ascii_digit() || OPENERS.contains(&c)
}

pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn split_sentences(text: &str) -> Vec<String> {
    RuleSplitter::default().split(text)
}

pub fn truncate(sentences: &[String], max_sentences: usize) -> Result<Vec<String>> {
    if max_sentences == 0 {
        return Err(Error::Config("max_sentences must be at least 1".into()));
    }
    Ok(sentences.iter().take(max_sentences).cloned().collect())
}

/// A titled passage with its (possibly truncated) sentence list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
    pub sentences: Vec<String>,
}

impl Passage {
    /// Segments and truncates `record.text`. Text containing the mask
    /// literal is rejected.
    pub fn from_record(
        record: &PassageRecord,
        splitter: &dyn SentenceSplitter,
        max_sentences: usize,
        mask: &str,
    ) -> Result<Self> {
        reject_literal(&record.text, mask, &record.id)?;
        reject_literal(&record.title, mask, &record.id)?;
        let sentences = truncate(&splitter.split(&record.text), max_sentences)?;
        Ok(Self {
            id: record.id.clone(),
            title: record.title.clone(),
            text: record.text.clone(),
            sentences,
        })
    }

    /// Passage whose segmentation is already known.
    pub fn from_sentences(
        id: impl Into<String>,
        title: impl Into<String>,
        sentences: Vec<String>,
        mask: &str,
    ) -> Result<Self> {
        let id = id.into();
        for s in &sentences {
            reject_literal(s, mask, &id)?;
        }
        Ok(Self {
            text: sentences.join(" "),
            id,
            title: title.into(),
            sentences,
        })
    }
}

fn reject_literal(text: &str, mask: &str, id: &str) -> Result<()> {
    if !mask.is_empty() && text.contains(mask) {
        return Err(Error::ReservedLiteral {
            literal: mask.to_string(),
            context: format!("passage {id}"),
        });
    }
    Ok(())
}

pub fn prompt_text(template: &str, title: &str) -> String {
    template.replace("{title}", title)
}

/// `(prompt, mask, s_1, mask, s_2, ..., mask, s_m)`.
pub fn build_partial_dialog(p: &Passage, prompt_template: &str, mask: &str) -> Result<Dialog> {
    if p.sentences.is_empty() {
        return Err(Error::EmptyPassage(p.id.clone()));
    }
    let mut utterances = Vec::with_capacity(2 * p.sentences.len() + 1);
    utterances.push(Utterance::new(
        Speaker::Writer,
        prompt_text(prompt_template, &p.title),
        Source::Prompt,
    ));
    for s in &p.sentences {
        utterances.push(Utterance::masked(Speaker::Reader, mask));
        utterances.push(Utterance::new(Speaker::Writer, s.clone(), Source::Sentence));
    }
    Ok(Dialog {
        id: p.id.clone(),
        title: p.title.clone(),
        passage_id: Some(p.id.clone()),
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialog::MASK;
    use proptest::prelude::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn plain_sentences() {
        assert_eq!(split_sentences("A b. C d."), strings(&["A b.", "C d."]));
        assert_eq!(split_sentences("One sentence only"), strings(&["One sentence only"]));
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   \n ").is_empty());
    }

    #[test]
    fn abbreviations_and_initials() {
        assert_eq!(
            split_sentences("Dr. Smith arrived. He left."),
            strings(&["Dr. Smith arrived.", "He left."])
        );
        assert_eq!(
            split_sentences("He moved to the U.S. In 1990 he returned."),
            strings(&["He moved to the U.S. In 1990 he returned."])
        );
        assert_eq!(
            split_sentences("George B. McClellan led. Lee retreated."),
            strings(&["George B. McClellan led.", "Lee retreated."])
        );
    }

    #[test]
    fn punctuation_variants() {
        assert_eq!(
            split_sentences("Is it? Yes! \"Quoted.\" Then 3 more. ok then."),
            strings(&["Is it?", "Yes!", "\"Quoted.\"", "Then 3 more. ok then."])
        );
        assert_eq!(
            split_sentences("It cost 2.5 billion. Wait... Really?!  Sure."),
            strings(&["It cost 2.5 billion.", "Wait...", "Really?!", "Sure."])
        );
    }

    #[test]
    fn whitespace_is_normalized() {
        assert_eq!(
            split_sentences("  A  b.\n\tC\u{a0}d.  "),
            strings(&["A b.", "C d."])
        );
    }

    #[test]
    fn european_school_passage() {
        let text = "The European School, Munich (ESM) is one of thirteen European Schools and one of three in Germany. First established in 1977, it moved to its current location in Neuperlach, a district in the south-east of Munich, in the state of Bavaria in 1981. The ESM was principally established to serve the schooling needs of children of the staff of the European Patent Office (EPO) – the executive body of the European Patent Organisation. However, enrolment is open to other prospective students. The school offers the European Baccalaureate as its secondary leaving qualification.";
        let s = split_sentences(text);
        assert_eq!(s.len(), 5);
        assert!(s[3] == "However, enrolment is open to other prospective students.");
    }

    #[test]
    fn truncation() {
        let eight: Vec<String> = (1..=8).map(|i| format!("S{i}.")).collect();
        assert_eq!(truncate(&eight, 6).unwrap(), eight[..6].to_vec());
        assert_eq!(truncate(&eight[..3], 6).unwrap(), eight[..3].to_vec());
        assert_eq!(truncate(&eight, 1).unwrap(), eight[..1].to_vec());
        assert!(truncate(&eight, 0).is_err());
    }

    #[test]
    fn partial_dialog_shape() {
        let p = Passage::from_sentences("p", "FAQ", strings(&["S1.", "S2.", "S3."]), MASK).unwrap();
        let d = build_partial_dialog(&p, DEFAULT_PROMPT_TEMPLATE, MASK).unwrap();
        assert_eq!(d.len(), 7);
        assert_eq!(
            d.utterances[0].text,
            "Hello, I am an automated assistant and can answer questions about FAQ"
        );
        assert_eq!(d.utterances[0].source, Source::Prompt);
        assert_eq!(d.masked_indices(), vec![2, 4, 6]);
        for (k, s) in p.sentences.iter().enumerate() {
            let u = &d.utterances[2 * k + 2];
            assert_eq!(&u.text, s);
            assert_eq!(u.speaker, Speaker::Writer);
            assert_eq!(u.source, Source::Sentence);
        }

        let one = Passage::from_sentences("p", "t", strings(&["Only."]), MASK).unwrap();
        assert_eq!(build_partial_dialog(&one, "{title}", MASK).unwrap().len(), 3);

        let empty = Passage::from_sentences("p", "t", vec![], MASK).unwrap();
        assert!(matches!(
            build_partial_dialog(&empty, "{title}", MASK),
            Err(Error::EmptyPassage(_))
        ));
    }

    #[test]
    fn mask_literal_rejected_at_ingestion() {
        let rec = PassageRecord {
            id: "p".into(),
            title: "t".into(),
            text: "A ⋄ b. C.".into(),
        };
        let err = Passage::from_record(&rec, &RuleSplitter::default(), 6, MASK).unwrap_err();
        assert!(matches!(err, Error::ReservedLiteral { .. }));
    }

    proptest! {
        #[test]
        fn resplitting_is_idempotent(words in prop::collection::vec(
            prop_oneof![
                "[A-Za-z]{1,8}", "[A-Z][a-z]{0,6}[.?!]", "[a-z]{1,5}\\.", "Dr\\.", "U\\.S\\.",
                "[0-9]{1,3}", "\"[A-Z][a-z]{0,4}\\.\"", "[A-Z]\\.",
            ],
            0..40,
        )) {
            let text = words.join(" ");
            let first = split_sentences(&text);
            prop_assert!(first.iter().all(|s| !s.is_empty()));
            prop_assert_eq!(first.join(" "), normalize_whitespace(&text));
            let again = split_sentences(&first.join(" "));
            prop_assert_eq!(again, first);
        }
    }
}
