//! Retriever training examples from inpainted dialogs.
//!
//! A prefix ending in question `û_i` is paired with the sentences that follow
//! it, `s_{i+1} .. s_m`. Sentences the query has already seen never reach the
//! positive, so the retriever cannot win by string matching.

use serde::{Deserialize, Serialize};

use crate::dialog::{Dialog, Source, Speaker};
use crate::error::{Error, Result};

pub const DEFAULT_SEPARATOR: &str = " | ";
pub const MAX_QUERY_CHARS_WITH_ANSWERS: usize = 512;
pub const MAX_QUERY_CHARS_QUESTIONS_ONLY: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalExample {
    /// Oldest first; always ends with a generated question.
    pub query_turns: Vec<String>,
    pub positive_text: String,
    pub passage_id: String,
    /// Number of questions in the prefix (1-based).
    pub prefix_index: usize,
}

impl RetrievalExample {
    pub fn query_id(&self) -> String {
        format!("{}#{}", self.passage_id, self.prefix_index)
    }
}

/// Retrieval JSONL record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query: String,
    pub positive: String,
    pub passage_id: String,
    pub i: usize,
}

impl RetrievalRecord {
    pub fn query_id(&self) -> String {
        format!("{}#{}", self.passage_id, self.i)
    }
}

#[derive(Debug, Clone)]
pub struct QueryFormat {
    pub lowercase: bool,
    pub max_chars: usize,
    pub separator: String,
}

impl QueryFormat {
    pub fn for_mode(include_answers: bool) -> Self {
        Self {
            lowercase: true,
            max_chars: if include_answers {
                MAX_QUERY_CHARS_WITH_ANSWERS
            } else {
                MAX_QUERY_CHARS_QUESTIONS_ONLY
            },
            separator: DEFAULT_SEPARATOR.to_string(),
        }
    }
}

/// Splits a completed dialog into `(prompt, [(question, sentence)])`.
fn question_answer_pairs(d: &Dialog) -> Result<Vec<(&str, &str)>> {
    let shape_err = |message: String| Error::DialogShape {
        dialog_id: d.id.clone(),
        message,
    };
    let (prompt, rest) = d
        .utterances
        .split_first()
        .ok_or_else(|| shape_err("empty dialog".into()))?;
    if prompt.source != Source::Prompt || prompt.speaker != Speaker::Writer {
        return Err(shape_err("turn 1 must be the writer's prompt".into()));
    }
    if rest.is_empty() || rest.len() % 2 != 0 {
        return Err(shape_err(format!(
            "expected alternating question/sentence turns after the prompt, got {} turns",
            rest.len()
        )));
    }
    rest.chunks(2)
        .enumerate()
        .map(|(k, pair)| {
            let (q, s) = (&pair[0], &pair[1]);
            if q.speaker != Speaker::Reader || q.source != Source::Generated {
                return Err(shape_err(format!("turn {} must be a generated question", 2 * k + 2)));
            }
            if s.speaker != Speaker::Writer || s.source != Source::Sentence {
                return Err(shape_err(format!("turn {} must be a passage sentence", 2 * k + 3)));
            }
            Ok((q.text.as_str(), s.text.as_str()))
        })
        .collect()
}

/// One example per prefix `i = 1..m-1`; `i = m` has no remaining sentences
/// and is skipped. The prompt never enters the query.
pub fn build_examples(d: &Dialog, include_answers: bool) -> Result<Vec<RetrievalExample>> {
    let pairs = question_answer_pairs(d)?;
    let m = pairs.len();
    let mut out = Vec::with_capacity(m.saturating_sub(1));
    for i in 1..m {
        let mut query_turns = Vec::new();
        for (k, (q, s)) in pairs[..i].iter().enumerate() {
            query_turns.push(q.to_string());
            if include_answers && k + 1 < i {
                query_turns.push(s.to_string());
            }
        }
        let positive_text = pairs[i..]
            .iter()
            .map(|(_, s)| *s)
            .collect::<Vec<_>>()
            .join(" ");
        out.push(RetrievalExample {
            query_turns,
            positive_text,
            passage_id: d.source_passage_id().to_string(),
            prefix_index: i,
        });
    }
    Ok(out)
}

/// Joins turns with the separator, optionally lowercases, then drops the
/// oldest turns until the string fits in `max_chars` characters. A newest
/// turn that alone exceeds the budget keeps only its trailing characters.
pub fn format_query(turns: &[String], format: &QueryFormat) -> String {
    let render = |t: &str| {
        if format.lowercase {
            t.to_lowercase()
        } else {
            t.to_string()
        }
    };
    let turns: Vec<String> = turns.iter().map(|t| render(t)).collect();
    let sep_len = format.separator.chars().count();
    let mut start = turns.len();
    let mut len = 0usize;
    while start > 0 {
        let extra = turns[start - 1].chars().count() + if start < turns.len() { sep_len } else { 0 };
        if len + extra > format.max_chars {
            break;
        }
        len += extra;
        start -= 1;
    }
    if start == turns.len() {
        let Some(last) = turns.last() else {
            return String::new();
        };
        let n = last.chars().count();
        return last.chars().skip(n.saturating_sub(format.max_chars)).collect();
    }
    turns[start..].join(&format.separator)
}

pub fn to_record(ex: &RetrievalExample, format: &QueryFormat) -> RetrievalRecord {
    RetrievalRecord {
        query: format_query(&ex.query_turns, format),
        positive: if format.lowercase {
            ex.positive_text.to_lowercase()
        } else {
            ex.positive_text.clone()
        },
        passage_id: ex.passage_id.clone(),
        i: ex.prefix_index,
    }
}

/// Formatted records for every example of every dialog, in order.
pub fn records_for_dialogs(dialogs: &[Dialog], include_answers: bool) -> Result<Vec<RetrievalRecord>> {
    let format = QueryFormat::for_mode(include_answers);
    let mut out = Vec::new();
    for d in dialogs {
        out.extend(build_examples(d, include_answers)?.iter().map(|ex| to_record(ex, &format)));
    }
    Ok(out)
}
