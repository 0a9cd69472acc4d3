//! Dataset analysis: question-type buckets, Krippendorff's alpha and
//! sensitive-term scanning.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dialog::{Dialog, Speaker};
use crate::error::{Error, Result};

fn is_question(u: &crate::dialog::Utterance) -> bool {
    u.speaker == Speaker::Reader && !u.is_masked()
}

/// First two words, lowercased, with leading/trailing ASCII punctuation
/// removed.
pub fn question_type(text: &str) -> String {
    let lower = text.to_lowercase();
    lower
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()))
        .filter(|t| !t.is_empty())
        .take(2)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BucketCount {
    /// 1-based position among the dialog's questions.
    pub turn: usize,
    pub bucket: String,
    pub count: usize,
}

pub fn question_distribution(dialogs: &[Dialog]) -> Vec<BucketCount> {
    let mut counts: BTreeMap<(usize, String), usize> = BTreeMap::new();
    for d in dialogs {
        for (i, u) in d.utterances.iter().filter(|u| is_question(u)).enumerate() {
            *counts.entry((i + 1, question_type(&u.text))).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|((turn, bucket), count)| BucketCount { turn, bucket, count })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_distribution_csv(w: &mut impl Write, rows: &[BucketCount]) -> Result<()> {
    writeln!(w, "turn,bucket,count")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.turn, csv_field(&r.bucket), r.count)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Nominal,
    Ordinal,
}

/// Items × raters; `None` is a missing rating.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    pub rows: Vec<Vec<Option<String>>>,
    pub scale: Scale,
}

impl RatingMatrix {
    pub fn new(rows: Vec<Vec<Option<String>>>, scale: Scale) -> Result<Self> {
        let raters = rows.first().map_or(0, Vec::len);
        if raters < 2 {
            return Err(Error::Config("need at least two raters".into()));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != raters) {
            return Err(Error::Config(format!("item {} has {} ratings, expected {raters}", i + 1, rows[i].len())));
        }
        Ok(Self { rows, scale })
    }

    /// CSV with one item per line and one column per rater; empty cells are
    /// missing. A header line is not expected.
    pub fn parse_csv(text: &str, scale: Scale) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| {
                        let c = c.trim();
                        (!c.is_empty() && c != "NA").then(|| c.to_string())
                    })
                    .collect()
            })
            .collect();
        Self::new(rows, scale)
    }
}

/// Categories in scale order: numeric when every label parses as a number,
/// otherwise lexicographic.
fn ordered_categories(labels: impl Iterator<Item = String>) -> Vec<String> {
    let mut cats: Vec<String> = labels.collect::<BTreeSet<_>>().into_iter().collect();
    if cats.iter().all(|c| c.parse::<f64>().is_ok()) {
        cats.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    cats
}

/// `1 - D_o / D_e` from the coincidence matrix. Items with fewer than two
/// ratings are not pairable and are ignored.
pub fn krippendorff_alpha(m: &RatingMatrix) -> Result<f64> {
    let units: Vec<Vec<&str>> = m
        .rows
        .iter()
        .map(|r| r.iter().flatten().map(String::as_str).collect::<Vec<_>>())
        .filter(|u| u.len() >= 2)
        .collect();
    if units.len() < 2 {
        return Err(Error::UndefinedAgreement(format!(
            "{} pairable item(s); at least 2 are needed",
            units.len()
        )));
    }
    let cats = ordered_categories(units.iter().flatten().map(|s| s.to_string()));
    let pos: HashMap<&str, usize> = cats.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let c = cats.len();
    let mut o = vec![vec![0.0f64; c]; c];
    for u in &units {
        let w = 1.0 / (u.len() - 1) as f64;
        for (i, a) in u.iter().enumerate() {
            for (j, b) in u.iter().enumerate() {
                if i != j {
                    o[pos[a]][pos[b]] += w;
                }
            }
        }
    }
    let n_c: Vec<f64> = o.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = n_c.iter().sum();
    let delta = |a: usize, b: usize| -> f64 {
        match m.scale {
            Scale::Nominal => f64::from(u8::from(a != b)),
            Scale::Ordinal => {
                let (lo, hi) = (a.min(b), a.max(b));
                let s: f64 = n_c[lo..=hi].iter().sum::<f64>() - (n_c[a] + n_c[b]) / 2.0;
                s * s
            }
        }
    };
    let mut observed = 0.0;
    let mut expected = 0.0;
    for a in 0..c {
        for b in 0..c {
            let d = delta(a, b);
            observed += o[a][b] * d;
            expected += n_c[a] * n_c[b] * d;
        }
    }
    if expected <= 0.0 {
        return Err(Error::UndefinedAgreement("no expected disagreement (a single category)".into()));
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

/// Identity categories and adjective classes with the pairs to check.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SensitiveLexicon {
    pub identity: BTreeMap<String, Vec<String>>,
    pub adjectives: BTreeMap<String, Vec<String>>,
    /// `[identity category, adjective class]` pairs.
    pub interactions: Vec<(String, String)>,
}

impl SensitiveLexicon {
    /// The bundled example lexicon. It is a small placeholder following the
    /// category × class layout, not a curated term list.
    pub fn seeded() -> Self {
        Self::from_json(crate::fixtures::LEXICON).expect("bundled lexicon is valid")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let lex: Self = serde_json::from_str(json)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(Error::at(path))?)
    }

    pub fn validate(&self) -> Result<()> {
        for (group, terms) in self.identity.iter().chain(&self.adjectives) {
            if let Some(t) = terms.iter().find(|t| **t != t.to_lowercase() || t.trim().is_empty()) {
                return Err(Error::Config(format!("term {t:?} in {group} must be non-empty lowercase")));
            }
        }
        for (cat, class) in &self.interactions {
            if !self.identity.contains_key(cat) {
                return Err(Error::Config(format!("interaction names unknown identity category {cat:?}")));
            }
            if !self.adjectives.contains_key(class) {
                return Err(Error::Config(format!("interaction names unknown adjective class {class:?}")));
            }
        }
        Ok(())
    }
}

/// Lowercased alphanumeric runs.
fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn contains_term(haystack: &[String], term: &str) -> bool {
    let needle = words(term);
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle.as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanMode {
    #[default]
    CoOccurrence,
    NotInPassage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TermMatch {
    pub identity_term: String,
    pub category: String,
    pub adjective_term: String,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Flag {
    pub dialog_id: String,
    /// 1-based dialog turn.
    pub turn: usize,
    pub question: String,
    pub matches: Vec<TermMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanReport {
    pub flags: Vec<Flag>,
    pub flagged_dialogs: Vec<String>,
    pub questions: usize,
    pub dialogs: usize,
    pub question_rate: f64,
    pub dialog_rate: f64,
}

fn rate(k: usize, n: usize) -> f64 {
    if n == 0 { 0.0 } else { k as f64 / n as f64 }
}

/// Flags questions containing an identity term and an adjective term whose
/// (category, class) pair is enabled. In not-in-passage mode the identity
/// term must also be absent from the dialog's source passage, looked up in
/// `passages` by passage id.
pub fn scan_sensitive(
    dialogs: &[Dialog],
    lexicon: &SensitiveLexicon,
    passages: Option<&HashMap<String, String>>,
    mode: ScanMode,
) -> Result<ScanReport> {
    if mode == ScanMode::NotInPassage && passages.is_none() {
        return Err(Error::Config("not-in-passage mode needs passages".into()));
    }
    let mut flags = Vec::new();
    let mut flagged_dialogs = Vec::new();
    let mut questions = 0;
    for d in dialogs {
        let passage_words = match (mode, passages) {
            (ScanMode::NotInPassage, Some(p)) => {
                let text = p.get(d.source_passage_id()).ok_or_else(|| {
                    Error::Config(format!("no passage {:?} for dialog {}", d.source_passage_id(), d.id))
                })?;
                Some(words(text))
            }
            _ => None,
        };
        let mut any = false;
        for (i, u) in d.utterances.iter().enumerate() {
            if !is_question(u) {
                continue;
            }
            questions += 1;
            let tokens = words(&u.text);
            let mut matches = Vec::new();
            for (cat, class) in &lexicon.interactions {
                let ids = lexicon.identity[cat].iter().filter(|t| {
                    contains_term(&tokens, t) && passage_words.as_ref().is_none_or(|pw| !contains_term(pw, t))
                });
                for id_term in ids {
                    for adj in lexicon.adjectives[class].iter().filter(|t| contains_term(&tokens, t)) {
                        matches.push(TermMatch {
                            identity_term: id_term.clone(),
                            category: cat.clone(),
                            adjective_term: adj.clone(),
                            class: class.clone(),
                        });
                    }
                }
            }
            if !matches.is_empty() {
                any = true;
                flags.push(Flag {
                    dialog_id: d.id.clone(),
                    turn: i + 1,
                    question: u.text.clone(),
                    matches,
                });
            }
        }
        if any {
            flagged_dialogs.push(d.id.clone());
        }
    }
    Ok(ScanReport {
        question_rate: rate(flags.len(), questions),
        dialog_rate: rate(flagged_dialogs.len(), dialogs.len()),
        flags,
        flagged_dialogs,
        questions,
        dialogs: dialogs.len(),
    })
}
