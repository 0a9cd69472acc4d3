//! Small bundled corpora: transcribed example dialogs and the seeded
//! sensitive-term lexicon.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::dialog::{Dialog, Speaker};
use crate::error::Result;
use crate::passage::{Passage, PassageRecord};

const DIALOGS: &str = include_str!("../data/fixtures.jsonl");
pub(crate) const LEXICON: &str = include_str!("../data/sensitive_lexicon.json");

/// Twelve complete dialogs: four articles, three inpainter variants each.
/// Ids look like `european-school-munich/stoq`.
pub fn example_dialogs() -> Vec<Dialog> {
    crate::jsonl::parse_lines(DIALOGS.as_bytes(), "fixtures.jsonl").expect("bundled fixtures parse")
}

/// The source passage of a fixture dialog, rebuilt from its writer turns.
pub fn passage_of(d: &Dialog, mask: &str) -> Result<Passage> {
    let sentences = d
        .utterances
        .iter()
        .skip(1)
        .filter(|u| u.speaker == Speaker::Writer)
        .map(|u| u.text.clone())
        .collect();
    Passage::from_sentences(d.source_passage_id(), d.title.clone(), sentences, mask)
}

/// Synthetic corpus with pairwise-disjoint vocabularies. Each passage owns
/// `words` tokens and every sentence is a shuffled arrangement of all of
/// them, closed by the shared token `stop.`. Titles (`topicNN`) never occur
/// in any text.
pub fn toy_passages(count: usize, words: usize, sentences: usize, seed: u64) -> Vec<PassageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let vocab: Vec<String> = (0..words).map(|j| format!("p{i}w{j}")).collect();
            let text = (0..sentences)
                .map(|_| {
                    let mut s = vocab.clone();
                    s.shuffle(&mut rng);
                    s[0] = s[0].to_uppercase();
                    format!("{} stop.", s.join(" "))
                })
                .collect::<Vec<_>>()
                .join(" ");
            PassageRecord {
                id: format!("toy{i:03}"),
                title: format!("topic{i:03}"),
                text,
            }
        })
        .collect()
}
