//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};

use inpaint_core::dialog::MASK;
use inpaint_core::encoder::{
    contrastive_grad, contrastive_loss, reranker_grad, reranker_loss, EncoderConfig, EncoderParams,
    RerankerParams, TrainingPair, Vocab,
};
use inpaint_core::fixtures::toy_passages;
use inpaint_core::inpainter::{inpaint_document, InpaintConfig, StubBackend};
use inpaint_core::metrics::{Qrels, RankedDoc, RunRanking};
use inpaint_core::passage::{Passage, PassageRecord, RuleSplitter};
use inpaint_core::retrieval_data::{records_for_dialogs, RetrievalRecord};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries whose true
/// gradient is zero from dividing round-off by round-off.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn central_difference(m: &mut Array2<f64>, idx: (usize, usize), mut f: impl FnMut(&Array2<f64>) -> f64) -> f64 {
    let orig = m[idx];
    m[idx] = orig + FD_STEP;
    let plus = f(m);
    m[idx] = orig - FD_STEP;
    let minus = f(m);
    m[idx] = orig;
    (plus - minus) / (2.0 * FD_STEP)
}

/// Max relative error over every entry of every parameter block.
fn max_block_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * scale.max(1e-12);
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_error(a, n, floor))
        .fold(0.0, f64::max)
}

fn random_text(rng: &mut ChaCha8Rng, words: &[&str]) -> String {
    let n = rng.random_range(1..=5);
    (0..n).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

const WORDS: &[&str] = &["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "oov1", "oov2"];

fn small_vocab() -> Vocab {
    Vocab::from_texts(["alpha beta gamma delta eps zeta eta theta"], 4).unwrap()
}

fn config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        embed_dim: 8,
        output_dim: 8,
        hash_buckets: 4,
        seed,
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, size: usize) -> Vec<TrainingPair> {
    (0..size)
        .map(|i| TrainingPair::new(random_text(rng, WORDS), random_text(rng, WORDS), format!("p{i}")))
        .collect()
}

/// Initialization rescaled so entries have standard deviation `std`.
fn rescale(m: &mut Array2<f64>, std: f64) {
    *m *= std / inpaint_core::encoder::INIT_STD;
}

/// Finite-difference check of the contrastive gradient at a seeded random
/// point whose parameters have standard deviation `std`.
pub fn encoder_gradient_error(seed: u64, batch_size: usize, tau: f64, std: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = EncoderParams::init(small_vocab(), &config(seed)).unwrap();
    rescale(&mut params.table, std);
    rescale(&mut params.projection, std);
    let batch = random_batch(&mut rng, batch_size);
    let (_, grad) = contrastive_grad(&params, &batch, tau).unwrap();

    let mut numeric_table = Array2::zeros(params.table.dim());
    for idx in ndarray::indices(params.table.dim()) {
        let proj = params.projection.clone();
        let vocab = params.vocab.clone();
        let seed = params.seed;
        numeric_table[idx] = central_difference(&mut params.table, idx, |t| {
            let p = EncoderParams { vocab: vocab.clone(), seed, table: t.clone(), projection: proj.clone() };
            contrastive_loss(&p, &batch, tau).unwrap().loss
        });
    }
    let mut numeric_proj = Array2::zeros(params.projection.dim());
    for idx in ndarray::indices(params.projection.dim()) {
        let table = params.table.clone();
        let vocab = params.vocab.clone();
        let seed = params.seed;
        numeric_proj[idx] = central_difference(&mut params.projection, idx, |pr| {
            let p = EncoderParams { vocab: vocab.clone(), seed, table: table.clone(), projection: pr.clone() };
            contrastive_loss(&p, &batch, tau).unwrap().loss
        });
    }
    max_block_error(&grad.table, &numeric_table).max(max_block_error(&grad.projection, &numeric_proj))
}

fn reranker_params(seed: u64, std: f64) -> RerankerParams {
    let mut p = RerankerParams::init(small_vocab(), &config(seed)).unwrap();
    rescale(&mut p.table, std);
    rescale(&mut p.projection, std);
    rescale(&mut p.gates, std);
    p.weight *= std / inpaint_core::encoder::INIT_STD;
    p
}

fn reranker_entry(p: &mut RerankerParams, block: usize, idx: (usize, usize)) -> &mut f64 {
    match block {
        0 => &mut p.table[idx],
        1 => &mut p.projection[idx],
        2 => &mut p.gates[idx],
        _ => &mut p.weight[idx.1],
    }
}

/// Finite-difference check of the reranker gradient with `negatives`
/// random negatives, at a point scaled like [`encoder_gradient_error`].
pub fn reranker_gradient_error(seed: u64, negatives: usize, std: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let params = reranker_params(seed, std);
    let q = random_text(&mut rng, WORDS);
    let pos = random_text(&mut rng, WORDS);
    let negs: Vec<String> = (0..negatives).map(|_| random_text(&mut rng, WORDS)).collect();
    let (_, grad) = reranker_grad(&params, &q, &pos, &negs).unwrap();
    let loss = |p: &RerankerParams| reranker_loss(p, &q, &pos, &negs).unwrap();

    let mut worst = 0.0f64;
    for block in 0..4 {
        let analytic: Array2<f64> = match block {
            0 => grad.table.clone(),
            1 => grad.projection.clone(),
            2 => grad.gates.clone(),
            _ => grad.weight.clone().insert_axis(ndarray::Axis(0)),
        };
        let mut numeric = Array2::zeros(analytic.dim());
        for idx in ndarray::indices(analytic.dim()) {
            let mut p = params.clone();
            let orig = *reranker_entry(&mut p, block, idx);
            *reranker_entry(&mut p, block, idx) = orig + FD_STEP;
            let plus = loss(&p);
            *reranker_entry(&mut p, block, idx) = orig - FD_STEP;
            let minus = loss(&p);
            numeric[idx] = (plus - minus) / (2.0 * FD_STEP);
        }
        worst = worst.max(max_block_error(&analytic, &numeric));
    }
    worst
}

// ---- metrics ----

/// A run as plain rows `(query, doc)` in rank order, plus graded qrels rows.
#[derive(Debug, Clone)]
pub struct RawInstance {
    pub run: Vec<(String, Vec<String>)>,
    pub qrels: Vec<(String, String, u32)>,
}

impl RawInstance {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let queries = rng.random_range(1..=50);
        let docs = rng.random_range(5..=200);
        let mut run = Vec::new();
        let mut qrels = Vec::new();
        for q in 0..queries {
            let qid = format!("q{q}");
            let depth = rng.random_range(1..=docs.min(30));
            let ranked: Vec<String> = rand::seq::index::sample(rng, docs, depth)
                .into_iter()
                .map(|d| format!("d{d}"))
                .collect();
            let judged = rng.random_range(0..=docs.min(15));
            for d in rand::seq::index::sample(rng, docs, judged) {
                qrels.push((qid.clone(), format!("d{d}"), rng.random_range(0..=3)));
            }
            // Some run queries have no judgments at all; some judged
            // queries are absent from the run.
            if rng.random_bool(0.9) {
                run.push((qid, ranked));
            }
        }
        if !qrels.iter().any(|(q, _, _)| run.iter().any(|(r, _)| r == q)) {
            qrels.push((run[0].0.clone(), "d0".into(), 1));
        }
        Self { run, qrels }
    }

    pub fn run_ranking(&self) -> RunRanking {
        let mut r = RunRanking::default();
        for (q, docs) in &self.run {
            let ranked = docs
                .iter()
                .enumerate()
                .map(|(i, d)| RankedDoc { doc: d.clone(), score: 100.0 - i as f64 })
                .collect();
            r.insert(q.clone(), ranked).unwrap();
        }
        r
    }

    pub fn qrels(&self) -> Qrels {
        let mut q = Qrels::default();
        for (qid, d, g) in &self.qrels {
            q.insert(qid.clone(), d.clone(), *g).unwrap();
        }
        q
    }

    fn grade(&self, q: &str, d: &str) -> Option<u32> {
        self.qrels.iter().find(|(qq, dd, _)| qq == q && dd == d).map(|t| t.2)
    }

    fn judged(&self, q: &str) -> bool {
        self.qrels.iter().any(|(qq, _, _)| qq == q)
    }

    /// Judged run queries, in run order.
    fn scored_queries(&self) -> Vec<&(String, Vec<String>)> {
        self.run.iter().filter(|(q, _)| self.judged(q)).collect()
    }

    pub fn naive_mrr(&self, min_grade: u32, cutoff: Option<usize>) -> f64 {
        let qs = self.scored_queries();
        let mut total = 0.0;
        for (q, docs) in &qs {
            for (r, d) in docs.iter().enumerate() {
                if cutoff.is_some_and(|k| r >= k) {
                    break;
                }
                if self.grade(q, d).is_some_and(|g| g >= min_grade) {
                    total += 1.0 / (r as f64 + 1.0);
                    break;
                }
            }
        }
        total / qs.len() as f64
    }

    pub fn naive_recall(&self, k: usize, min_grade: u32) -> f64 {
        let mut values = Vec::new();
        for (q, docs) in self.scored_queries() {
            let relevant = self.qrels.iter().filter(|(qq, _, g)| qq == q && *g >= min_grade).count();
            if relevant == 0 {
                continue;
            }
            let found = docs.iter().take(k).filter(|d| self.grade(q, d).is_some_and(|g| g >= min_grade)).count();
            values.push(found as f64 / relevant as f64);
        }
        if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / values.len() as f64 }
    }

    pub fn naive_ndcg(&self, k: usize, exp_gain: bool, min_grade: u32) -> f64 {
        let gain = |g: u32| {
            let g = if g >= min_grade { g } else { 0 };
            if exp_gain { 2f64.powi(g as i32) - 1.0 } else { g as f64 }
        };
        let mut values = Vec::new();
        for (q, docs) in self.scored_queries() {
            let mut grades: Vec<u32> = self.qrels.iter().filter(|(qq, _, _)| qq == q).map(|t| t.2).collect();
            grades.sort_by(|a, b| b.cmp(a));
            let mut ideal = 0.0;
            for (r, g) in grades.iter().enumerate().take(k) {
                ideal += gain(*g) / (r as f64 + 2.0).log2();
            }
            if ideal == 0.0 {
                continue;
            }
            let mut dcg = 0.0;
            for (r, d) in docs.iter().enumerate().take(k) {
                dcg += gain(self.grade(q, d).unwrap_or(0)) / (r as f64 + 2.0).log2();
            }
            values.push(dcg / ideal);
        }
        if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / values.len() as f64 }
    }
}

// ---- agreement ----

/// Krippendorff's alpha by direct enumeration of value pairs: observed
/// disagreement over ordered pairs within each item (weighted 1/(m-1)),
/// expected disagreement over all ordered pairs of pairable values.
pub fn alpha_by_pairs(rows: &[Vec<Option<String>>]) -> Option<f64> {
    let units: Vec<Vec<&String>> = rows
        .iter()
        .map(|r| r.iter().flatten().collect::<Vec<_>>())
        .filter(|u| u.len() >= 2)
        .collect();
    let values: Vec<&String> = units.iter().flatten().copied().collect();
    let n = values.len() as f64;
    let mut observed = 0.0;
    for u in &units {
        let m = u.len() as f64;
        for i in 0..u.len() {
            for j in 0..u.len() {
                if i != j && u[i] != u[j] {
                    observed += 1.0 / (m - 1.0);
                }
            }
        }
    }
    let mut expected = 0.0;
    for i in 0..values.len() {
        for j in 0..values.len() {
            if i != j && values[i] != values[j] {
                expected += 1.0;
            }
        }
    }
    if units.len() < 2 || expected == 0.0 {
        return None;
    }
    Some(1.0 - (observed / n) / (expected / (n * (n - 1.0))))
}

// ---- toy retrieval corpus ----

pub struct Toy {
    pub passages: Vec<PassageRecord>,
    pub records: Vec<RetrievalRecord>,
    /// The first-prefix example of every passage.
    pub held_in: Vec<RetrievalRecord>,
}

pub fn toy_corpus(count: usize, seed: u64) -> Toy {
    let passages = toy_passages(count, 6, 3, seed);
    let splitter = RuleSplitter::default();
    let config = InpaintConfig::default();
    let dialogs: Vec<_> = passages
        .iter()
        .map(|r| {
            let p = Passage::from_record(r, &splitter, 6, MASK).unwrap();
            inpaint_document(&p, &StubBackend::default(), &config).unwrap()
        })
        .collect();
    let records = records_for_dialogs(&dialogs, false).unwrap();
    let held_in = records.iter().filter(|r| r.i == 1).cloned().collect();
    Toy { passages, records, held_in }
}

pub fn qrels_map(records: &[RetrievalRecord]) -> HashMap<String, HashSet<String>> {
    let mut m: HashMap<String, HashSet<String>> = HashMap::new();
    for r in records {
        m.entry(r.query_id()).or_default().insert(r.passage_id.clone());
    }
    m
}

// ---- exact search ----

/// Full argsort: score descending, id ascending.
pub fn argsort_oracle(ids: &[String], vectors: &[Vec<f64>], query: &[f64]) -> Vec<(String, f64)> {
    let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(String, f64)> = ids
        .iter()
        .zip(vectors)
        .map(|(id, v)| {
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            // match the index's f32 storage
            let dot: f64 = v.iter().zip(query).map(|(a, b)| f64::from((a / vn) as f32) * b).sum();
            (id.clone(), dot / qn)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored
}

pub fn bucket_totals(rows: &[inpaint_core::analysis::BucketCount]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in rows {
        *m.entry(r.bucket.clone()).or_default() += r.count;
    }
    m
}
