//! Multi-stage training: in-batch retriever, hard-negative mining, a second
//! retriever, and a reranker trained on negatives mined by the second one.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use log::{info, warn};
use rand::SeedableRng;
use rand::seq::{SliceRandom, index};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    EncoderConfig, EncoderParams, RerankTriplet, RerankerParams, TrainConfig, Trained, TrainingPair, Vocab,
    fnv1a, rerank_score, train_dual_encoder, train_reranker,
};
use crate::error::{Error, Result};
use crate::index::{Index, rank_order};
use crate::metrics::{self, Qrels, RankedDoc, RunRanking};
use crate::passage::PassageRecord;
use crate::retrieval_data::RetrievalRecord;

pub const DEFAULT_DEPTH: usize = 100;
pub const DEFAULT_NEGATIVES: usize = 10;
pub const FOLD_MODE_NEGATIVES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MineConfig {
    /// Negatives kept per query.
    pub n: usize,
    /// Retrieval depth sampled from.
    pub k: usize,
    pub seed: u64,
    /// Keep judged positives in the candidate pool.
    pub allow_false_negatives: bool,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_NEGATIVES,
            k: DEFAULT_DEPTH,
            seed: 0,
            allow_false_negatives: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MinedNegatives {
    pub stage: u32,
    pub k: usize,
    pub seed: u64,
    pub negatives: BTreeMap<String, Vec<String>>,
    /// Judged queries with no ranking in the run.
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativesRecord {
    pub query_id: String,
    pub negatives: Vec<String>,
    pub stage: u32,
    pub seed: u64,
}

impl MinedNegatives {
    pub fn records(&self) -> Vec<NegativesRecord> {
        self.negatives
            .iter()
            .map(|(q, n)| NegativesRecord {
                query_id: q.clone(),
                negatives: n.clone(),
                stage: self.stage,
                seed: self.seed,
            })
            .collect()
    }

    pub fn from_records(records: Vec<NegativesRecord>) -> Result<Self> {
        let mut out = Self::default();
        for r in records {
            out.stage = r.stage;
            out.seed = r.seed;
            if out.negatives.insert(r.query_id.clone(), r.negatives).is_some() {
                return Err(Error::DuplicateId(r.query_id));
            }
        }
        Ok(out)
    }

    pub fn get(&self, query_id: &str) -> &[String] {
        self.negatives.get(query_id).map_or(&[], Vec::as_slice)
    }
}

fn query_rng(seed: u64, query_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(query_id))
}

/// Samples `n` negatives per judged query, uniformly without replacement from
/// the top `k` of the run. Judged positives (grade ≥ 1) are removed first
/// unless false negatives are allowed. Sampled ids keep their rank order.
pub fn mine_hard_negatives(run: &RunRanking, qrels: &Qrels, config: &MineConfig) -> MinedNegatives {
    let mut out = MinedNegatives {
        k: config.k,
        seed: config.seed,
        ..MinedNegatives::default()
    };
    for q in qrels.queries() {
        let Some(ranking) = run.ranking(q) else {
            warn!("query {q} missing from run; no negatives mined");
            out.missing.push(q.to_string());
            continue;
        };
        let gold = qrels.positives(q, 1);
        let pool: Vec<&str> = ranking
            .iter()
            .take(config.k)
            .map(|d| d.doc.as_str())
            .filter(|d| config.allow_false_negatives || !gold.contains(d))
            .collect();
        let amount = config.n.min(pool.len());
        let mut picks = index::sample(&mut query_rng(config.seed, q), pool.len(), amount).into_vec();
        picks.sort_unstable();
        out.negatives
            .insert(q.to_string(), picks.into_iter().map(|i| pool[i].to_string()).collect());
    }
    out
}

/// Partitions distinct dialog ids into `k` folds after a seeded shuffle;
/// fold sizes differ by at most one.
pub fn make_folds(dialog_ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    let mut seen = HashSet::new();
    let mut ids: Vec<String> = dialog_ids.iter().filter(|id| seen.insert(id.as_str())).cloned().collect();
    if k == 0 || k > ids.len() {
        return Err(Error::Config(format!(
            "cannot split {} dialogs into {k} folds",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(folds)
}

/// Exact retrieval for each `(query_id, text)`; queries with no usable
/// embedding get an empty ranking.
pub fn retrieve(params: &EncoderParams, index: &Index, queries: &[(String, String)], k: usize) -> Result<RunRanking> {
    let rows: Vec<(String, Vec<RankedDoc>)> = queries
        .par_iter()
        .map(|(qid, text)| {
            let e = params.encode(text);
            if e.is_degenerate() {
                warn!("query {qid} has no usable embedding");
                return Ok((qid.clone(), Vec::new()));
            }
            let hits = index.top_k(e.unit.view(), k)?;
            Ok((
                qid.clone(),
                hits.into_iter()
                    .map(|h| RankedDoc {
                        doc: h.id,
                        score: h.score,
                    })
                    .collect(),
            ))
        })
        .collect::<Result<_>>()?;
    let mut run = RunRanking::default();
    for (q, docs) in rows {
        run.insert(q, docs)?;
    }
    Ok(run)
}

/// Rescores the top `depth` documents of each ranking with the reranker.
pub fn rerank(
    params: &RerankerParams,
    run: &RunRanking,
    queries: &HashMap<String, String>,
    passages: &HashMap<String, String>,
    depth: usize,
) -> Result<RunRanking> {
    let rows: Vec<(String, Vec<RankedDoc>)> = run
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(q, docs)| {
            let text = queries
                .get(q)
                .ok_or_else(|| Error::Config(format!("no text for query {q}")))?;
            let mut scored = docs
                .iter()
                .take(depth)
                .map(|d| {
                    let p = passages
                        .get(&d.doc)
                        .ok_or_else(|| Error::Config(format!("no text for passage {}", d.doc)))?;
                    Ok(RankedDoc {
                        doc: d.doc.clone(),
                        score: rerank_score(params, text, p),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            scored.sort_by(|a, b| rank_order((&a.doc, a.score), (&b.doc, b.score)));
            Ok((q.to_string(), scored))
        })
        .collect::<Result<_>>()?;
    let mut out = RunRanking::default();
    for (q, docs) in rows {
        out.insert(q, docs)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MultistageConfig {
    /// 1 = retriever only, 2 = add mined-negative retriever, 3 = add reranker.
    pub stages: u32,
    pub encoder: EncoderConfig,
    pub retriever: TrainConfig,
    pub reranker: TrainConfig,
    pub mining: MineConfig,
}

impl Default for MultistageConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            encoder: EncoderConfig::default(),
            retriever: TrainConfig::default(),
            reranker: TrainConfig {
                learning_rate: 0.5,
                batch_size: 8,
                ..TrainConfig::default()
            },
            mining: MineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: u32,
    pub model: String,
    pub final_loss: f64,
    pub mrr: f64,
    pub mrr_at_5: f64,
    pub recall_at_10: f64,
}

pub fn write_stage_reports(w: &mut impl Write, reports: &[StageReport]) -> Result<()> {
    writeln!(w, "stage,model,final_loss,mrr,mrr@5,r@10")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.stage, r.model, r.final_loss, r.mrr, r.mrr_at_5, r.recall_at_10
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MultistageOutput {
    pub retriever1: Trained<EncoderParams>,
    pub retriever2: Option<Trained<EncoderParams>>,
    pub reranker: Option<Trained<RerankerParams>>,
    pub negatives: Vec<MinedNegatives>,
    pub reports: Vec<StageReport>,
}

/// Each record's gold passage is its `passage_id`.
pub fn qrels_for(records: &[RetrievalRecord]) -> Result<Qrels> {
    let mut q = Qrels::default();
    for r in records {
        q.insert(r.query_id(), r.passage_id.clone(), 1)?;
    }
    Ok(q)
}

fn query_texts(records: &[RetrievalRecord]) -> Vec<(String, String)> {
    records.iter().map(|r| (r.query_id(), r.query.clone())).collect()
}

fn report(stage: u32, model: &str, final_loss: f64, run: &RunRanking, qrels: &Qrels) -> Result<StageReport> {
    let r = StageReport {
        stage,
        model: model.into(),
        final_loss,
        mrr: metrics::mrr(run, qrels, 1, None)?,
        mrr_at_5: metrics::mrr(run, qrels, 1, Some(5))?,
        recall_at_10: metrics::recall_at_k(run, qrels, 10, 1),
    };
    info!(
        "stage {stage} ({model}): loss {:.4}, mrr {:.4}, mrr@5 {:.4}, r@10 {:.4}",
        r.final_loss, r.mrr, r.mrr_at_5, r.recall_at_10
    );
    Ok(r)
}

fn last(curve: &[f64]) -> f64 {
    curve.last().copied().unwrap_or(f64::NAN)
}

/// Runs up to three stages. Stage 2 warm-starts from the stage-1 retriever
/// and appends mined negatives to each batch as extra passages. The reranker
/// treats the example's positive text and any gold passage the second
/// retriever found as positives. Each stage is evaluated on `eval`.
pub fn run_multistage(
    examples: &[RetrievalRecord],
    passages: &[PassageRecord],
    eval: &[RetrievalRecord],
    config: &MultistageConfig,
) -> Result<MultistageOutput> {
    if examples.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    if !(1..=3).contains(&config.stages) {
        return Err(Error::Config(format!("stages must be 1, 2 or 3, got {}", config.stages)));
    }
    let passage_text: HashMap<String, String> =
        passages.iter().map(|p| (p.id.clone(), p.text.clone())).collect();
    let train_qrels = qrels_for(examples)?;
    let eval_qrels = qrels_for(eval)?;
    let train_queries = query_texts(examples);
    let eval_queries = query_texts(eval);
    let depth = config.mining.k;

    let texts = examples
        .iter()
        .flat_map(|r| [r.query.as_str(), r.positive.as_str()])
        .chain(passages.iter().map(|p| p.text.as_str()));
    let vocab = Vocab::from_texts(texts, config.encoder.hash_buckets)?;
    let pairs: Vec<TrainingPair> = examples
        .iter()
        .map(|r| TrainingPair::new(r.query.clone(), r.positive.clone(), r.passage_id.clone()))
        .collect();

    let init = EncoderParams::init(vocab.clone(), &config.encoder)?;
    let retriever1 = train_dual_encoder(init, &pairs, &config.retriever)?;
    let (index1, _) = Index::build(&retriever1.params, passages)?;
    let mut reports = vec![report(
        1,
        "retriever1",
        last(&retriever1.loss_curve),
        &retrieve(&retriever1.params, &index1, &eval_queries, depth)?,
        &eval_qrels,
    )?];
    let mut out = MultistageOutput {
        retriever1,
        retriever2: None,
        reranker: None,
        negatives: Vec::new(),
        reports: Vec::new(),
    };
    if config.stages == 1 {
        out.reports = reports;
        return Ok(out);
    }

    let run1 = retrieve(&out.retriever1.params, &index1, &train_queries, depth)?;
    let mut mined1 = mine_hard_negatives(&run1, &train_qrels, &config.mining);
    mined1.stage = 2;
    let pairs2: Vec<TrainingPair> = examples
        .iter()
        .zip(pairs)
        .map(|(r, mut pair)| {
            pair.negatives = mined1
                .get(&r.query_id())
                .iter()
                .map(|id| (id.clone(), passage_text[id].clone()))
                .collect();
            pair
        })
        .collect();
    let retriever2 = train_dual_encoder(out.retriever1.params.clone(), &pairs2, &config.retriever)?;
    let (index2, _) = Index::build(&retriever2.params, passages)?;
    reports.push(report(
        2,
        "retriever2",
        last(&retriever2.loss_curve),
        &retrieve(&retriever2.params, &index2, &eval_queries, depth)?,
        &eval_qrels,
    )?);
    out.negatives.push(mined1);
    if config.stages == 2 {
        out.retriever2 = Some(retriever2);
        out.reports = reports;
        return Ok(out);
    }

    let run2 = retrieve(&retriever2.params, &index2, &train_queries, depth)?;
    let mut mined2 = mine_hard_negatives(&run2, &train_qrels, &config.mining);
    mined2.stage = 3;
    let mut triplets = Vec::new();
    for r in examples {
        let qid = r.query_id();
        let negatives: Vec<String> = mined2.get(&qid).iter().map(|id| passage_text[id].clone()).collect();
        if negatives.is_empty() {
            warn!("query {qid} has no mined negatives; left out of reranker training");
            continue;
        }
        let mut positives = vec![r.positive.clone()];
        let retrieved_gold = run2
            .ranking(&qid)
            .unwrap_or_default()
            .iter()
            .take(depth)
            .any(|d| d.doc == r.passage_id);
        if retrieved_gold {
            positives.push(passage_text[&r.passage_id].clone());
        }
        for positive in positives {
            triplets.push(RerankTriplet {
                query: r.query.clone(),
                positive,
                negatives: negatives.clone(),
            });
        }
    }
    let mut rvocab = vocab.tokens().to_vec();
    rvocab.push(crate::encoder::SEPARATOR_TOKEN.to_string());
    let rinit = RerankerParams::init(Vocab::new(rvocab, config.encoder.hash_buckets)?, &config.encoder)?;
    let reranker = train_reranker(rinit, &triplets, &config.reranker)?;

    let eval_run = retrieve(&retriever2.params, &index2, &eval_queries, depth)?;
    let eval_text: HashMap<String, String> = eval_queries.into_iter().collect();
    let reranked = rerank(&reranker.params, &eval_run, &eval_text, &passage_text, depth)?;
    reports.push(report(3, "reranker", last(&reranker.loss_curve), &reranked, &eval_qrels)?);
    out.negatives.push(mined2);
    out.retriever2 = Some(retriever2);
    out.reranker = Some(reranker);
    out.reports = reports;
    Ok(out)
}
