//! TREC-style evaluation: qrels/run text formats, MRR, Recall@k, NDCG@k.
//!
//! Qrels lines are `qid 0 docid grade`; run lines are
//! `qid Q0 docid rank score tag`. Ranking order comes from the rank field;
//! scores are carried along but never re-sorted.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn insert(&mut self, query: impl Into<String>, doc: impl Into<String>, grade: u32) -> Result<()> {
        let (query, doc) = (query.into(), doc.into());
        let docs = self.judgments.entry(query.clone()).or_default();
        if docs.insert(doc.clone(), grade).is_some() {
            return Err(Error::DuplicateId(format!("{query}/{doc}")));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut q = Self::default();
        for (n, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let at = || format!("qrels line {}", n + 1);
            if fields.len() != 4 {
                return Err(Error::parse(at(), format!("expected 4 fields, got {}", fields.len())));
            }
            let grade: u32 = fields[3]
                .parse()
                .map_err(|_| Error::parse(at(), format!("grade {:?} is not a non-negative integer", fields[3])))?;
            q.insert(fields[0], fields[2], grade)
                .map_err(|e| Error::parse(at(), e.to_string()))?;
        }
        Ok(q)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        for (q, docs) in &self.judgments {
            for (d, g) in docs {
                writeln!(w, "{q} 0 {d} {g}")?;
            }
        }
        Ok(())
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn judgments(&self, query: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query)
    }

    pub fn contains_query(&self, query: &str) -> bool {
        self.judgments.contains_key(query)
    }

    /// Documents judged at `min_grade` or above.
    pub fn positives(&self, query: &str, min_grade: u32) -> HashSet<&str> {
        self.judgments
            .get(query)
            .into_iter()
            .flatten()
            .filter(|(_, &g)| g >= min_grade)
            .map(|(d, _)| d.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedDoc {
    pub doc: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRanking {
    rankings: BTreeMap<String, Vec<RankedDoc>>,
}

impl RunRanking {
    /// Adds a ranking in order (best first). Duplicate documents are rejected.
    pub fn insert(&mut self, query: impl Into<String>, docs: Vec<RankedDoc>) -> Result<()> {
        let query = query.into();
        let mut seen = HashSet::new();
        for d in &docs {
            if !seen.insert(d.doc.as_str()) {
                return Err(Error::DuplicateId(format!("{query}/{}", d.doc)));
            }
        }
        if self.rankings.insert(query.clone(), docs).is_some() {
            return Err(Error::DuplicateId(query));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: BTreeMap<String, Vec<(u64, RankedDoc)>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let at = || format!("run line {}", n + 1);
            if fields.len() != 6 {
                return Err(Error::parse(at(), format!("expected 6 fields, got {}", fields.len())));
            }
            let rank: u64 = fields[3]
                .parse()
                .map_err(|_| Error::parse(at(), format!("bad rank {:?}", fields[3])))?;
            let score: f64 = fields[4]
                .parse()
                .map_err(|_| Error::parse(at(), format!("bad score {:?}", fields[4])))?;
            rows.entry(fields[0].to_string()).or_default().push((
                rank,
                RankedDoc {
                    doc: fields[2].to_string(),
                    score,
                },
            ));
        }
        let mut run = Self::default();
        for (q, mut docs) in rows {
            docs.sort_by_key(|(rank, _)| *rank);
            if docs.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::parse(format!("run query {q}"), "duplicate rank"));
            }
            run.insert(q, docs.into_iter().map(|(_, d)| d).collect())?;
        }
        Ok(run)
    }

    pub fn write(&self, w: &mut impl Write, tag: &str) -> Result<()> {
        for (q, docs) in &self.rankings {
            for (i, d) in docs.iter().enumerate() {
                writeln!(w, "{q} Q0 {} {} {} {tag}", d.doc, i + 1, d.score)?;
            }
        }
        Ok(())
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.rankings.keys().map(String::as_str)
    }

    pub fn ranking(&self, query: &str) -> Option<&[RankedDoc]> {
        self.rankings.get(query).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[RankedDoc])> {
        self.rankings.iter().map(|(q, d)| (q.as_str(), d.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }
}

/// `1/r` for the first positive at rank `r <= cutoff`, else 0.
pub fn reciprocal_rank(docs: &[RankedDoc], positives: &HashSet<&str>, cutoff: Option<usize>) -> f64 {
    let depth = cutoff.unwrap_or(usize::MAX);
    docs.iter()
        .take(depth)
        .position(|d| positives.contains(d.doc.as_str()))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Run queries that also appear in the qrels; others are skipped with a
/// warning.
fn judged_queries<'a>(run: &'a RunRanking, qrels: &Qrels) -> Vec<(&'a str, &'a [RankedDoc])> {
    run.iter()
        .filter(|(q, _)| {
            let judged = qrels.contains_query(q);
            if !judged {
                warn!("query {q} has no judgments; skipped");
            }
            judged
        })
        .collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn mrr_per_query(run: &RunRanking, qrels: &Qrels, min_grade: u32, cutoff: Option<usize>) -> Result<BTreeMap<String, f64>> {
    let queries = judged_queries(run, qrels);
    if queries.is_empty() {
        return Err(Error::Config("run and qrels share no queries".into()));
    }
    Ok(queries
        .into_iter()
        .map(|(q, docs)| (q.to_string(), reciprocal_rank(docs, &qrels.positives(q, min_grade), cutoff)))
        .collect())
}

pub fn mrr(run: &RunRanking, qrels: &Qrels, min_grade: u32, cutoff: Option<usize>) -> Result<f64> {
    Ok(mean(mrr_per_query(run, qrels, min_grade, cutoff)?.into_values()))
}

fn recall_per_query(run: &RunRanking, qrels: &Qrels, k: usize, min_grade: u32) -> BTreeMap<String, f64> {
    judged_queries(run, qrels)
        .into_iter()
        .filter_map(|(q, docs)| {
            let pos = qrels.positives(q, min_grade);
            if pos.is_empty() {
                return None;
            }
            let hit = docs.iter().take(k).filter(|d| pos.contains(d.doc.as_str())).count();
            Some((q.to_string(), hit as f64 / pos.len() as f64))
        })
        .collect()
}

/// Mean over queries with at least one positive.
pub fn recall_at_k(run: &RunRanking, qrels: &Qrels, k: usize, min_grade: u32) -> f64 {
    mean(recall_per_query(run, qrels, k, min_grade).into_values())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    /// `2^grade - 1`
    #[default]
    Exp,
    /// `grade`
    Linear,
}

impl Gain {
    pub fn of(self, grade: u32) -> f64 {
        match self {
            Gain::Exp => 2f64.powi(grade as i32) - 1.0,
            Gain::Linear => f64::from(grade),
        }
    }
}

impl FromStr for Gain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" | "exponential" => Ok(Gain::Exp),
            "linear" => Ok(Gain::Linear),
            other => Err(Error::Config(format!("unknown gain {other:?}"))),
        }
    }
}

fn ndcg_per_query(run: &RunRanking, qrels: &Qrels, k: usize, gain: Gain, min_grade: u32) -> BTreeMap<String, f64> {
    let effective = |g: u32| if g >= min_grade { g } else { 0 };
    judged_queries(run, qrels)
        .into_iter()
        .filter_map(|(q, docs)| {
            let judged = qrels.judgments(q)?;
            let mut ideal: Vec<u32> = judged.values().map(|&g| effective(g)).collect();
            ideal.sort_unstable_by(|a, b| b.cmp(a));
            let discount = |r: usize| ((r + 2) as f64).log2();
            let idcg: f64 = ideal.iter().take(k).enumerate().map(|(r, &g)| gain.of(g) / discount(r)).sum();
            if idcg <= 0.0 {
                return None;
            }
            let dcg: f64 = docs
                .iter()
                .take(k)
                .enumerate()
                .map(|(r, d)| gain.of(judged.get(&d.doc).map_or(0, |&g| effective(g))) / discount(r))
                .sum();
            Some((q.to_string(), dcg / idcg))
        })
        .collect()
}

/// Grades below `min_grade` count as 0; queries with zero ideal gain are
/// excluded from the mean.
pub fn ndcg_at_k(run: &RunRanking, qrels: &Qrels, k: usize, gain: Gain, min_grade: u32) -> f64 {
    mean(ndcg_per_query(run, qrels, k, gain, min_grade).into_values())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mrr { cutoff: Option<usize> },
    Recall { k: usize },
    Ndcg { k: usize },
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Mrr { cutoff: None } => write!(f, "mrr"),
            Metric::Mrr { cutoff: Some(k) } => write!(f, "mrr@{k}"),
            Metric::Recall { k } => write!(f, "r@{k}"),
            Metric::Ndcg { k } => write!(f, "ndcg@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_lowercase();
        let (name, k) = match s.split_once('@') {
            Some((n, k)) => {
                let k: usize = k.parse().map_err(|_| Error::UnknownMetric(s.clone()))?;
                if k == 0 {
                    return Err(Error::UnknownMetric(s.clone()));
                }
                (n.to_string(), Some(k))
            }
            None => (s.clone(), None),
        };
        match (name.as_str(), k) {
            ("mrr", cutoff) => Ok(Metric::Mrr { cutoff }),
            ("r" | "recall", Some(k)) => Ok(Metric::Recall { k }),
            ("ndcg", Some(k)) => Ok(Metric::Ndcg { k }),
            _ => Err(Error::UnknownMetric(s)),
        }
    }
}

pub fn parse_metrics(spec: &str) -> Result<Vec<Metric>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EvalConfig {
    pub min_grade: u32,
    pub gain: Gain,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            min_grade: 1,
            gain: Gain::Exp,
        }
    }
}

impl EvalConfig {
    /// Named presets: `cast19` counts grade ≥ 1 as relevant, `cast20`
    /// grade ≥ 2.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cast19" => Ok(Self { min_grade: 1, ..Self::default() }),
            "cast20" => Ok(Self { min_grade: 2, ..Self::default() }),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub aggregate: f64,
    pub per_query: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub config: EvalConfig,
    pub metrics: Vec<MetricReport>,
}

impl Report {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == metric).map(|m| m.aggregate)
    }

    /// Long format: `metric,query,value`, per-query rows then an `all` row.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "metric,query,value")?;
        for m in &self.metrics {
            for (q, v) in &m.per_query {
                writeln!(w, "{},{q},{v}", m.metric)?;
            }
            writeln!(w, "{},all,{}", m.metric, m.aggregate)?;
        }
        Ok(())
    }
}

pub fn evaluate_run(run: &RunRanking, qrels: &Qrels, metrics: &[Metric], config: EvalConfig) -> Result<Report> {
    let mut out = Vec::with_capacity(metrics.len());
    for m in metrics {
        let per_query = match *m {
            Metric::Mrr { cutoff } => mrr_per_query(run, qrels, config.min_grade, cutoff)?,
            Metric::Recall { k } => recall_per_query(run, qrels, k, config.min_grade),
            Metric::Ndcg { k } => ndcg_per_query(run, qrels, k, config.gain, config.min_grade),
        };
        out.push(MetricReport {
            metric: m.to_string(),
            aggregate: mean(per_query.values().copied()),
            per_query,
        });
    }
    Ok(Report { config, metrics: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(ids: &[&str]) -> Vec<RankedDoc> {
        ids.iter()
            .enumerate()
            .map(|(i, d)| RankedDoc {
                doc: d.to_string(),
                score: -(i as f64),
            })
            .collect()
    }

    #[test]
    fn reciprocal_rank_cases() {
        let pos: HashSet<&str> = ["g"].into_iter().collect();
        assert_eq!(reciprocal_rank(&docs(&["g", "a"]), &pos, None), 1.0);
        assert_eq!(reciprocal_rank(&docs(&["a", "b", "g"]), &pos, Some(5)), 1.0 / 3.0);
        let seven = docs(&["a", "b", "c", "d", "e", "f", "g"]);
        assert_eq!(reciprocal_rank(&seven, &pos, Some(5)), 0.0);
        assert_eq!(reciprocal_rank(&seven, &pos, None), 1.0 / 7.0);
    }

    #[test]
    fn mrr_and_grades() {
        let qrels = Qrels::parse("q1 0 a 2\nq1 0 b 1\nq2 0 c 2\n").unwrap();
        let mut run = RunRanking::default();
        run.insert("q1", docs(&["b", "a"])).unwrap();
        run.insert("q2", docs(&["x", "c"])).unwrap();
        assert_eq!(mrr(&run, &qrels, 1, None).unwrap(), 0.75);
        // grade-1 "b" no longer counts
        assert_eq!(mrr(&run, &qrels, 2, None).unwrap(), 0.5);

        let none = Qrels::parse("q1 0 a 0\n").unwrap();
        assert_eq!(mrr(&run, &none, 1, None).unwrap(), 0.0);
        let other = Qrels::parse("zz 0 a 1\n").unwrap();
        assert!(mrr(&run, &other, 1, None).is_err());
    }

    #[test]
    fn recall_cases() {
        let qrels = Qrels::parse("q1 0 a 1\nq1 0 b 1\nq2 0 c 0\nq3 0 d 1\n").unwrap();
        let mut run = RunRanking::default();
        run.insert("q1", docs(&["a", "x"])).unwrap();
        run.insert("q2", docs(&["c"])).unwrap();
        run.insert("q3", docs(&["d"])).unwrap();
        // q2 has no positives: mean of 0.5 and 1.0
        assert_eq!(recall_at_k(&run, &qrels, 10, 1), 0.75);
        assert_eq!(recall_at_k(&run, &qrels, 1, 1), 0.75);
    }

    #[test]
    fn ndcg_cases() {
        let qrels = Qrels::parse("q 0 a 3\nq 0 b 0\n").unwrap();
        let mut run = RunRanking::default();
        run.insert("q", docs(&["b", "a"])).unwrap();
        let v = ndcg_at_k(&run, &qrels, 3, Gain::Exp, 1);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((v - 0.6309).abs() < 1e-4);

        let mut sorted = RunRanking::default();
        sorted.insert("q", docs(&["a", "b"])).unwrap();
        assert_eq!(ndcg_at_k(&sorted, &qrels, 3, Gain::Exp, 1), 1.0);
        assert_eq!(ndcg_at_k(&sorted, &qrels, 10, Gain::Linear, 1), 1.0);
    }

    #[test]
    fn run_file_order_is_authoritative() {
        let run = RunRanking::parse("q Q0 b 2 9.0 t\nq Q0 a 1 0.1 t\n").unwrap();
        let ids: Vec<_> = run.ranking("q").unwrap().iter().map(|d| d.doc.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert!(RunRanking::parse("q Q0 a 1 1 t\nq Q0 a 2 1 t\n").is_err());
        assert!(RunRanking::parse("q Q0 a 1 1\n").is_err());
        let mut out = Vec::new();
        run.write(&mut out, "t").unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "q Q0 a 1 0.1 t\nq Q0 b 2 9 t\n");
    }

    #[test]
    fn qrels_validation() {
        assert!(Qrels::parse("q 0 a -1\n").is_err());
        assert!(Qrels::parse("q 0 a 1\nq 0 a 2\n").is_err());
        assert!(Qrels::parse("q 0 a\n").is_err());
    }

    #[test]
    fn metric_specs() {
        let m = parse_metrics("mrr@5,r@10,ndcg@3,mrr,recall@2").unwrap();
        let names: Vec<_> = m.iter().map(ToString::to_string).collect();
        assert_eq!(names, vec!["mrr@5", "r@10", "ndcg@3", "mrr", "r@2"]);
        assert!(matches!(parse_metrics("map@10"), Err(Error::UnknownMetric(_))));
        assert!(parse_metrics("ndcg").is_err());
        assert_eq!(EvalConfig::preset("cast20").unwrap().min_grade, 2);
        assert_eq!(EvalConfig::preset("cast19").unwrap().min_grade, 1);
    }

    #[test]
    fn report_is_consistent() {
        let qrels = Qrels::parse("q1 0 a 2\nq2 0 b 1\n").unwrap();
        let mut run = RunRanking::default();
        run.insert("q1", docs(&["x", "a"])).unwrap();
        run.insert("q2", docs(&["b"])).unwrap();
        let metrics = parse_metrics("mrr@5,r@10,ndcg@3").unwrap();
        let r = evaluate_run(&run, &qrels, &metrics, EvalConfig::default()).unwrap();
        assert_eq!(r.metrics.len(), 3);
        assert_eq!(r.get("mrr@5"), Some(0.75));
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("metric,query,value\nmrr@5,q1,0.5\n"));
        assert!(csv.contains("mrr@5,all,0.75\n"));
    }
}
