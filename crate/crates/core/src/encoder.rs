//! Desk-scale dual encoder and reranker.
//!
//! Both models embed text as a mean over token vectors followed by a linear
//! projection. The dual encoder scores by cosine similarity and trains with
//! a temperature-scaled contrastive loss over in-batch negatives; the
//! reranker jointly encodes `query [sep] passage`, scores with a weight
//! vector and trains with a weighted binary loss. Gradients are analytic.
//!
//! Tokenization lowercases and splits on whitespace. Tokens outside the
//! vocabulary map to one of `hash_buckets` extra rows chosen by 64-bit
//! FNV-1a over the token's UTF-8 bytes (offset `0xcbf29ce484222325`, prime
//! `0x100000001b3`), reduced modulo the bucket count.

use std::collections::{BTreeMap, HashMap, HashSet};

use log::debug;
use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const DEFAULT_OUTPUT_DIM: usize = 768;
pub const DEFAULT_HASH_BUCKETS: usize = 1024;
pub const DEFAULT_TEMPERATURE: f64 = 0.01;
pub const INIT_STD: f64 = 0.02;
pub const SEPARATOR_TOKEN: &str = "[sep]";

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(String::from)
        .collect()
}

pub fn fnv1a(token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    buckets: usize,
}

impl Vocab {
    /// Sorted, deduplicated vocabulary from already-tokenized strings.
    pub fn new(tokens: impl IntoIterator<Item = String>, buckets: usize) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::Config("hash bucket count must be at least 1".into()));
        }
        let mut tokens: Vec<String> = tokens.into_iter().collect();
        tokens.sort();
        tokens.dedup();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self {
            tokens,
            index,
            buckets,
        })
    }

    /// Vocabulary covering every token of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, buckets: usize) -> Result<Self> {
        Self::new(texts.into_iter().flat_map(tokenize), buckets)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn rows(&self) -> usize {
        self.tokens.len() + self.buckets
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn row(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&i) => i,
            None => self.tokens.len() + (fnv1a(token) % self.buckets as u64) as usize,
        }
    }

    fn with_token(&self, token: &str) -> Result<Self> {
        Self::new(
            self.tokens.iter().cloned().chain([token.to_string()]),
            self.buckets,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub output_dim: usize,
    pub hash_buckets: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            output_dim: DEFAULT_OUTPUT_DIM,
            hash_buckets: DEFAULT_HASH_BUCKETS,
            seed: 0,
        }
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid stddev");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

fn check_dims(config: &EncoderConfig) -> Result<()> {
    if config.embed_dim == 0 || config.output_dim == 0 {
        return Err(Error::Config("embedding dimensions must be positive".into()));
    }
    Ok(())
}

/// Row weights `count / n` of a token sequence.
fn pooling_weights(rows: impl IntoIterator<Item = usize>) -> Vec<(usize, f64)> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut n = 0usize;
    for r in rows {
        *counts.entry(r).or_default() += 1;
        n += 1;
    }
    counts
        .into_iter()
        .map(|(r, c)| (r, c as f64 / n as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub vocab: Vocab,
    pub seed: u64,
    /// `rows × embed_dim`, rows = vocabulary size + hash buckets.
    pub table: Array2<f64>,
    /// `embed_dim × output_dim`.
    pub projection: Array2<f64>,
}

/// Embedding of one text: the unit vector and the norm it was scaled by.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub unit: Array1<f64>,
    pub norm: f64,
}

impl Embedding {
    pub fn is_degenerate(&self) -> bool {
        !(self.norm > 0.0) || !self.norm.is_finite()
    }
}

/// Pooled input and projected output of one text.
struct Forward {
    weights: Vec<(usize, f64)>,
    pooled: Array1<f64>,
    projected: Array1<f64>,
    norm: f64,
}

impl EncoderParams {
    pub fn init(vocab: Vocab, config: &EncoderConfig) -> Result<Self> {
        check_dims(config)?;
        if vocab.buckets() != config.hash_buckets {
            return Err(Error::Config("vocabulary bucket count differs from config".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let table = gaussian_matrix(vocab.rows(), config.embed_dim, &mut rng);
        let projection = gaussian_matrix(config.embed_dim, config.output_dim, &mut rng);
        Ok(Self {
            vocab,
            seed: config.seed,
            table,
            projection,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.table.nrows() != self.vocab.rows() || self.projection.nrows() != self.table.ncols() {
            return Err(Error::Config("inconsistent encoder dimensions".into()));
        }
        if !self.table.iter().chain(self.projection.iter()).all(|v| v.is_finite()) {
            return Err(Error::Config("non-finite encoder parameter".into()));
        }
        Ok(())
    }

    fn forward(&self, text: &str) -> Option<Forward> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return None;
        }
        let weights = pooling_weights(tokens.iter().map(|t| self.vocab.row(t)));
        let mut pooled = Array1::zeros(self.embed_dim());
        for &(r, w) in &weights {
            pooled.scaled_add(w, &self.table.row(r));
        }
        let projected = self.projection.t().dot(&pooled);
        let norm = projected.dot(&projected).sqrt();
        Some(Forward {
            weights,
            pooled,
            projected,
            norm,
        })
    }

    /// Unit embedding of `text`; texts without tokens give a zero vector
    /// with norm 0.
    pub fn encode(&self, text: &str) -> Embedding {
        match self.forward(text) {
            Some(f) if f.norm > 0.0 => Embedding {
                unit: f.projected / f.norm,
                norm: f.norm,
            },
            _ => Embedding {
                unit: Array1::zeros(self.output_dim()),
                norm: 0.0,
            },
        }
    }

    fn backward(&self, f: &Forward, grad_projected: &Array1<f64>, grad: &mut EncoderGrad) {
        Zip::from(&mut grad.projection)
            .and_broadcast(&f.pooled.view().insert_axis(ndarray::Axis(1)))
            .and_broadcast(&grad_projected.view().insert_axis(ndarray::Axis(0)))
            .for_each(|g, &x, &gz| *g += x * gz);
        let grad_pooled = self.projection.dot(grad_projected);
        for &(r, w) in &f.weights {
            grad.table.row_mut(r).scaled_add(w, &grad_pooled);
        }
    }

    pub fn apply(&mut self, grad: &EncoderGrad, learning_rate: f64) {
        if learning_rate == 0.0 {
            return;
        }
        self.table.scaled_add(-learning_rate, &grad.table);
        self.projection.scaled_add(-learning_rate, &grad.projection);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub table: Array2<f64>,
    pub projection: Array2<f64>,
}

impl EncoderGrad {
    pub fn zeros_like(p: &EncoderParams) -> Self {
        Self {
            table: Array2::zeros(p.table.raw_dim()),
            projection: Array2::zeros(p.projection.raw_dim()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.table.iter().chain(self.projection.iter()).all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.table
            .iter()
            .chain(self.projection.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
pub fn cosine_score(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Degenerate("cosine of a zero vector is undefined".into()));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// A query with its positive passage and optional extra negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub query: String,
    pub positive: String,
    pub positive_id: String,
    /// `(passage id, text)` pairs appended to the batch as extra passages.
    pub negatives: Vec<(String, String)>,
}

impl TrainingPair {
    pub fn new(query: impl Into<String>, positive: impl Into<String>, positive_id: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            positive: positive.into(),
            positive_id: positive_id.into(),
            negatives: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Cosine scores, `batch × passages`; column `b` is row `b`'s positive,
    /// columns past the batch size are extra negatives.
    pub scores: Array2<f64>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean over rows of `-log softmax(row / tau)[b]`.
pub fn contrastive_loss_from_scores(scores: &Array2<f64>, tau: f64) -> f64 {
    let b = scores.nrows();
    let total: f64 = scores
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| log_sum_exp(row.iter().map(|s| s / tau)) - row[i] / tau)
        .sum();
    total / b as f64
}

/// Passages of a batch: positives in order, then deduplicated extra
/// negatives whose ids are not any batch positive.
fn batch_passages(batch: &[TrainingPair]) -> Result<Vec<&str>> {
    let mut ids: HashSet<&str> = HashSet::new();
    for p in batch {
        if !ids.insert(&p.positive_id) {
            return Err(Error::InvalidBatch(format!(
                "duplicate positive id {:?} in batch",
                p.positive_id
            )));
        }
    }
    let mut texts: Vec<&str> = batch.iter().map(|p| p.positive.as_str()).collect();
    for pair in batch {
        for (id, text) in &pair.negatives {
            if ids.insert(id) {
                texts.push(text);
            }
        }
    }
    Ok(texts)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

struct ContrastiveForward {
    queries: Vec<Forward>,
    passages: Vec<Forward>,
    scores: Array2<f64>,
}

fn contrastive_forward(
    params: &EncoderParams,
    batch: &[TrainingPair],
    tau: f64,
) -> Result<ContrastiveForward> {
    check_tau(tau)?;
    if batch.len() < 2 {
        return Err(Error::InvalidBatch("in-batch negatives need at least 2 pairs".into()));
    }
    let passage_texts = batch_passages(batch)?;
    let encode = |text: &str, what: &str| -> Result<Forward> {
        match params.forward(text) {
            Some(f) if f.norm > 0.0 && f.norm.is_finite() => Ok(f),
            _ => Err(Error::Degenerate(format!("{what} {text:?} has no usable embedding"))),
        }
    };
    let queries = batch
        .iter()
        .map(|p| encode(&p.query, "query"))
        .collect::<Result<Vec<_>>>()?;
    let passages = passage_texts
        .iter()
        .map(|t| encode(t, "passage"))
        .collect::<Result<Vec<_>>>()?;
    let scores = Array2::from_shape_fn((queries.len(), passages.len()), |(i, j)| {
        let (q, p) = (&queries[i], &passages[j]);
        q.projected.dot(&p.projected) / (q.norm * p.norm)
    });
    Ok(ContrastiveForward {
        queries,
        passages,
        scores,
    })
}

pub fn contrastive_loss(
    params: &EncoderParams,
    batch: &[TrainingPair],
    tau: f64,
) -> Result<ContrastiveOutput> {
    let fwd = contrastive_forward(params, batch, tau)?;
    Ok(ContrastiveOutput {
        loss: contrastive_loss_from_scores(&fwd.scores, tau),
        scores: fwd.scores,
    })
}

/// Loss and its gradient with respect to every parameter.
pub fn contrastive_grad(
    params: &EncoderParams,
    batch: &[TrainingPair],
    tau: f64,
) -> Result<(ContrastiveOutput, EncoderGrad)> {
    let fwd = contrastive_forward(params, batch, tau)?;
    let (nq, np) = fwd.scores.dim();
    let loss = contrastive_loss_from_scores(&fwd.scores, tau);

    // dL/dS = (softmax - onehot) / (tau * B)
    let mut g_scores = Array2::zeros((nq, np));
    for (i, row) in fwd.scores.rows().into_iter().enumerate() {
        let lse = log_sum_exp(row.iter().map(|s| s / tau));
        for j in 0..np {
            let p = (row[j] / tau - lse).exp();
            g_scores[[i, j]] = (p - if i == j { 1.0 } else { 0.0 }) / (tau * nq as f64);
        }
    }

    // ds/du = (v/|v| - s u/|u|) / |u|
    let unit = |f: &Forward| &f.projected / f.norm;
    let q_unit: Vec<Array1<f64>> = fwd.queries.iter().map(unit).collect();
    let p_unit: Vec<Array1<f64>> = fwd.passages.iter().map(unit).collect();
    let d = params.output_dim();
    let mut g_q = vec![Array1::<f64>::zeros(d); nq];
    let mut g_p = vec![Array1::<f64>::zeros(d); np];
    for i in 0..nq {
        for j in 0..np {
            let g = g_scores[[i, j]];
            if g == 0.0 {
                continue;
            }
            let s = fwd.scores[[i, j]];
            let (qn, pn) = (fwd.queries[i].norm, fwd.passages[j].norm);
            g_q[i].scaled_add(g / qn, &p_unit[j]);
            g_q[i].scaled_add(-g * s / qn, &q_unit[i]);
            g_p[j].scaled_add(g / pn, &q_unit[i]);
            g_p[j].scaled_add(-g * s / pn, &p_unit[j]);
        }
    }

    let mut grad = EncoderGrad::zeros_like(params);
    for (f, g) in fwd.queries.iter().zip(&g_q) {
        params.backward(f, g, &mut grad);
    }
    for (f, g) in fwd.passages.iter().zip(&g_p) {
        params.backward(f, g, &mut grad);
    }
    Ok((
        ContrastiveOutput {
            loss,
            scores: fwd.scores,
        },
        grad,
    ))
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            batch_size: 32,
            learning_rate: 1e-4,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn check(&self, min_batch: usize) -> Result<()> {
        check_tau(self.temperature)?;
        if self.batch_size < min_batch {
            return Err(Error::Config(format!("batch size must be at least {min_batch}")));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be a non-negative number".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Trained<P> {
    pub params: P,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
}

/// Shuffled batches with no repeated key inside a batch. Items that would
/// repeat a key are deferred to the next batch; batches of one are dropped.
fn keyed_batches(
    keys: &[&str],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.shuffle(rng);
    let mut queue: std::collections::VecDeque<usize> = order.into();
    let mut out = Vec::new();
    while !queue.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut seen: HashSet<&str> = HashSet::new();
        let mut deferred = Vec::new();
        while batch.len() < batch_size {
            let Some(i) = queue.pop_front() else { break };
            if seen.insert(keys[i]) {
                batch.push(i);
            } else {
                deferred.push(i);
            }
        }
        for i in deferred.into_iter().rev() {
            queue.push_front(i);
        }
        if batch.len() >= 2 {
            out.push(batch);
        }
    }
    out
}

/// Plain gradient descent on the in-batch contrastive loss.
pub fn train_dual_encoder(
    mut params: EncoderParams,
    pairs: &[TrainingPair],
    config: &TrainConfig,
) -> Result<Trained<EncoderParams>> {
    config.check(2)?;
    if pairs.is_empty() {
        return Err(Error::InvalidBatch("no training pairs".into()));
    }
    let keys: Vec<&str> = pairs.iter().map(|p| p.positive_id.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = keyed_batches(&keys, config.batch_size, &mut rng);
        if batches.is_empty() {
            return Err(Error::InvalidBatch(
                "cannot form a batch of two pairs with distinct positive ids".into(),
            ));
        }
        let mut total = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let batch: Vec<TrainingPair> = idx.iter().map(|&i| pairs[i].clone()).collect();
            let (out, grad) = contrastive_grad(&params, &batch, config.temperature)?;
            if !out.loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    loss: out.loss,
                });
            }
            total += out.loss;
            params.apply(&grad, config.learning_rate);
        }
        let mean = total / batches.len() as f64;
        debug!("dual encoder epoch {epoch}: loss {mean:.6}");
        loss_curve.push(mean);
    }
    Ok(Trained { params, loss_curve })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankerParams {
    /// Includes [`SEPARATOR_TOKEN`].
    pub vocab: Vocab,
    pub seed: u64,
    pub table: Array2<f64>,
    pub projection: Array2<f64>,
    /// `2 × embed_dim` segment gates: a token in segment `g` contributes
    /// `table[row] ⊙ (1 + gates[g])`. Segment 0 is the query and the
    /// separator, segment 1 the passage.
    pub gates: Array2<f64>,
    /// Scoring vector, length `output_dim`.
    pub weight: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankerGrad {
    pub table: Array2<f64>,
    pub projection: Array2<f64>,
    pub gates: Array2<f64>,
    pub weight: Array1<f64>,
}

impl RerankerGrad {
    pub fn zeros_like(p: &RerankerParams) -> Self {
        Self {
            table: Array2::zeros(p.table.raw_dim()),
            projection: Array2::zeros(p.projection.raw_dim()),
            gates: Array2::zeros(p.gates.raw_dim()),
            weight: Array1::zeros(p.weight.raw_dim()),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.table
            .iter()
            .chain(self.projection.iter())
            .chain(self.gates.iter())
            .chain(self.weight.iter())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}

struct JointForward {
    /// `((row, segment), count / n)`.
    weights: Vec<((usize, usize), f64)>,
    pooled: Array1<f64>,
    projected: Array1<f64>,
    norm: f64,
    score: f64,
}

impl RerankerParams {
    pub fn init(vocab: Vocab, config: &EncoderConfig) -> Result<Self> {
        check_dims(config)?;
        let vocab = vocab.with_token(SEPARATOR_TOKEN)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let table = gaussian_matrix(vocab.rows(), config.embed_dim, &mut rng);
        let projection = gaussian_matrix(config.embed_dim, config.output_dim, &mut rng);
        let gates = gaussian_matrix(2, config.embed_dim, &mut rng);
        let weight = gaussian_matrix(1, config.output_dim, &mut rng).row(0).to_owned();
        Ok(Self {
            vocab,
            seed: config.seed,
            table,
            projection,
            gates,
            weight,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.embed_dim();
        if self.table.nrows() != self.vocab.rows()
            || self.projection.nrows() != e
            || self.gates.dim() != (2, e)
            || self.weight.len() != self.output_dim()
        {
            return Err(Error::Config("inconsistent reranker dimensions".into()));
        }
        let all = self
            .table
            .iter()
            .chain(self.projection.iter())
            .chain(self.gates.iter())
            .chain(self.weight.iter());
        if !all.into_iter().all(|v| v.is_finite()) {
            return Err(Error::Config("non-finite reranker parameter".into()));
        }
        Ok(())
    }

    fn forward(&self, query: &str, passage: &str) -> JointForward {
        let sep = self.vocab.row(SEPARATOR_TOKEN);
        let q = tokenize(query).into_iter().map(|t| (self.vocab.row(&t), 0));
        let p = tokenize(passage).into_iter().map(|t| (self.vocab.row(&t), 1));
        let seq: Vec<(usize, usize)> = q.chain([(sep, 0)]).chain(p).collect();
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for key in &seq {
            *counts.entry(*key).or_default() += 1;
        }
        let n = seq.len() as f64;
        let weights: Vec<_> = counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect();
        let mut pooled = Array1::zeros(self.embed_dim());
        for &((r, g), w) in &weights {
            Zip::from(&mut pooled)
                .and(&self.table.row(r))
                .and(&self.gates.row(g))
                .for_each(|x, &e, &gate| *x += w * e * (1.0 + gate));
        }
        let projected = self.projection.t().dot(&pooled);
        let norm = projected.dot(&projected).sqrt();
        let score = if norm > 0.0 {
            self.weight.dot(&projected) / norm
        } else {
            0.0
        };
        JointForward {
            weights,
            pooled,
            projected,
            norm,
            score,
        }
    }

    fn backward(&self, f: &JointForward, grad_score: f64, grad: &mut RerankerGrad) {
        if !(f.norm > 0.0) || grad_score == 0.0 {
            return;
        }
        let unit = &f.projected / f.norm;
        grad.weight.scaled_add(grad_score, &unit);
        // d(w.e)/dz = (w - (w.e) e) / |z|
        let mut g_z = self.weight.clone() * grad_score;
        let along = g_z.dot(&unit);
        g_z.scaled_add(-along, &unit);
        g_z /= f.norm;
        for i in 0..self.embed_dim() {
            grad.projection
                .row_mut(i)
                .scaled_add(f.pooled[i], &g_z);
        }
        let g_pooled = self.projection.dot(&g_z);
        for &((r, g), w) in &f.weights {
            let e = self.table.row(r);
            let gate = self.gates.row(g);
            Zip::from(grad.table.row_mut(r))
                .and(&g_pooled)
                .and(&gate)
                .for_each(|out, &gx, &gt| *out += w * gx * (1.0 + gt));
            Zip::from(grad.gates.row_mut(g))
                .and(&g_pooled)
                .and(&e)
                .for_each(|out, &gx, &ev| *out += w * gx * ev);
        }
    }

    pub fn apply(&mut self, grad: &RerankerGrad, learning_rate: f64) {
        if learning_rate == 0.0 {
            return;
        }
        self.table.scaled_add(-learning_rate, &grad.table);
        self.projection.scaled_add(-learning_rate, &grad.projection);
        self.gates.scaled_add(-learning_rate, &grad.gates);
        self.weight.scaled_add(-learning_rate, &grad.weight);
    }

    /// Unit joint embedding of `query [sep] passage`.
    pub fn embed(&self, query: &str, passage: &str) -> Embedding {
        let f = self.forward(query, passage);
        Embedding {
            unit: if f.norm > 0.0 {
                &f.projected / f.norm
            } else {
                Array1::zeros(self.output_dim())
            },
            norm: f.norm,
        }
    }
}

pub fn rerank_score(params: &RerankerParams, query: &str, passage: &str) -> f64 {
    params.forward(query, passage).score
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log σ(s⁺) - mean over negatives of log(1 - σ(s⁻))`.
pub fn weighted_binary_loss(positive: f64, negatives: &[f64]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidBatch("reranker loss needs at least one negative".into()));
    }
    let neg: f64 = negatives.iter().map(|&s| softplus(s)).sum();
    Ok(softplus(-positive) + neg / negatives.len() as f64)
}

pub fn reranker_loss(
    params: &RerankerParams,
    query: &str,
    positive: &str,
    negatives: &[String],
) -> Result<f64> {
    let neg: Vec<f64> = negatives
        .iter()
        .map(|p| rerank_score(params, query, p))
        .collect();
    weighted_binary_loss(rerank_score(params, query, positive), &neg)
}

pub fn reranker_grad(
    params: &RerankerParams,
    query: &str,
    positive: &str,
    negatives: &[String],
) -> Result<(f64, RerankerGrad)> {
    if negatives.is_empty() {
        return Err(Error::InvalidBatch("reranker loss needs at least one negative".into()));
    }
    let pos = params.forward(query, positive);
    let negs: Vec<JointForward> = negatives.iter().map(|p| params.forward(query, p)).collect();
    let neg_scores: Vec<f64> = negs.iter().map(|f| f.score).collect();
    let loss = weighted_binary_loss(pos.score, &neg_scores)?;
    let mut grad = RerankerGrad::zeros_like(params);
    params.backward(&pos, sigmoid(pos.score) - 1.0, &mut grad);
    let k = negatives.len() as f64;
    for f in &negs {
        params.backward(f, sigmoid(f.score) / k, &mut grad);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankTriplet {
    pub query: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

/// Gradient descent on the weighted binary loss, averaged over each batch
/// of triplets.
pub fn train_reranker(
    mut params: RerankerParams,
    triplets: &[RerankTriplet],
    config: &TrainConfig,
) -> Result<Trained<RerankerParams>> {
    config.check(1)?;
    if triplets.is_empty() {
        return Err(Error::InvalidBatch("no reranker triplets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut grad = RerankerGrad::zeros_like(&params);
            let mut batch_loss = 0.0;
            for &i in chunk {
                let t = &triplets[i];
                let (loss, g) = reranker_grad(&params, &t.query, &t.positive, &t.negatives)?;
                batch_loss += loss;
                grad.table += &g.table;
                grad.projection += &g.projection;
                grad.gates += &g.gates;
                grad.weight += &g.weight;
            }
            let scale = 1.0 / chunk.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            grad.table *= scale;
            grad.projection *= scale;
            grad.gates *= scale;
            grad.weight *= scale;
            params.apply(&grad, config.learning_rate);
            total += batch_loss;
            steps += 1;
        }
        let mean = total / steps as f64;
        debug!("reranker epoch {epoch}: loss {mean:.6}");
        loss_curve.push(mean);
    }
    Ok(Trained { params, loss_curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_config(seed: u64) -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            output_dim: 8,
            hash_buckets: 16,
            seed,
        }
    }

    fn params(seed: u64) -> EncoderParams {
        let vocab = Vocab::from_texts(["a b c d e f g h"], 16).unwrap();
        EncoderParams::init(vocab, &small_config(seed)).unwrap()
    }

    #[test]
    fn oov_tokens_share_hash_rows() {
        let v = Vocab::from_texts(["Alpha beta"], 8).unwrap();
        assert_eq!(v.size(), 2);
        assert_eq!(v.row("alpha"), 0);
        let r = v.row("zeta");
        assert!((2..10).contains(&r));
        assert_eq!(r, v.row("zeta"));
        assert_eq!(fnv1a(""), 0xcbf29ce484222325);
        assert_eq!(fnv1a("a"), 0xaf63dc4c8601ec8c);
        assert!(Vocab::new(Vec::new(), 0).is_err());
    }

    #[test]
    fn mean_pooling_ignores_repeats() {
        let p = params(1);
        assert_eq!(p.encode("a a a"), p.encode("a"));
        assert_eq!(p.encode("A"), p.encode("a"));
        let e = p.encode("a b");
        assert!((e.unit.dot(&e.unit) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_is_degenerate() {
        let e = params(1).encode("   ");
        assert!(e.is_degenerate());
        assert!(e.unit.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeds_change_embeddings() {
        assert_ne!(params(1).encode("a"), params(2).encode("a"));
    }

    #[test]
    fn cosine_basics() {
        let a = array![1.0, 2.0, 3.0];
        let b = array![0.0, 3.0, -2.0];
        assert!((cosine_score(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(a.view(), b.view()).unwrap(), 0.0);
        let c = array![0.5, -1.0, 2.0];
        let scaled = &a * 7.5;
        let lhs = cosine_score(scaled.view(), c.view()).unwrap();
        let rhs = cosine_score(a.view(), c.view()).unwrap();
        assert!((lhs - rhs).abs() < 1e-15);
        let z = Array1::zeros(3);
        assert!(matches!(cosine_score(z.view(), a.view()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn uniform_scores_give_log_batch_size() {
        for b in [2usize, 4, 8] {
            let s = Array2::from_elem((b, b), 0.3);
            for tau in [0.01, 1.0] {
                let l = contrastive_loss_from_scores(&s, tau);
                assert!((l - (b as f64).ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn two_by_two_closed_form() {
        let s = array![[1.0, 0.0], [0.0, 1.0]];
        let row1 = (1.0 + (-1.0f64).exp()).ln();
        // both rows are symmetric here
        assert!((contrastive_loss_from_scores(&s, 1.0) - row1).abs() < 1e-15);
    }

    #[test]
    fn batch_validation() {
        let p = params(3);
        let one = vec![TrainingPair::new("a", "b", "x")];
        assert!(contrastive_loss(&p, &one, 1.0).is_err());
        let dup = vec![TrainingPair::new("a", "b", "x"), TrainingPair::new("c", "d", "x")];
        assert!(matches!(contrastive_loss(&p, &dup, 1.0), Err(Error::InvalidBatch(_))));
        let empty = vec![TrainingPair::new("a", "", "x"), TrainingPair::new("c", "d", "y")];
        assert!(matches!(contrastive_loss(&p, &empty, 1.0), Err(Error::Degenerate(_))));
        let ok = vec![TrainingPair::new("a", "b", "x"), TrainingPair::new("c", "d", "y")];
        assert!(contrastive_loss(&p, &ok, 0.0).is_err());
        assert!(contrastive_loss(&p, &ok, 1.0).unwrap().loss >= 0.0);
    }

    #[test]
    fn extra_negatives_extend_the_score_matrix() {
        let p = params(3);
        let mut a = TrainingPair::new("a", "b c", "x");
        a.negatives = vec![("z".into(), "e f".into()), ("y".into(), "d".into())];
        let b = TrainingPair::new("c", "d", "y");
        let out = contrastive_loss(&p, &[a, b], 1.0).unwrap();
        // "y" is a batch positive, so only "z" is appended
        assert_eq!(out.scores.dim(), (2, 3));
    }

    #[test]
    fn scaling_all_embeddings_is_a_flat_direction() {
        let p = params(5);
        let batch = vec![
            TrainingPair::new("a b", "c d", "1"),
            TrainingPair::new("e", "f g", "2"),
            TrainingPair::new("h a", "zz", "3"),
        ];
        let (_, g) = contrastive_grad(&p, &batch, 0.5).unwrap();
        let along_projection: f64 = (&g.projection * &p.projection).sum();
        let along_table: f64 = (&g.table * &p.table).sum();
        let scale = g.norm() * (p.projection.iter().map(|v| v * v).sum::<f64>().sqrt() + 1.0);
        assert!(along_projection.abs() < 1e-10 * scale, "{along_projection}");
        assert!(along_table.abs() < 1e-10 * scale, "{along_table}");
    }

    fn rparams(seed: u64) -> RerankerParams {
        let vocab = Vocab::from_texts(["a b c d e f"], 16).unwrap();
        RerankerParams::init(vocab, &small_config(seed)).unwrap()
    }

    #[test]
    fn reranker_score_properties() {
        let mut p = rparams(2);
        assert!(p.vocab.tokens().contains(&SEPARATOR_TOKEN.to_string()));
        let s = rerank_score(&p, "a b", "c");
        assert_ne!(s, rerank_score(&p, "c", "a b"));
        assert!(rerank_score(&p, "", "").is_finite());
        let mut doubled = p.clone();
        doubled.weight *= 2.0;
        assert!((rerank_score(&doubled, "a b", "c") - 2.0 * s).abs() < 1e-15);
        p.weight.fill(0.0);
        assert_eq!(rerank_score(&p, "a b", "c"), 0.0);
    }

    #[test]
    fn binary_loss_values() {
        let l = weighted_binary_loss(0.0, &[0.0]).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        let l4 = weighted_binary_loss(0.0, &[0.0; 4]).unwrap();
        assert!((l4 - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(weighted_binary_loss(1e4, &[-1e4, -1e4]).unwrap() < 1e-300);
        assert!(weighted_binary_loss(0.0, &[]).is_err());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let p = params(9);
        let pairs = vec![TrainingPair::new("a", "b", "1"), TrainingPair::new("c", "d", "2")];
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let out = train_dual_encoder(p.clone(), &pairs, &cfg).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.loss_curve.len(), 3);

        let r = rparams(9);
        let trips = vec![RerankTriplet {
            query: "a".into(),
            positive: "b".into(),
            negatives: vec!["c".into()],
        }];
        let out = train_reranker(r.clone(), &trips, &cfg).unwrap();
        assert_eq!(out.params, r);
    }

    #[test]
    fn batches_avoid_repeated_keys() {
        let keys = ["a", "a", "a", "b", "c", "b"];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = keyed_batches(&keys, 3, &mut rng);
        for b in &batches {
            let ks: HashSet<_> = b.iter().map(|&i| keys[i]).collect();
            assert_eq!(ks.len(), b.len());
            assert!(b.len() >= 2);
        }
        let same = ["x", "x", "x"];
        assert!(keyed_batches(&same, 2, &mut rng).is_empty());
    }
}
