//! Parameter files (versioned JSON) and loss-curve CSV.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderParams, RerankerParams, Vocab};
use crate::error::{Error, Result};

const FORMAT: &str = "inpaint-params";
const VERSION: u32 = 1;
const HASH: &str = "fnv1a-64";

#[derive(Debug, Serialize, Deserialize)]
struct ParamsFile {
    format: String,
    version: u32,
    kind: String,
    vocab_size: usize,
    embed_dim: usize,
    output_dim: usize,
    hash_buckets: usize,
    hash: String,
    seed: u64,
    vocab: Vec<String>,
    /// Row-major `(vocab_size + hash_buckets) × embed_dim`.
    table: Vec<f64>,
    /// Row-major `embed_dim × output_dim`.
    projection: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gates: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<Vec<f64>>,
}

fn flat(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

fn matrix(name: &str, rows: usize, cols: usize, data: Vec<f64>) -> Result<Array2<f64>> {
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Format(format!("{name}: expected {rows}×{cols} values ({e})")))
}

impl ParamsFile {
    fn header(kind: &str, vocab: &Vocab, table: &Array2<f64>, projection: &Array2<f64>, seed: u64) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            vocab_size: vocab.size(),
            embed_dim: table.ncols(),
            output_dim: projection.ncols(),
            hash_buckets: vocab.buckets(),
            hash: HASH.into(),
            seed,
            vocab: vocab.tokens().to_vec(),
            table: flat(table),
            projection: flat(projection),
            gates: None,
            weight: None,
        }
    }

    fn check(&self, kind: &str) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported params file {} v{}",
                self.format, self.version
            )));
        }
        if self.kind != kind {
            return Err(Error::Format(format!("expected {kind} params, found {}", self.kind)));
        }
        if self.hash != HASH {
            return Err(Error::Format(format!("unsupported bucket hash {}", self.hash)));
        }
        if self.vocab.len() != self.vocab_size {
            return Err(Error::Format("vocab_size does not match vocabulary".into()));
        }
        Ok(())
    }

    fn parts(&mut self) -> Result<(Vocab, Array2<f64>, Array2<f64>)> {
        let vocab = Vocab::new(std::mem::take(&mut self.vocab), self.hash_buckets)?;
        if vocab.size() != self.vocab_size {
            return Err(Error::Format("vocabulary has duplicate tokens".into()));
        }
        let table = matrix("table", vocab.rows(), self.embed_dim, std::mem::take(&mut self.table))?;
        let projection = matrix(
            "projection",
            self.embed_dim,
            self.output_dim,
            std::mem::take(&mut self.projection),
        )?;
        Ok((vocab, table, projection))
    }
}

pub fn encoder_to_json(p: &EncoderParams) -> String {
    let file = ParamsFile::header("dual-encoder", &p.vocab, &p.table, &p.projection, p.seed);
    serde_json::to_string(&file).expect("params serialize")
}

pub fn encoder_from_json(json: &str) -> Result<EncoderParams> {
    let mut file: ParamsFile = serde_json::from_str(json)?;
    file.check("dual-encoder")?;
    let (vocab, table, projection) = file.parts()?;
    let p = EncoderParams {
        vocab,
        seed: file.seed,
        table,
        projection,
    };
    p.validate()?;
    Ok(p)
}

pub fn reranker_to_json(p: &RerankerParams) -> String {
    let mut file = ParamsFile::header("reranker", &p.vocab, &p.table, &p.projection, p.seed);
    file.gates = Some(flat(&p.gates));
    file.weight = Some(p.weight.to_vec());
    serde_json::to_string(&file).expect("params serialize")
}

pub fn reranker_from_json(json: &str) -> Result<RerankerParams> {
    let mut file: ParamsFile = serde_json::from_str(json)?;
    file.check("reranker")?;
    let gates = file.gates.take().ok_or_else(|| Error::Format("missing gates".into()))?;
    let weight = file.weight.take().ok_or_else(|| Error::Format("missing weight".into()))?;
    let (vocab, table, projection) = file.parts()?;
    let p = RerankerParams {
        vocab,
        seed: file.seed,
        gates: matrix("gates", 2, file.embed_dim, gates)?,
        weight: Array1::from(weight),
        table,
        projection,
    };
    p.validate()?;
    Ok(p)
}

pub fn save_encoder(path: &Path, p: &EncoderParams) -> Result<()> {
    fs::write(path, encoder_to_json(p)).map_err(Error::at(path))?;
    Ok(())
}

pub fn load_encoder(path: &Path) -> Result<EncoderParams> {
    encoder_from_json(&fs::read_to_string(path).map_err(Error::at(path))?)
}

pub fn save_reranker(path: &Path, p: &RerankerParams) -> Result<()> {
    fs::write(path, reranker_to_json(p)).map_err(Error::at(path))?;
    Ok(())
}

pub fn load_reranker(path: &Path) -> Result<RerankerParams> {
    reranker_from_json(&fs::read_to_string(path).map_err(Error::at(path))?)
}

/// SHA-256 of the serialized encoder parameters.
pub fn fingerprint(p: &EncoderParams) -> [u8; 32] {
    Sha256::digest(encoder_to_json(p).as_bytes()).into()
}

pub fn write_loss_curve(w: &mut impl Write, curve: &[f64]) -> Result<()> {
    writeln!(w, "epoch,mean_loss")?;
    for (epoch, loss) in curve.iter().enumerate() {
        writeln!(w, "{},{}", epoch + 1, loss)?;
    }
    Ok(())
}
