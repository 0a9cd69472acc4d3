//! Exact top-K search over unit-normalized passage embeddings.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "DIIX"
//! version      u32      1
//! dim          u32
//! count        u64
//! fingerprint  32 bytes SHA-256 of the encoder params file
//! ids          count × (u32 byte length, UTF-8 bytes)
//! vectors      count × dim × f32, row-major
//! ```

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use log::warn;
use ndarray::ArrayView1;
use rayon::prelude::*;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::model_io::fingerprint;
use crate::passage::PassageRecord;

const MAGIC: &[u8; 4] = b"DIIX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    ids: Vec<String>,
    dim: usize,
    /// `ids.len() × dim`, each row unit length.
    vectors: Vec<f32>,
    fingerprint: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Total order used for rankings: score descending, then id ascending.
pub fn rank_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

impl Index {
    /// Normalizes and stores `vectors`. Zero or non-finite vectors are left
    /// out and their ids returned.
    pub fn from_vectors(
        entries: impl IntoIterator<Item = (String, Vec<f64>)>,
        dim: usize,
        fingerprint: [u8; 32],
    ) -> Result<(Self, Vec<String>)> {
        let mut seen = HashSet::new();
        let mut ids = Vec::new();
        let mut vectors = Vec::new();
        let mut excluded = Vec::new();
        for (id, v) in entries {
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            if v.len() != dim {
                return Err(Error::Config(format!(
                    "vector for {id} has dimension {}, index has {dim}",
                    v.len()
                )));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                warn!("excluding {id}: degenerate embedding");
                excluded.push(id);
                continue;
            }
            vectors.extend(v.iter().map(|x| (x / norm) as f32));
            ids.push(id);
        }
        Ok((
            Self {
                ids,
                dim,
                vectors,
                fingerprint,
            },
            excluded,
        ))
    }

    /// Encodes every passage (in parallel, order preserved).
    pub fn build(params: &EncoderParams, passages: &[PassageRecord]) -> Result<(Self, Vec<String>)> {
        let encoded: Vec<(String, Vec<f64>)> = passages
            .par_iter()
            .map(|p| {
                let e = params.encode(&p.text);
                (p.id.clone(), if e.is_degenerate() { vec![0.0; e.unit.len()] } else { e.unit.to_vec() })
            })
            .collect();
        Self::from_vectors(encoded, params.output_dim(), fingerprint(params))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Exhaustive search; at most `k` hits ordered by [`rank_order`].
    pub fn top_k(&self, query: ArrayView1<f64>, k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Config(format!(
                "query has dimension {}, index has {}",
                query.len(),
                self.dim
            )));
        }
        let norm = query.dot(&query).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Degenerate("query embedding is zero".into()));
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| {
                let s: f64 = self
                    .vector(i)
                    .iter()
                    .zip(query.iter())
                    .map(|(&v, &q)| f64::from(v) * q)
                    .sum();
                (i, s / norm)
            })
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| {
            rank_order((&self.ids[a.0], a.1), (&self.ids[b.0], b.1))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(i, score)| Hit {
                id: self.ids[i].clone(),
                score,
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(52 + self.vectors.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an index file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = usize::try_from(r.u64()?).map_err(|_| Error::Format("count overflow".into()))?;
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("id is not UTF-8".into()))?;
            ids.push(id.to_string());
        }
        let n = count
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("size overflow".into()))?;
        let raw = r.take(n * 4)?;
        let vectors = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after vectors".into()));
        }
        Ok(Self {
            ids,
            dim,
            vectors,
            fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::at(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(Error::at(path))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated index file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn tiny() -> Index {
        let entries = vec![
            ("a".to_string(), vec![1.0, 0.0, 0.0]),
            ("b".to_string(), vec![0.0, 2.0, 0.0]),
            ("c".to_string(), vec![1.0, 1.0, 0.0]),
        ];
        Index::from_vectors(entries, 3, [7; 32]).unwrap().0
    }

    #[test]
    fn stored_vector_ranks_first() {
        let idx = tiny();
        let q = Array1::from(vec![0.0, 3.0, 0.0]);
        let hits = idx.top_k(q.view(), 1).unwrap();
        assert_eq!(hits[0].id, "b");
        assert!((hits[0].score - 1.0).abs() < 1e-7);
        assert_eq!(idx.top_k(q.view(), 10).unwrap().len(), 3);
    }

    #[test]
    fn degenerate_inputs() {
        let entries = vec![("z".to_string(), vec![0.0, 0.0]), ("y".to_string(), vec![1.0, 0.0])];
        let (idx, excluded) = Index::from_vectors(entries, 2, [0; 32]).unwrap();
        assert_eq!(excluded, vec!["z"]);
        assert_eq!(idx.len(), 1);
        let zero = Array1::zeros(2);
        assert!(matches!(idx.top_k(zero.view(), 1), Err(Error::Degenerate(_))));
        let q = Array1::from(vec![1.0, 0.0]);
        assert!(idx.top_k(q.view(), 0).is_err());

        let dup = vec![("y".to_string(), vec![1.0]), ("y".to_string(), vec![2.0])];
        assert!(matches!(Index::from_vectors(dup, 1, [0; 32]), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn ties_break_by_id() {
        let entries = vec![
            ("m".to_string(), vec![1.0, 0.0]),
            ("b".to_string(), vec![1.0, 0.0]),
            ("x".to_string(), vec![1.0, 0.0]),
        ];
        let (idx, _) = Index::from_vectors(entries, 2, [0; 32]).unwrap();
        let q = Array1::from(vec![1.0, 0.0]);
        let ids: Vec<_> = idx.top_k(q.view(), 3).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(ids, vec!["b", "m", "x"]);
    }

    #[test]
    fn bytes_round_trip() {
        let idx = tiny();
        let bytes = idx.to_bytes();
        assert_eq!(&bytes[..4], b"DIIX");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(Index::from_bytes(&bytes).unwrap(), idx);
        assert!(Index::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
