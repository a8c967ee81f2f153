//! Exact dense retrieval: embed the corpus once, then answer ranked
//! dot-product queries with a bounded min-heap scan.
//!
//! Passage embeddings are quantized to f32 at build time (the on-disk
//! matrix is f32), and every score is the f64-accumulated dot product
//! of f32 values, so scores recompute bit-exactly from a loaded index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QaDataset, SentenceId};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::io;
use crate::real::Real;

const IDX_MAGIC: &[u8; 8] = b"EAUGIDX1";

/// Immutable corpus-side index: ids in ascending order plus a
/// row-major MxD f32 embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    pub spec_id: String,
    pub dim: usize,
    ids: Vec<SentenceId>,
    data: Vec<f32>,
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[SentenceId] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(IDX_MAGIC);
        io::put_str(&mut buf, &self.spec_id);
        io::put_u64(&mut buf, self.ids.len() as u64);
        io::put_u64(&mut buf, self.dim as u64);
        for id in &self.ids {
            io::put_u64(&mut buf, id.0);
        }
        for v in &self.data {
            io::put_f32(&mut buf, *v);
        }
        io::write_bytes(path, &buf)
    }

    pub fn load(path: &Path) -> Result<VectorIndex> {
        let mut r = io::BinReader::open(path)?;
        r.magic(IDX_MAGIC)?;
        let spec_id = r.str("spec_id")?;
        let m = r.u64("row count")? as usize;
        let dim = r.u64("dim")? as usize;
        let ids: Vec<SentenceId> = r.u64_vec(m, "ids")?.into_iter().map(SentenceId).collect();
        let data = r.f32_vec(m * dim, "matrix")?;
        r.expect_eof()?;
        for pair in ids.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::parse(path, 0, "index ids not strictly ascending"));
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "index {} contains non-finite embeddings",
                path.display()
            )));
        }
        Ok(VectorIndex {
            spec_id,
            dim,
            ids,
            data,
        })
    }
}

/// Embed every corpus sentence (ascending id order) with the encoder's
/// passage tower.
pub fn build_index<R: Real, E: TextEncoder<R>>(corpus: &Corpus, enc: &E) -> Result<VectorIndex> {
    if corpus.is_empty() {
        return Err(Error::InvalidArg("cannot index an empty corpus".into()));
    }
    let spec = enc.spec();
    let mut ids = Vec::with_capacity(corpus.len());
    let mut data = Vec::with_capacity(corpus.len() * spec.dim);
    for sentence in corpus.iter() {
        let emb = enc.encode_passage(&sentence.text).map_err(|e| match e {
            Error::Lookup(what) => Error::Lookup(format!("{what} (sentence {})", sentence.sentence_id)),
            other => other,
        })?;
        if emb.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite embedding for sentence {}",
                sentence.sentence_id
            )));
        }
        ids.push(sentence.sentence_id);
        data.extend(emb.iter().map(|v| v.as_f64() as f32));
    }
    Ok(VectorIndex {
        spec_id: spec.spec_id.clone(),
        dim: spec.dim,
        ids,
        data,
    })
}

/// Quantize a query embedding to the index's f32 score domain.
pub fn quantize_query<R: Real>(q_vec: &[R]) -> Vec<f32> {
    q_vec.iter().map(|v| v.as_f64() as f32).collect()
}

fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

// Heap entry ordered so the max-heap surfaces the *worst* kept hit:
// lowest score first, ties resolved toward the larger sentence id.
#[derive(Debug, PartialEq)]
struct HeapEntry {
    score: f64,
    id: SentenceId,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .reverse()
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn scan_rows(
    index: &VectorIndex,
    q_vec: &[f32],
    k: usize,
    rows: std::ops::Range<usize>,
) -> BinaryHeap<HeapEntry> {
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for i in rows {
        let entry = HeapEntry {
            score: dot_f32(index.row(i), q_vec),
            id: index.ids[i],
        };
        if heap.len() < k {
            heap.push(entry);
        } else if entry < *heap.peek().unwrap() {
            heap.pop();
            heap.push(entry);
        }
    }
    heap
}

/// The k highest-scoring sentences for a query embedding, sorted by
/// descending score with ties broken by ascending sentence id.
pub fn top_k(index: &VectorIndex, q_vec: &[f32], k: usize) -> Result<Vec<(SentenceId, f64)>> {
    if q_vec.len() != index.dim {
        return Err(Error::DimensionMismatch {
            expected: index.dim,
            found: q_vec.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let heap = scan_rows(index, q_vec, k, 0..index.len());
    Ok(heap
        .into_sorted_vec()
        .into_iter()
        .map(|e| (e.id, e.score))
        .collect())
}

/// Partitioned scan with a deterministic heap merge. Produces exactly
/// the same ranking as [`top_k`] for any partition count.
pub fn top_k_partitioned(
    index: &VectorIndex,
    q_vec: &[f32],
    k: usize,
    partitions: usize,
) -> Result<Vec<(SentenceId, f64)>> {
    if q_vec.len() != index.dim {
        return Err(Error::DimensionMismatch {
            expected: index.dim,
            found: q_vec.len(),
        });
    }
    if k == 0 || index.is_empty() {
        return Ok(Vec::new());
    }
    let parts = partitions.clamp(1, index.len());
    let chunk = index.len().div_ceil(parts);
    let mut merged: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
    for p in 0..parts {
        let lo = p * chunk;
        let hi = ((p + 1) * chunk).min(index.len());
        for entry in scan_rows(index, q_vec, k, lo..hi) {
            if merged.len() < k {
                merged.push(entry);
            } else if entry < *merged.peek().unwrap() {
                merged.pop();
                merged.push(entry);
            }
        }
    }
    Ok(merged
        .into_sorted_vec()
        .into_iter()
        .map(|e| (e.id, e.score))
        .collect())
}

/// One retrieval hit.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalEntry {
    pub query_id: String,
    pub sentence_id: SentenceId,
    pub score: f64,
    pub rank: u32,
}

/// Ranked retrieval results of one encoder over a query batch. The
/// hits are implicitly positive-labeled candidates; `filtered` marks
/// whether the oracle has already pruned them.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSet {
    pub spec_id: String,
    pub k: usize,
    pub filtered: bool,
    pub entries: Vec<RetrievalEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RetrievalRecord {
    query_id: String,
    sentence_id: u64,
    score: f64,
    rank: u32,
    spec_id: String,
    filtered: bool,
}

impl RetrievalSet {
    /// Exact-match keys for set algebra over retrievals.
    pub fn keys(&self) -> std::collections::BTreeSet<(String, SentenceId)> {
        self.entries
            .iter()
            .map(|e| (e.query_id.clone(), e.sentence_id))
            .collect()
    }

    pub fn query_ids(&self) -> std::collections::BTreeSet<&str> {
        self.entries.iter().map(|e| e.query_id.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut last: Option<&RetrievalEntry> = None;
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert((e.query_id.clone(), e.sentence_id)) {
                return Err(Error::Schema(format!(
                    "duplicate retrieval ({}, {})",
                    e.query_id, e.sentence_id
                )));
            }
            if e.rank == 0 || e.rank as usize > self.k {
                return Err(Error::Schema(format!(
                    "rank {} outside 1..={} for query {}",
                    e.rank, self.k, e.query_id
                )));
            }
            if let Some(prev) = last {
                if prev.query_id == e.query_id {
                    if e.rank <= prev.rank {
                        return Err(Error::Schema(format!(
                            "ranks not increasing for query {}",
                            e.query_id
                        )));
                    }
                    if e.score > prev.score {
                        return Err(Error::Schema(format!(
                            "scores increase with rank for query {}",
                            e.query_id
                        )));
                    }
                }
            }
            last = Some(e);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records = self.entries.iter().map(|e| RetrievalRecord {
            query_id: e.query_id.clone(),
            sentence_id: e.sentence_id.0,
            score: e.score,
            rank: e.rank,
            spec_id: self.spec_id.clone(),
            filtered: self.filtered,
        });
        io::write_jsonl(path, records)
    }

    pub fn load(path: &Path) -> Result<RetrievalSet> {
        let records: Vec<RetrievalRecord> = io::read_jsonl(path)?;
        if records.is_empty() {
            return Err(Error::Schema(format!(
                "retrieval file {} is empty",
                path.display()
            )));
        }
        let spec_id = records[0].spec_id.clone();
        let filtered = records[0].filtered;
        let mut k = 0usize;
        let mut entries = Vec::with_capacity(records.len());
        for (i, rec) in records.into_iter().enumerate() {
            if rec.spec_id != spec_id {
                return Err(Error::parse(path, i + 1, "mixed spec_ids in one retrieval file"));
            }
            if rec.filtered != filtered {
                return Err(Error::parse(path, i + 1, "mixed filtered flags in one retrieval file"));
            }
            k = k.max(rec.rank as usize);
            entries.push(RetrievalEntry {
                query_id: rec.query_id,
                sentence_id: SentenceId(rec.sentence_id),
                score: rec.score,
                rank: rec.rank,
            });
        }
        let set = RetrievalSet {
            spec_id,
            k,
            filtered,
            entries,
        };
        set.validate()?;
        Ok(set)
    }
}

/// One-shot retrieval for every query of the (training) dataset.
pub fn retrieve_all<R: Real, E: TextEncoder<R>>(
    index: &VectorIndex,
    dataset: &QaDataset,
    enc: &E,
    k: usize,
) -> Result<RetrievalSet> {
    if index.spec_id != enc.spec().spec_id {
        return Err(Error::SpecMismatch {
            expected: index.spec_id.clone(),
            found: enc.spec().spec_id.clone(),
            context: "retrieve_all".into(),
        });
    }
    let mut entries = Vec::new();
    for (query_id, info) in dataset.queries() {
        let q_emb = enc.encode_query(&info.text).map_err(|e| match e {
            Error::Lookup(what) => Error::Lookup(format!("{what} (query {query_id})")),
            other => other,
        })?;
        let q32 = quantize_query(&q_emb);
        for (rank, (sentence_id, score)) in top_k(index, &q32, k)?.into_iter().enumerate() {
            entries.push(RetrievalEntry {
                query_id: query_id.clone(),
                sentence_id,
                score,
                rank: rank as u32 + 1,
            });
        }
    }
    Ok(RetrievalSet {
        spec_id: index.spec_id.clone(),
        k,
        filtered: false,
        entries,
    })
}
