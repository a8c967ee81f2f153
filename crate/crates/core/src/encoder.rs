//! Bi-encoder: pluggable text-to-vector interface with a trainable
//! linear reference encoder over hashed n-gram features, plus a loader
//! for precomputed embeddings.
//!
//! The reference encoder is two linear maps `W_q`, `W_p` applied to a
//! hashed sparse bag of word unigrams, word bigrams and character
//! trigrams. It is trained with softmax cross-entropy over in-batch
//! negatives: for each query in a batch, the other queries' positive
//! sentences act as negatives.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_text, text_id, QaDataset};
use crate::error::{Error, Result};
use crate::hash::{fnv1a_seeded, mix64};
use crate::io;
use crate::linalg::Matrix;
use crate::real::{dot_f64, Real};

const ENC_MAGIC: &[u8; 8] = b"EAUGENC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ReferenceTrainable,
    Precomputed,
}

/// Everything that identifies an encoder: its name, dimensions and the
/// seed of its hashed feature space. Two specs with different seeds
/// hash the same text into different buckets, which is what makes an
/// ensemble of reference encoders retrieve diverse candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub spec_id: String,
    pub dim: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub kind: EncoderKind,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.spec_id.is_empty() {
            return Err(Error::Config("spec_id must be non-empty".into()));
        }
        if self.dim < 1 {
            return Err(Error::Config(format!("{}: dim must be >= 1", self.spec_id)));
        }
        if self.feature_dim < self.dim {
            return Err(Error::Config(format!(
                "{}: feature_dim {} must be >= dim {}",
                self.spec_id, self.feature_dim, self.dim
            )));
        }
        Ok(())
    }
}

/// Sparse L2-normalized feature vector. Indices are strictly
/// increasing bucket positions below the spec's feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<R> {
    indices: Vec<u32>,
    values: Vec<R>,
}

impl<R: Real> FeatureVector<R> {
    pub fn empty() -> Self {
        FeatureVector {
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    fn from_counts(counts: BTreeMap<u32, u64>) -> Self {
        let norm: f64 = counts
            .values()
            .map(|&c| (c as f64) * (c as f64))
            .sum::<f64>()
            .sqrt();
        let mut indices = Vec::with_capacity(counts.len());
        let mut values = Vec::with_capacity(counts.len());
        for (idx, count) in counts {
            indices.push(idx);
            values.push(R::of(count as f64 / norm));
        }
        FeatureVector { indices, values }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, R)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all values by a constant (the encoder map is linear, so
    /// `encode(alpha * x) == alpha * encode(x)`).
    pub fn scaled(&self, alpha: R) -> Self {
        FeatureVector {
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| *v * alpha).collect(),
        }
    }
}

fn bucket(spec: &EncoderSpec, family: u8, parts: &[&[u8]]) -> u32 {
    let mut all: Vec<&[u8]> = Vec::with_capacity(parts.len() + 1);
    let fam = [family];
    all.push(&fam);
    all.extend_from_slice(parts);
    (mix64(fnv1a_seeded(spec.seed, &all)) % spec.feature_dim as u64) as u32
}

/// Hash a text into the spec's feature space: word unigrams, word
/// bigrams and character trigrams, counted per bucket and
/// L2-normalized. Deterministic for fixed (text, spec).
pub fn featurize<R: Real>(text: &str, spec: &EncoderSpec) -> FeatureVector<R> {
    let normalized = normalize_text(text);
    if normalized.is_empty() {
        return FeatureVector::empty();
    }
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    let tokens: Vec<&str> = normalized.split_whitespace().collect();
    for token in &tokens {
        *counts.entry(bucket(spec, b'u', &[token.as_bytes()])).or_default() += 1;
    }
    for pair in tokens.windows(2) {
        *counts
            .entry(bucket(spec, b'b', &[pair[0].as_bytes(), pair[1].as_bytes()]))
            .or_default() += 1;
    }
    let chars: Vec<char> = normalized.chars().collect();
    let mut tri = String::new();
    for window in chars.windows(3) {
        tri.clear();
        tri.extend(window);
        *counts.entry(bucket(spec, b'c', &[tri.as_bytes()])).or_default() += 1;
    }
    FeatureVector::from_counts(counts)
}

/// Dot-product similarity of two embeddings.
pub fn sim<R: Real>(q_vec: &[R], p_vec: &[R]) -> Result<R> {
    if q_vec.len() != p_vec.len() {
        return Err(Error::DimensionMismatch {
            expected: q_vec.len(),
            found: p_vec.len(),
        });
    }
    Ok(R::of(dot_f64(q_vec, p_vec)))
}

/// Text-to-vector interface shared by the trainable reference encoder
/// and the precomputed-embedding loader.
pub trait TextEncoder<R: Real> {
    fn spec(&self) -> &EncoderSpec;
    fn encode_query(&self, text: &str) -> Result<Vec<R>>;
    fn encode_passage(&self, text: &str) -> Result<Vec<R>>;
}

/// Trainable linear bi-encoder: untied query and passage projections
/// over the same hashed feature space.
#[derive(Debug, Clone)]
pub struct BiEncoder<R> {
    pub spec: EncoderSpec,
    w_q: Matrix<R>,
    w_p: Matrix<R>,
    pub train_log: Vec<f64>,
}

impl<R: Real> BiEncoder<R> {
    pub fn zeros(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let (d, v) = (spec.dim, spec.feature_dim);
        Ok(BiEncoder {
            spec,
            w_q: Matrix::zeros(d, v),
            w_p: Matrix::zeros(d, v),
            train_log: Vec::new(),
        })
    }

    /// Seeded uniform(-1/sqrt(V), +1/sqrt(V)) initialization, which
    /// keeps initial dot products scale-stable.
    pub fn random_init(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (d, v) = (spec.dim, spec.feature_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (v as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let sample = |rng: &mut ChaCha8Rng| -> Vec<R> {
            (0..d * v).map(|_| R::of(dist.sample(rng))).collect()
        };
        let w_q = Matrix::from_vec(d, v, sample(&mut rng));
        let w_p = Matrix::from_vec(d, v, sample(&mut rng));
        Ok(BiEncoder {
            spec,
            w_q,
            w_p,
            train_log: Vec::new(),
        })
    }

    /// Tied-tower encoder at seeded initialization: both towers share
    /// one random projection, so the dot product estimates lexical
    /// overlap in the spec's hash space. This is the fixed
    /// representation the pair classifier (filtering oracle) is built
    /// on — analogous to classifying on the underlying language model
    /// rather than on the retriever's contrastively trained weights,
    /// which never see the words that make a candidate noise.
    pub fn lexical_init(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let (d, v) = (spec.dim, spec.feature_dim);
        let seed = crate::hash::derive_seed(spec.seed, "lexical-encoder", &spec.spec_id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Norm-preserving scale: entries with variance 1/d keep
        // E[sim(q, p)] equal to the feature-space dot product.
        let bound = (3.0 / d as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w: Vec<R> = (0..d * v).map(|_| R::of(dist.sample(&mut rng))).collect();
        let w_q = Matrix::from_vec(d, v, w.clone());
        let w_p = Matrix::from_vec(d, v, w);
        Ok(BiEncoder {
            spec,
            w_q,
            w_p,
            train_log: Vec::new(),
        })
    }

    pub fn from_weights(spec: EncoderSpec, w_q: Matrix<R>, w_p: Matrix<R>) -> Result<Self> {
        spec.validate()?;
        for (name, w) in [("W_q", &w_q), ("W_p", &w_p)] {
            if w.rows() != spec.dim || w.cols() != spec.feature_dim {
                return Err(Error::Config(format!(
                    "{name} shape {}x{} does not match spec {}x{}",
                    w.rows(),
                    w.cols(),
                    spec.dim,
                    spec.feature_dim
                )));
            }
            if !w.all_finite() {
                return Err(Error::Numerical(format!("{name} contains non-finite weights")));
            }
        }
        Ok(BiEncoder {
            spec,
            w_q,
            w_p,
            train_log: Vec::new(),
        })
    }

    pub fn w_q(&self) -> &Matrix<R> {
        &self.w_q
    }

    pub fn w_p(&self) -> &Matrix<R> {
        &self.w_p
    }

    fn project(w: &Matrix<R>, x: &FeatureVector<R>) -> Vec<R> {
        let d = w.rows();
        let mut out = vec![0.0f64; d];
        for (idx, val) in x.iter() {
            let v = val.as_f64();
            for (r, acc) in out.iter_mut().enumerate() {
                *acc += w.get(r, idx as usize).as_f64() * v;
            }
        }
        out.into_iter().map(R::of).collect()
    }

    pub fn encode_query_features(&self, x: &FeatureVector<R>) -> Vec<R> {
        Self::project(&self.w_q, x)
    }

    pub fn encode_passage_features(&self, x: &FeatureVector<R>) -> Vec<R> {
        Self::project(&self.w_p, x)
    }

    /// Serialize as header + row-major f32 weights. Loading a saved
    /// encoder and saving it again reproduces identical bytes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(ENC_MAGIC);
        io::put_str(&mut buf, &self.spec.spec_id);
        io::put_u8(&mut buf, 0); // kind: reference_trainable
        io::put_u64(&mut buf, self.spec.dim as u64);
        io::put_u64(&mut buf, self.spec.feature_dim as u64);
        io::put_u64(&mut buf, self.spec.seed);
        for w in [&self.w_q, &self.w_p] {
            for v in w.iter() {
                io::put_f32(&mut buf, v.as_f64() as f32);
            }
        }
        io::write_bytes(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = io::BinReader::open(path)?;
        r.magic(ENC_MAGIC)?;
        let spec_id = r.str("spec_id")?;
        let kind = r.u8("kind")?;
        if kind != 0 {
            return Err(Error::parse(
                path,
                0,
                format!("unsupported encoder kind byte {kind}"),
            ));
        }
        let dim = r.u64("dim")? as usize;
        let feature_dim = r.u64("feature_dim")? as usize;
        let seed = r.u64("seed")?;
        let spec = EncoderSpec {
            spec_id,
            dim,
            feature_dim,
            seed,
            kind: EncoderKind::ReferenceTrainable,
        };
        let n = dim * feature_dim;
        let w_q = r.f32_vec(n, "W_q")?;
        let w_p = r.f32_vec(n, "W_p")?;
        r.expect_eof()?;
        let lift = |v: Vec<f32>| Matrix::from_vec(dim, feature_dim, v.into_iter().map(|x| R::of(x as f64)).collect());
        BiEncoder::from_weights(spec, lift(w_q), lift(w_p))
    }
}

impl<R: Real> TextEncoder<R> for BiEncoder<R> {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode_query(&self, text: &str) -> Result<Vec<R>> {
        Ok(Self::project(&self.w_q, &featurize(text, &self.spec)))
    }

    fn encode_passage(&self, text: &str) -> Result<Vec<R>> {
        Ok(Self::project(&self.w_p, &featurize(text, &self.spec)))
    }
}

/// Embedding record of the precomputed-embedding file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub vector: Vec<f64>,
}

/// Precomputed embeddings keyed by the content-hash id of the
/// normalized text, so queries and sentences share one keying scheme.
#[derive(Debug, Clone)]
pub struct PrecomputedEncoder<R> {
    spec: EncoderSpec,
    embeddings: BTreeMap<u64, Vec<R>>,
}

impl<R: Real> PrecomputedEncoder<R> {
    pub fn load(path: &Path, spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let records: Vec<EmbeddingRecord> = io::read_jsonl(path)?;
        let mut embeddings = BTreeMap::new();
        for (i, rec) in records.into_iter().enumerate() {
            if rec.vector.len() != spec.dim {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("vector has {} dims, spec wants {}", rec.vector.len(), spec.dim),
                ));
            }
            embeddings.insert(rec.id, rec.vector.into_iter().map(R::of).collect());
        }
        Ok(PrecomputedEncoder { spec, embeddings })
    }

    fn lookup(&self, text: &str) -> Result<Vec<R>> {
        let id = text_id(&normalize_text(text));
        self.embeddings
            .get(&id.0)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("embedding id {id}")))
    }
}

impl<R: Real> TextEncoder<R> for PrecomputedEncoder<R> {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode_query(&self, text: &str) -> Result<Vec<R>> {
        self.lookup(text)
    }

    fn encode_passage(&self, text: &str) -> Result<Vec<R>> {
        self.lookup(text)
    }
}

/// Either encoder behind one concrete type, so pipeline stages do not
/// need trait objects.
#[derive(Debug, Clone)]
pub enum AnyEncoder<R> {
    Trainable(BiEncoder<R>),
    Precomputed(PrecomputedEncoder<R>),
}

impl<R: Real> TextEncoder<R> for AnyEncoder<R> {
    fn spec(&self) -> &EncoderSpec {
        match self {
            AnyEncoder::Trainable(e) => e.spec(),
            AnyEncoder::Precomputed(e) => e.spec(),
        }
    }

    fn encode_query(&self, text: &str) -> Result<Vec<R>> {
        match self {
            AnyEncoder::Trainable(e) => e.encode_query(text),
            AnyEncoder::Precomputed(e) => e.encode_query(text),
        }
    }

    fn encode_passage(&self, text: &str) -> Result<Vec<R>> {
        match self {
            AnyEncoder::Trainable(e) => e.encode_passage(text),
            AnyEncoder::Precomputed(e) => e.encode_passage(text),
        }
    }
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("non-finite {name} embedding")));
    }
    Ok(())
}

/// Row-stabilized softmax cross-entropy over a BxB similarity matrix
/// whose diagonal holds the positive pairs. Returns the mean loss.
fn loss_from_sims(sims: &[f64], b: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..b {
        let row = &sims[i * b..(i + 1) * b];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    total / b as f64
}

fn softmax_rows(sims: &[f64], b: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        let row = &sims[i * b..(i + 1) * b];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|s| (s - max).exp()).sum();
        for j in 0..b {
            out[i * b + j] = (row[j] - max).exp() / denom;
        }
    }
    out
}

struct BatchFeatures<R> {
    queries: Vec<FeatureVector<R>>,
    passages: Vec<FeatureVector<R>>,
}

fn featurize_batch<R: Real>(batch: &[(String, String)], spec: &EncoderSpec) -> BatchFeatures<R> {
    BatchFeatures {
        queries: batch.iter().map(|(q, _)| featurize(q, spec)).collect(),
        passages: batch.iter().map(|(_, p)| featurize(p, spec)).collect(),
    }
}

fn embeddings_f64<R: Real>(
    enc: &BiEncoder<R>,
    feats: &BatchFeatures<R>,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let q: Vec<Vec<f64>> = feats
        .queries
        .iter()
        .map(|x| {
            enc.encode_query_features(x)
                .into_iter()
                .map(|v| v.as_f64())
                .collect()
        })
        .collect();
    let p: Vec<Vec<f64>> = feats
        .passages
        .iter()
        .map(|x| {
            enc.encode_passage_features(x)
                .into_iter()
                .map(|v| v.as_f64())
                .collect()
        })
        .collect();
    for v in q.iter() {
        check_finite("query", v)?;
    }
    for v in p.iter() {
        check_finite("passage", v)?;
    }
    Ok((q, p))
}

fn sim_matrix(q: &[Vec<f64>], p: &[Vec<f64>]) -> Vec<f64> {
    let b = q.len();
    let mut sims = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            sims[i * b + j] = q[i].iter().zip(p[j].iter()).map(|(a, b)| a * b).sum();
        }
    }
    sims
}

/// Mean softmax cross-entropy with in-batch negatives over B
/// (query, positive sentence) pairs.
pub fn in_batch_loss<R: Real>(batch: &[(String, String)], enc: &BiEncoder<R>) -> Result<f64> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::InvalidArg(format!(
            "in-batch loss needs at least 2 pairs, got {b}"
        )));
    }
    let feats = featurize_batch(batch, &enc.spec);
    let (q, p) = embeddings_f64(enc, &feats)?;
    Ok(loss_from_sims(&sim_matrix(&q, &p), b))
}

/// Loss and analytic gradients with respect to both towers.
#[derive(Debug)]
pub struct InBatchGradients<R> {
    pub loss: f64,
    pub wrt_w_q: Matrix<R>,
    pub wrt_w_p: Matrix<R>,
}

pub fn in_batch_loss_gradient<R: Real>(
    batch: &[(String, String)],
    enc: &BiEncoder<R>,
) -> Result<InBatchGradients<R>> {
    let feats = featurize_batch(batch, &enc.spec);
    gradient_from_features(&feats, enc)
}

fn gradient_from_features<R: Real>(
    feats: &BatchFeatures<R>,
    enc: &BiEncoder<R>,
) -> Result<InBatchGradients<R>> {
    let b = feats.queries.len();
    if b < 2 {
        return Err(Error::InvalidArg(format!(
            "in-batch loss needs at least 2 pairs, got {b}"
        )));
    }
    let (d, v) = (enc.spec.dim, enc.spec.feature_dim);
    let (q, p) = embeddings_f64(enc, feats)?;
    let sims = sim_matrix(&q, &p);
    let loss = loss_from_sims(&sims, b);
    let soft = softmax_rows(&sims, b);
    let inv_b = 1.0 / b as f64;

    let mut g_q = Matrix::<f64>::zeros(d, v);
    // dL/dW_q = (1/B) sum_i (sum_j sigma_ij p_j - p_i) x_qi^T
    for i in 0..b {
        let mut coef = vec![0.0; d];
        for j in 0..b {
            let s = soft[i * b + j];
            for (t, c) in coef.iter_mut().enumerate() {
                *c += s * p[j][t];
            }
        }
        for (t, c) in coef.iter_mut().enumerate() {
            *c -= p[i][t];
        }
        for (idx, val) in feats.queries[i].iter() {
            let x = val.as_f64() * inv_b;
            for (t, c) in coef.iter().enumerate() {
                let cur = g_q.get(t, idx as usize);
                g_q.set(t, idx as usize, cur + c * x);
            }
        }
    }

    let mut g_p = Matrix::<f64>::zeros(d, v);
    // dL/dW_p = (1/B) sum_j (sum_i sigma_ij q_i - q_j) x_pj^T
    for j in 0..b {
        let mut coef = vec![0.0; d];
        for i in 0..b {
            let s = soft[i * b + j];
            for (t, c) in coef.iter_mut().enumerate() {
                *c += s * q[i][t];
            }
        }
        for (t, c) in coef.iter_mut().enumerate() {
            *c -= q[j][t];
        }
        for (idx, val) in feats.passages[j].iter() {
            let x = val.as_f64() * inv_b;
            for (t, c) in coef.iter().enumerate() {
                let cur = g_p.get(t, idx as usize);
                g_p.set(t, idx as usize, cur + c * x);
            }
        }
    }

    Ok(InBatchGradients {
        loss,
        wrt_w_q: g_q.cast(),
        wrt_w_p: g_p.cast(),
    })
}

/// Retriever training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverHyper {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RetrieverHyper {
    fn default() -> Self {
        RetrieverHyper {
            batch_size: 8,
            learning_rate: 0.5,
            epochs: 30,
            seed: 0,
        }
    }
}

/// Train a reference bi-encoder on the dataset's positive pairs with
/// seeded mini-batch gradient descent. Negative-labeled pairs are
/// ignored; in-batch negatives supply the contrast.
pub fn train_retriever<R: Real>(
    dataset: &QaDataset,
    spec: &EncoderSpec,
    hyper: &RetrieverHyper,
) -> Result<BiEncoder<R>> {
    if spec.kind != EncoderKind::ReferenceTrainable {
        return Err(Error::Config(format!(
            "{}: only reference_trainable encoders can be trained",
            spec.spec_id
        )));
    }
    if hyper.batch_size < 2 {
        return Err(Error::InvalidArg("batch_size must be >= 2".into()));
    }
    let positives = dataset.positive_texts()?;
    if positives.len() < hyper.batch_size {
        return Err(Error::InvalidArg(format!(
            "dataset has {} positive pairs but batch_size is {}; use a smaller batch",
            positives.len(),
            hyper.batch_size
        )));
    }

    let mut enc = BiEncoder::random_init(spec.clone(), hyper.seed)?;
    if hyper.epochs == 0 {
        return Ok(enc);
    }

    // Featurize each pair once; batches index into this table.
    let feats: Vec<(FeatureVector<R>, FeatureVector<R>)> = positives
        .iter()
        .map(|(q, p)| (featurize(q, spec), featurize(p, spec)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..feats.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            if chunk.len() < 2 {
                continue; // a singleton has no in-batch negatives
            }
            let batch = BatchFeatures {
                queries: chunk.iter().map(|&i| feats[i].0.clone()).collect(),
                passages: chunk.iter().map(|&i| feats[i].1.clone()).collect(),
            };
            let grads = gradient_from_features(&batch, &enc)?;
            if !grads.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss while training {}",
                    spec.spec_id
                )));
            }
            enc.w_q.axpy_neg(hyper.learning_rate, &grads.wrt_w_q.cast());
            enc.w_p.axpy_neg(hyper.learning_rate, &grads.wrt_w_p.cast());
            epoch_loss += grads.loss;
            batches += 1;
        }
        enc.train_log.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, DocRecord, QaRecord};
    use crate::io::write_jsonl;
    use proptest::prelude::*;

    fn spec(dim: usize, feature_dim: usize, seed: u64) -> EncoderSpec {
        EncoderSpec {
            spec_id: format!("test-{seed}"),
            dim,
            feature_dim,
            seed,
            kind: EncoderKind::ReferenceTrainable,
        }
    }

    #[test]
    fn empty_text_featurizes_to_empty_vector() {
        let v: FeatureVector<f64> = featurize("", &spec(4, 16, 1));
        assert!(v.is_empty());
    }

    #[test]
    fn featurize_is_deterministic() {
        let s = spec(4, 64, 7);
        let a: FeatureVector<f64> = featurize("we collect data", &s);
        let b: FeatureVector<f64> = featurize("we collect data", &s);
        assert_eq!(a, b);
    }

    #[test]
    fn featurize_normalizes_to_unit_length() {
        let v: FeatureVector<f64> = featurize("we collect your data today", &spec(8, 128, 3));
        assert!((v.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_word_change_touches_only_that_words_buckets() {
        // Hand-enumerated features for "aa bb" vs "aa cc" with V=16.
        // Each side has six features: unigrams {aa, bb|cc}, the one
        // bigram, and trigrams {"aa ", "a b|c", " bb|cc"}; only
        // unigram "aa" and trigram "aa " are shared. Seed 12 places
        // the six features of each side in distinct buckets, with the
        // shared pair disjoint from every changed bucket, so the
        // normalized vectors may differ only at the changed buckets.
        let s = spec(2, 16, 12);
        let a: FeatureVector<f64> = featurize("aa bb", &s);
        let b: FeatureVector<f64> = featurize("aa cc", &s);

        let changed_a: Vec<u32> = vec![
            bucket(&s, b'u', &[b"bb"]),
            bucket(&s, b'b', &[b"aa", b"bb"]),
            bucket(&s, b'c', &[b"a b"]),
            bucket(&s, b'c', &[b" bb"]),
        ];
        let changed_b: Vec<u32> = vec![
            bucket(&s, b'u', &[b"cc"]),
            bucket(&s, b'b', &[b"aa", b"cc"]),
            bucket(&s, b'c', &[b"a c"]),
            bucket(&s, b'c', &[b" cc"]),
        ];
        // Both sides share unigram "aa" and trigram "aa " ("aa b" vs
        // "aa c" start the same three chars: 'a','a',' ').
        let mut av: BTreeMap<u32, f64> = a.iter().map(|(i, v)| (i, v)).collect();
        let bv: BTreeMap<u32, f64> = b.iter().map(|(i, v)| (i, v)).collect();
        for (idx, val) in &bv {
            let left = av.remove(idx).unwrap_or(0.0);
            if (left - val).abs() > 1e-12 {
                assert!(
                    changed_a.contains(idx) || changed_b.contains(idx),
                    "unexpected differing bucket {idx}"
                );
            }
        }
        for (idx, left) in av {
            if left.abs() > 1e-12 {
                assert!(
                    changed_a.contains(&idx) || changed_b.contains(&idx),
                    "unexpected vanished bucket {idx}"
                );
            }
        }
    }

    #[test]
    fn zero_features_encode_to_zero() {
        let enc = BiEncoder::<f64>::random_init(spec(3, 8, 1), 42).unwrap();
        let out = enc.encode_query("").unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn identity_like_weights_select_columns() {
        let s = spec(3, 8, 1);
        let mut w = Matrix::<f64>::zeros(3, 8);
        w.set(0, 5, 1.0);
        w.set(1, 6, 1.0);
        w.set(2, 7, 1.0);
        let enc = BiEncoder::from_weights(s, w.clone(), w).unwrap();
        let x = FeatureVector {
            indices: vec![6],
            values: vec![1.0f64],
        };
        assert_eq!(enc.encode_query_features(&x), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn projection_matches_independent_matvec() {
        // Independent oracle: dense matrix-vector product computed
        // with plain nested loops over a densified feature vector.
        let s = spec(3, 5, 9);
        let enc = BiEncoder::<f64>::random_init(s.clone(), 11).unwrap();
        let x = FeatureVector {
            indices: vec![0, 2, 4],
            values: vec![0.5f64, -1.25, 2.0],
        };
        let mut dense = vec![0.0f64; 5];
        for (i, v) in x.iter() {
            dense[i as usize] = v;
        }
        let mut expected = vec![0.0f64; 3];
        for r in 0..3 {
            for c in 0..5 {
                expected[r] += enc.w_q().get(r, c) * dense[c];
            }
        }
        let got = enc.encode_query_features(&x);
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn encoding_is_linear_in_features() {
        let s = spec(4, 32, 2);
        let enc = BiEncoder::<f64>::random_init(s.clone(), 3).unwrap();
        let x: FeatureVector<f64> = featurize("we collect data", &s);
        let scaled = enc.encode_query_features(&x.scaled(2.5));
        let base = enc.encode_query_features(&x);
        for (a, b) in scaled.iter().zip(base.iter()) {
            assert!((a - 2.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn sim_basic_values() {
        assert_eq!(sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(sim(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), 32.0);
        assert!(sim(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn uniform_similarities_give_ln_b() {
        // Zero weights make every similarity zero: softmax is uniform.
        let enc = BiEncoder::<f64>::zeros(spec(3, 32, 1)).unwrap();
        let batch: Vec<(String, String)> = (0..4)
            .map(|i| (format!("query {i}"), format!("sentence {i}")))
            .collect();
        let loss = in_batch_loss(&batch, &enc).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_diagonal_drives_loss_to_zero() {
        // Plant a similarity matrix with diagonal margin 50 by
        // encoding one-hot features through hand-set weights.
        let s = spec(2, 4, 1);
        let mut w_q = Matrix::<f64>::zeros(2, 4);
        let mut w_p = Matrix::<f64>::zeros(2, 4);
        w_q.set(0, 0, 50.0);
        w_p.set(0, 0, 1.0);
        w_q.set(1, 1, 50.0);
        w_p.set(1, 1, 1.0);
        let enc = BiEncoder::from_weights(s, w_q, w_p).unwrap();
        // "aa" and "bb" hash to different buckets; pick texts whose
        // unigram buckets are 0 and 1 by constructing features directly.
        let q0 = FeatureVector { indices: vec![0], values: vec![1.0f64] };
        let p0 = q0.clone();
        let q1 = FeatureVector { indices: vec![1], values: vec![1.0f64] };
        let p1 = q1.clone();
        let feats = BatchFeatures {
            queries: vec![q0, q1],
            passages: vec![p0, p1],
        };
        let grads = gradient_from_features(&feats, &enc).unwrap();
        assert!(grads.loss < 1e-20, "loss {} not ~0", grads.loss);
    }

    #[test]
    fn loss_matches_independent_reimplementation() {
        // Straightforward re-evaluation without max subtraction.
        let s = spec(3, 64, 17);
        let enc = BiEncoder::<f64>::random_init(s.clone(), 23).unwrap();
        let batch: Vec<(String, String)> = vec![
            ("how is my data used".into(), "we use data for ads".into()),
            ("is data shared".into(), "we share with partners".into()),
            ("how long retained".into(), "kept for two years".into()),
            ("can i delete".into(), "you may request deletion".into()),
        ];
        let loss = in_batch_loss(&batch, &enc).unwrap();

        let mut expected = 0.0f64;
        let q: Vec<Vec<f64>> = batch
            .iter()
            .map(|(t, _)| enc.encode_query(t).unwrap())
            .collect();
        let p: Vec<Vec<f64>> = batch
            .iter()
            .map(|(_, t)| enc.encode_passage(t).unwrap())
            .collect();
        for i in 0..4 {
            let dots: Vec<f64> = (0..4)
                .map(|j| q[i].iter().zip(p[j].iter()).map(|(a, b)| a * b).sum())
                .collect();
            let denom: f64 = dots.iter().map(|d| d.exp()).sum();
            expected -= (dots[i].exp() / denom).ln();
        }
        expected /= 4.0;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn loss_is_invariant_under_batch_permutation() {
        let s = spec(3, 64, 4);
        let enc = BiEncoder::<f64>::random_init(s, 5).unwrap();
        let batch: Vec<(String, String)> = vec![
            ("alpha question".into(), "alpha answer".into()),
            ("beta question".into(), "beta answer".into()),
            ("gamma question".into(), "gamma answer".into()),
        ];
        let mut permuted = batch.clone();
        permuted.swap(0, 2);
        let a = in_batch_loss(&batch, &enc).unwrap();
        let b = in_batch_loss(&permuted, &enc).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    /// Central finite differences on the in-batch loss, perturbing one
    /// weight at a time. Independent of the analytic gradient path.
    fn fd_gradient(
        batch: &[(String, String)],
        enc: &BiEncoder<f64>,
        tower: usize,
        step: f64,
    ) -> Matrix<f64> {
        let (d, v) = (enc.spec.dim, enc.spec.feature_dim);
        let mut out = Matrix::<f64>::zeros(d, v);
        for r in 0..d {
            for c in 0..v {
                let perturb = |delta: f64| -> f64 {
                    let mut wq = enc.w_q.clone();
                    let mut wp = enc.w_p.clone();
                    let w = if tower == 0 { &mut wq } else { &mut wp };
                    w.set(r, c, w.get(r, c) + delta);
                    let e = BiEncoder::from_weights(enc.spec.clone(), wq, wp).unwrap();
                    in_batch_loss(batch, &e).unwrap()
                };
                let plus = perturb(step);
                let minus = perturb(-step);
                out.set(r, c, (plus - minus) / (2.0 * step));
            }
        }
        out
    }

    fn max_rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice().iter())
            .map(|(x, y)| {
                let scale = x.abs().max(y.abs());
                if scale < 1e-8 {
                    0.0
                } else {
                    (x - y).abs() / scale
                }
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences_on_symmetric_batch() {
        let s = spec(2, 8, 3);
        let enc = BiEncoder::<f64>::zeros(s).unwrap();
        let batch: Vec<(String, String)> = vec![
            ("same text".into(), "same text".into()),
            ("same text".into(), "same text".into()),
        ];
        let grads = in_batch_loss_gradient(&batch, &enc).unwrap();
        let fd_q = fd_gradient(&batch, &enc, 0, 1e-4);
        let fd_p = fd_gradient(&batch, &enc, 1, 1e-4);
        assert!(max_rel_err(&grads.wrt_w_q, &fd_q) <= 1e-4);
        assert!(max_rel_err(&grads.wrt_w_p, &fd_p) <= 1e-4);
    }

    #[test]
    fn gradient_matches_finite_differences_on_random_instances() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let words = ["collect", "share", "retain", "delete", "sell", "data", "ads"];
        for trial in 0..10 {
            let s = spec(2 + (trial % 3), 8 + (trial % 4) * 8, trial as u64);
            let enc = BiEncoder::<f64>::random_init(s.clone(), 1000 + trial as u64).unwrap();
            let b = 3;
            let batch: Vec<(String, String)> = (0..b)
                .map(|_| {
                    let pick = |rng: &mut ChaCha8Rng| {
                        let n = rng.gen_range(2..5);
                        (0..n)
                            .map(|_| words[rng.gen_range(0..words.len())])
                            .collect::<Vec<_>>()
                            .join(" ")
                    };
                    (pick(&mut rng), pick(&mut rng))
                })
                .collect();
            let grads = in_batch_loss_gradient(&batch, &enc).unwrap();
            let fd_q = fd_gradient(&batch, &enc, 0, 1e-4);
            let fd_p = fd_gradient(&batch, &enc, 1, 1e-4);
            assert!(max_rel_err(&grads.wrt_w_q, &fd_q) <= 1e-4, "trial {trial}");
            assert!(max_rel_err(&grads.wrt_w_p, &fd_p) <= 1e-4, "trial {trial}");
        }
    }

    #[test]
    fn duplicated_batch_keeps_gradient_finite_and_deterministic() {
        let s = spec(3, 32, 6);
        let enc = BiEncoder::<f64>::random_init(s, 7).unwrap();
        let batch: Vec<(String, String)> = vec![
            ("q one".into(), "p one".into()),
            ("q two".into(), "p two".into()),
        ];
        let doubled: Vec<(String, String)> =
            batch.iter().cloned().chain(batch.iter().cloned()).collect();
        let g1 = in_batch_loss_gradient(&doubled, &enc).unwrap();
        let g2 = in_batch_loss_gradient(&doubled, &enc).unwrap();
        assert!(g1.loss.is_finite());
        assert_eq!(g1.wrt_w_q.as_slice(), g2.wrt_w_q.as_slice());
        assert_eq!(g1.wrt_w_p.as_slice(), g2.wrt_w_p.as_slice());
    }

    fn training_dataset(n_queries: usize) -> QaDataset {
        // Queries and their positives share planted topic tokens.
        let dir = tempfile::tempdir().unwrap();
        let topics = ["alpha", "beta", "gamma", "delta"];
        let mut docs = Vec::new();
        let mut records = Vec::new();
        for i in 0..n_queries {
            let topic = topics[i % topics.len()];
            let text = format!("Sentence about {topic} topic number {i}.");
            docs.push(DocRecord {
                doc_id: format!("d{i}"),
                text: text.clone(),
            });
            records.push(QaRecord {
                query_id: format!("q{i}"),
                query_text: format!("tell me about {topic}"),
                sentence_id: None,
                sentence_text: Some(text),
                label: 1,
                category: None,
                provenance: None,
            });
        }
        let corpus = Corpus::from_documents(&docs, vec![]);
        let path = dir.path().join("qa.l");
        write_jsonl(&path, records.iter()).unwrap();
        QaDataset::load(&path, &corpus).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = training_dataset(8);
        let s = spec(4, 64, 1);
        let hyper = RetrieverHyper {
            epochs: 0,
            seed: 5,
            ..Default::default()
        };
        let trained = train_retriever::<f64>(&ds, &s, &hyper).unwrap();
        let init = BiEncoder::<f64>::random_init(s, 5).unwrap();
        assert_eq!(trained.w_q().as_slice(), init.w_q().as_slice());
        assert!(trained.train_log.is_empty());
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        let ds = training_dataset(16);
        for seed in 0..5u64 {
            let s = spec(8, 256, seed);
            let hyper = RetrieverHyper {
                batch_size: 4,
                learning_rate: 0.5,
                epochs: 10,
                seed,
            };
            let trained = train_retriever::<f64>(&ds, &s, &hyper).unwrap();
            let log = &trained.train_log;
            assert!(
                log.last().unwrap() < log.first().unwrap(),
                "seed {seed}: {log:?}"
            );
        }
    }

    #[test]
    fn training_is_deterministic_for_fixed_seed() {
        let ds = training_dataset(12);
        let s = spec(4, 64, 2);
        let hyper = RetrieverHyper {
            batch_size: 4,
            learning_rate: 0.3,
            epochs: 5,
            seed: 77,
        };
        let a = train_retriever::<f64>(&ds, &s, &hyper).unwrap();
        let b = train_retriever::<f64>(&ds, &s, &hyper).unwrap();
        assert_eq!(a.w_q().as_slice(), b.w_q().as_slice());
        assert_eq!(a.w_p().as_slice(), b.w_p().as_slice());
        assert_eq!(a.train_log, b.train_log);
    }

    #[test]
    fn too_few_positives_is_an_error_advising_smaller_batch() {
        let ds = training_dataset(4);
        let s = spec(4, 64, 1);
        let hyper = RetrieverHyper {
            batch_size: 8,
            ..Default::default()
        };
        let err = train_retriever::<f64>(&ds, &s, &hyper).unwrap_err();
        assert!(err.to_string().contains("smaller batch"), "{err}");
    }

    #[test]
    fn encoder_file_roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(3, 16, 4);
        let enc = BiEncoder::<f64>::random_init(s, 9).unwrap();
        let p1 = dir.path().join("enc1.bin");
        let p2 = dir.path().join("enc2.bin");
        enc.save(&p1).unwrap();
        let loaded = BiEncoder::<f64>::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.spec, enc.spec);
    }

    #[test]
    fn precomputed_encoder_looks_up_by_text_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.l");
        let text = "We collect data.";
        let id = text_id(&normalize_text(text));
        write_jsonl(
            &path,
            [EmbeddingRecord {
                id: id.0,
                vector: vec![1.0, 2.0],
            }]
            .iter(),
        )
        .unwrap();
        let s = EncoderSpec {
            spec_id: "pre".into(),
            dim: 2,
            feature_dim: 2,
            seed: 0,
            kind: EncoderKind::Precomputed,
        };
        let enc = PrecomputedEncoder::<f64>::load(&path, s).unwrap();
        assert_eq!(enc.encode_passage(text).unwrap(), vec![1.0, 2.0]);
        let err = enc.encode_query("missing text").unwrap_err();
        assert!(err.to_string().contains("embedding id"), "{err}");
    }

    proptest! {
        #[test]
        fn featurized_vectors_are_unit_or_empty(text in "[a-z ]{0,40}") {
            let s = spec(4, 64, 8);
            let v: FeatureVector<f64> = featurize(&text, &s);
            if v.is_empty() {
                prop_assert_eq!(v.l2_norm(), 0.0);
            } else {
                prop_assert!((v.l2_norm() - 1.0).abs() < 1e-9);
            }
            let mut prev: Option<u32> = None;
            for (idx, _) in v.iter() {
                if let Some(p) = prev {
                    prop_assert!(idx > p);
                }
                prop_assert!((idx as usize) < s.feature_dim);
                prev = Some(idx);
            }
        }

        #[test]
        fn loss_is_nonnegative(seed in 0u64..50) {
            let s = spec(3, 32, seed);
            let enc = BiEncoder::<f64>::random_init(s, seed).unwrap();
            let batch: Vec<(String, String)> = vec![
                ("one question".into(), "one answer".into()),
                ("two question".into(), "two answer".into()),
                ("three question".into(), "three answer".into()),
            ];
            let loss = in_batch_loss(&batch, &enc).unwrap();
            prop_assert!(loss >= 0.0);
        }
    }
}
