//! Pairwise (query, sentence) relevance classifier: regularized
//! logistic regression over interaction features of the two
//! embeddings. Serves both as the per-encoder filtering oracle and as
//! the final QA model.
//!
//! Unlike the factorized retriever score, the feature map sees the two
//! embeddings jointly (product, difference, mean and dot blocks), so
//! the oracle can reject pairs the retriever ranks highly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::QaDataset;
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::io;
use crate::real::{dot_f64, Real};

const CLS_MAGIC: &[u8; 8] = b"EAUGCLS1";

/// Interaction features of a (query, sentence) embedding pair:
/// elementwise product, elementwise absolute difference, elementwise
/// mean, then the dot-product similarity — `3d + 1` values.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatures<R> {
    values: Vec<R>,
}

impl<R: Real> PairFeatures<R> {
    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn dim_for(encoder_dim: usize) -> usize {
        3 * encoder_dim + 1
    }
}

pub fn pair_features<R: Real, E: TextEncoder<R>>(
    q_text: &str,
    p_text: &str,
    enc: &E,
) -> Result<PairFeatures<R>> {
    let q = enc.encode_query(q_text)?;
    let p = enc.encode_passage(p_text)?;
    Ok(pair_features_from_embeddings(&q, &p))
}

pub fn pair_features_from_embeddings<R: Real>(q: &[R], p: &[R]) -> PairFeatures<R> {
    debug_assert_eq!(q.len(), p.len());
    let d = q.len();
    let mut values = Vec::with_capacity(3 * d + 1);
    for i in 0..d {
        values.push(q[i] * p[i]);
    }
    for i in 0..d {
        values.push((q[i] - p[i]).abs());
    }
    let half = R::of(0.5);
    for i in 0..d {
        values.push((q[i] + p[i]) * half);
    }
    values.push(R::of(dot_f64(q, p)));
    PairFeatures { values }
}

/// Classifier training hyperparameters. `class_weight` multiplies the
/// positive-class loss; the pipeline defaults it to the negative to
/// positive count ratio of the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub class_weight: f64,
    pub seed: u64,
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        ClassifierHyper {
            learning_rate: 2.0,
            epochs: 200,
            l2: 1e-4,
            class_weight: 1.0,
            seed: 0,
        }
    }
}

/// Logistic scorer over pair features, bound to one encoder spec.
#[derive(Debug, Clone, PartialEq)]
pub struct PairClassifier<R> {
    pub spec_id: String,
    pub encoder_dim: usize,
    weights: Vec<R>,
    bias: R,
    pub threshold: f64,
    pub class_weight: f64,
    pub train_log: Vec<f64>,
}

impl<R: Real> PairClassifier<R> {
    pub fn new(
        spec_id: String,
        encoder_dim: usize,
        weights: Vec<R>,
        bias: R,
        threshold: f64,
        class_weight: f64,
    ) -> Result<Self> {
        if weights.len() != PairFeatures::<R>::dim_for(encoder_dim) {
            return Err(Error::DimensionMismatch {
                expected: PairFeatures::<R>::dim_for(encoder_dim),
                found: weights.len(),
            });
        }
        if !(0.0 < threshold && threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {threshold} outside (0, 1)"
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
            return Err(Error::Numerical("non-finite classifier parameters".into()));
        }
        Ok(PairClassifier {
            spec_id,
            encoder_dim,
            weights,
            bias,
            threshold,
            class_weight,
            train_log: Vec::new(),
        })
    }

    pub fn weights(&self) -> &[R] {
        &self.weights
    }

    pub fn bias(&self) -> R {
        self.bias
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CLS_MAGIC);
        io::put_str(&mut buf, &self.spec_id);
        io::put_u64(&mut buf, self.encoder_dim as u64);
        io::put_f64(&mut buf, self.threshold);
        io::put_f64(&mut buf, self.class_weight);
        for w in &self.weights {
            io::put_f32(&mut buf, w.as_f64() as f32);
        }
        io::put_f32(&mut buf, self.bias.as_f64() as f32);
        io::write_bytes(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = io::BinReader::open(path)?;
        r.magic(CLS_MAGIC)?;
        let spec_id = r.str("spec_id")?;
        let encoder_dim = r.u64("encoder_dim")? as usize;
        let threshold = r.f64("threshold")?;
        let class_weight = r.f64("class_weight")?;
        let n = PairFeatures::<R>::dim_for(encoder_dim);
        let weights: Vec<R> = r
            .f32_vec(n, "weights")?
            .into_iter()
            .map(|w| R::of(w as f64))
            .collect();
        let bias = R::of(r.f32("bias")? as f64);
        r.expect_eof()?;
        PairClassifier::new(spec_id, encoder_dim, weights, bias, threshold, class_weight)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Class-weighted, L2-regularized logistic objective on a fixed
/// feature matrix. Kept as a standalone value so the gradient can be
/// checked against finite differences of `loss`.
pub struct LogisticProblem {
    /// Row-major N x F feature matrix.
    pub features: Vec<f64>,
    pub n: usize,
    pub f: usize,
    pub labels: Vec<u8>,
    pub sample_weights: Vec<f64>,
    pub l2: f64,
}

impl LogisticProblem {
    fn margins(&self, w: &[f64], b: f64) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let row = &self.features[i * self.f..(i + 1) * self.f];
                row.iter().zip(w.iter()).map(|(x, wj)| x * wj).sum::<f64>() + b
            })
            .collect()
    }

    /// Mean weighted logistic loss plus (l2/2)*||w||^2. The bias is
    /// not regularized.
    pub fn loss(&self, w: &[f64], b: f64) -> f64 {
        let margins = self.margins(w, b);
        let mut total = 0.0;
        for i in 0..self.n {
            let m = margins[i];
            let z = f64::from(self.labels[i]);
            // log(1 + exp(-m))*z + log(1 + exp(m))*(1-z), stabilized.
            let nll = m.max(0.0) - m * z + (-m.abs()).exp().ln_1p();
            total += self.sample_weights[i] * nll;
        }
        total / self.n as f64 + 0.5 * self.l2 * w.iter().map(|x| x * x).sum::<f64>()
    }

    pub fn gradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let margins = self.margins(w, b);
        let mut g_w = vec![0.0; self.f];
        let mut g_b = 0.0;
        for i in 0..self.n {
            let err = self.sample_weights[i] * (sigmoid(margins[i]) - f64::from(self.labels[i]));
            let row = &self.features[i * self.f..(i + 1) * self.f];
            for (g, x) in g_w.iter_mut().zip(row.iter()) {
                *g += err * x;
            }
            g_b += err;
        }
        let inv_n = 1.0 / self.n as f64;
        for (g, wj) in g_w.iter_mut().zip(w.iter()) {
            *g = *g * inv_n + self.l2 * wj;
        }
        (g_w, g_b * inv_n)
    }
}

fn build_problem<R: Real, E: TextEncoder<R>>(
    dataset: &QaDataset,
    enc: &E,
    class_weight: f64,
    l2: f64,
) -> Result<LogisticProblem> {
    use std::collections::BTreeMap;
    let d = enc.spec().dim;
    let f = PairFeatures::<R>::dim_for(d);

    // Embed each unique query and sentence once.
    let mut q_embs: BTreeMap<&str, Vec<R>> = BTreeMap::new();
    for (qid, info) in dataset.queries() {
        q_embs.insert(qid.as_str(), enc.encode_query(&info.text)?);
    }
    let mut p_embs: BTreeMap<u64, Vec<R>> = BTreeMap::new();
    for (sid, text) in dataset.sentence_texts() {
        p_embs.insert(sid.0, enc.encode_passage(text)?);
    }

    let n = dataset.len();
    let mut features = Vec::with_capacity(n * f);
    let mut labels = Vec::with_capacity(n);
    let mut sample_weights = Vec::with_capacity(n);
    for pair in dataset.pairs() {
        let q = &q_embs[pair.query_id.as_str()];
        let p = &p_embs[&pair.sentence_id.0];
        let feats = pair_features_from_embeddings(q, p);
        features.extend(feats.values().iter().map(|v| v.as_f64()));
        labels.push(pair.label);
        sample_weights.push(if pair.label == 1 { class_weight } else { 1.0 });
    }
    Ok(LogisticProblem {
        features,
        n,
        f,
        labels,
        sample_weights,
        l2,
    })
}

/// Train the pair classifier with full-batch gradient descent from
/// zero initialization, which is deterministic by construction.
pub fn train_pair_classifier<R: Real, E: TextEncoder<R>>(
    dataset: &QaDataset,
    enc: &E,
    hyper: &ClassifierHyper,
    threshold: f64,
) -> Result<PairClassifier<R>> {
    let positives = dataset.pairs().iter().filter(|p| p.label == 1).count();
    if positives == 0 || positives == dataset.len() {
        return Err(Error::InvalidArg(
            "classifier training needs both classes in the dataset".into(),
        ));
    }
    let problem = build_problem(dataset, enc, hyper.class_weight, hyper.l2)?;

    let mut w = vec![0.0f64; problem.f];
    let mut b = 0.0f64;
    let mut train_log = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        let (g_w, g_b) = problem.gradient(&w, b);
        for (wj, gj) in w.iter_mut().zip(g_w.iter()) {
            *wj -= hyper.learning_rate * gj;
        }
        b -= hyper.learning_rate * g_b;
        let loss = problem.loss(&w, b);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite classifier loss for {}",
                enc.spec().spec_id
            )));
        }
        train_log.push(loss);
    }

    let mut clf = PairClassifier::new(
        enc.spec().spec_id.clone(),
        enc.spec().dim,
        w.into_iter().map(R::of).collect(),
        R::of(b),
        threshold,
        hyper.class_weight,
    )?;
    clf.train_log = train_log;
    Ok(clf)
}

fn check_spec<R: Real, E: TextEncoder<R>>(clf: &PairClassifier<R>, enc: &E, context: &str) -> Result<()> {
    if clf.spec_id != enc.spec().spec_id || clf.encoder_dim != enc.spec().dim {
        return Err(Error::SpecMismatch {
            expected: clf.spec_id.clone(),
            found: enc.spec().spec_id.clone(),
            context: context.into(),
        });
    }
    Ok(())
}

/// Relevance probability in (0, 1).
pub fn score<R: Real, E: TextEncoder<R>>(
    clf: &PairClassifier<R>,
    q_text: &str,
    p_text: &str,
    enc: &E,
) -> Result<f64> {
    check_spec(clf, enc, "score")?;
    let feats = pair_features(q_text, p_text, enc)?;
    Ok(score_features(clf, &feats))
}

pub fn score_features<R: Real>(clf: &PairClassifier<R>, feats: &PairFeatures<R>) -> f64 {
    sigmoid(dot_f64(&clf.weights, feats.values()) + clf.bias.as_f64())
}

/// Binary relevance decision: 1 iff score >= threshold (the boundary
/// is inclusive).
pub fn classify<R: Real, E: TextEncoder<R>>(
    clf: &PairClassifier<R>,
    q_text: &str,
    p_text: &str,
    enc: &E,
) -> Result<bool> {
    Ok(score(clf, q_text, p_text, enc)? >= clf.threshold)
}
