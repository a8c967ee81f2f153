//! Augmentation pipeline: filter each encoder's retrievals through its
//! oracle, union the filtered sets across encoders, merge with the
//! gold data into the final training corpus, and compute the
//! cross-retriever diversity analytics (Venn overlap, BLEU).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::classifier::{classify, train_pair_classifier, PairClassifier};
use crate::config::PipelineConfig;
use crate::corpus::{Corpus, Provenance, QaDataset, QaPair, SentenceId};
use crate::encoder::{train_retriever, AnyEncoder, EncoderKind, PrecomputedEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::hash::{derive_seed, file_digest, sha256_hex};
use crate::index::{build_index, retrieve_all, RetrievalSet, VectorIndex};
use crate::real::Real;

/// Configuration stamp for the BLEU variant computed by this module.
pub const BLEU_CONFIG: &str = "4gram-uniform-unsmoothed-pooled";
/// Configuration stamp for the sentence segmenter.
pub const SEGMENTER: &str = "rule-based-v1";

/// Keep only the retrievals the oracle accepts. Ranks are preserved
/// from the input, so surviving entries keep their original positions.
pub fn filter_retrievals<R: Real, E: TextEncoder<R>>(
    rl: &RetrievalSet,
    oracle: &PairClassifier<R>,
    enc: &E,
    dataset: &QaDataset,
    corpus: &Corpus,
) -> Result<RetrievalSet> {
    let spec_id = &enc.spec().spec_id;
    if rl.spec_id != *spec_id || oracle.spec_id != *spec_id {
        return Err(Error::SpecMismatch {
            expected: rl.spec_id.clone(),
            found: format!("oracle={}, encoder={}", oracle.spec_id, spec_id),
            context: "filter_retrievals".into(),
        });
    }
    filter_with(rl, oracle, enc, dataset, corpus)
}

fn filter_with<R: Real, E: TextEncoder<R>>(
    rl: &RetrievalSet,
    oracle: &PairClassifier<R>,
    enc: &E,
    dataset: &QaDataset,
    corpus: &Corpus,
) -> Result<RetrievalSet> {
    let mut entries = Vec::with_capacity(rl.entries.len());
    for entry in &rl.entries {
        let q_text = dataset.query_text(&entry.query_id)?;
        let p_text = corpus
            .get(entry.sentence_id)
            .map(|s| s.text.as_str())
            .ok_or_else(|| Error::Lookup(format!("sentence {}", entry.sentence_id)))?;
        if classify(oracle, q_text, p_text, enc)? {
            entries.push(entry.clone());
        }
    }
    Ok(RetrievalSet {
        spec_id: rl.spec_id.clone(),
        k: rl.k,
        filtered: true,
        entries,
    })
}

/// Union retrieval sets from distinct encoders into deduplicated
/// augmentation pairs. Provenance records every contributing spec.
pub fn aggregate(sets: &[&RetrievalSet]) -> Result<Vec<QaPair>> {
    let mut seen_specs = BTreeSet::new();
    for set in sets {
        if !seen_specs.insert(set.spec_id.clone()) {
            return Err(Error::InvalidArg(format!(
                "aggregate received two sets from spec {}",
                set.spec_id
            )));
        }
    }
    let mut contributors: BTreeMap<(String, SentenceId), BTreeSet<String>> = BTreeMap::new();
    for set in sets {
        for entry in &set.entries {
            contributors
                .entry((entry.query_id.clone(), entry.sentence_id))
                .or_default()
                .insert(set.spec_id.clone());
        }
    }
    Ok(contributors
        .into_iter()
        .map(|((query_id, sentence_id), specs)| QaPair {
            query_id,
            sentence_id,
            label: 1,
            provenance: Provenance::Augmented(specs.into_iter().collect()),
        })
        .collect())
}

/// Counters reported when the augmented pairs merge into the gold set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergeStats {
    pub gold_pairs: usize,
    pub augmented_in: usize,
    pub augmented_added: usize,
    /// Augmented pairs dropped because gold already labels the same
    /// (query, sentence) — gold wins regardless of its label.
    pub conflict_dropped: usize,
    pub positive_rate_before: f64,
    pub positive_rate_after: f64,
}

/// Final training corpus: gold plus augmented positives. Queries are
/// never added or modified; an augmented pair whose query is unknown
/// to the gold set is an error.
pub fn build_training_set(
    gold: &QaDataset,
    d_aug: &[QaPair],
    corpus: &Corpus,
) -> Result<(QaDataset, MergeStats)> {
    let gold_keys = gold.pair_labels();
    let mut pairs = gold.pairs().to_vec();
    let mut sentence_texts = gold.sentence_texts().clone();
    let mut stats = MergeStats {
        gold_pairs: gold.len(),
        augmented_in: d_aug.len(),
        positive_rate_before: gold.stats().positive_rate,
        ..Default::default()
    };
    for pair in d_aug {
        if !gold.queries().contains_key(&pair.query_id) {
            return Err(Error::Schema(format!(
                "augmented pair references query {:?} outside the gold query set",
                pair.query_id
            )));
        }
        if gold_keys.contains_key(&(pair.query_id.clone(), pair.sentence_id)) {
            stats.conflict_dropped += 1;
            continue;
        }
        if !sentence_texts.contains_key(&pair.sentence_id) {
            let sentence = corpus
                .get(pair.sentence_id)
                .ok_or_else(|| Error::Lookup(format!("sentence {}", pair.sentence_id)))?;
            sentence_texts.insert(pair.sentence_id, sentence.text.clone());
        }
        pairs.push(pair.clone());
        stats.augmented_added += 1;
    }
    let t = QaDataset::new(pairs, gold.queries().clone(), sentence_texts)?;
    stats.positive_rate_after = t.stats().positive_rate;
    Ok((t, stats))
}

/// One Venn region: the keys contained in exactly this set combination.
#[derive(Debug, Clone, PartialEq)]
pub struct VennRegion {
    /// Bitmask over set positions; bit i set means "in sets[i]".
    pub mask: u32,
    pub labels: Vec<String>,
    pub count: usize,
    pub pct_of_union: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VennReport {
    pub labels: Vec<String>,
    pub regions: Vec<VennRegion>,
    pub union: usize,
}

impl VennReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "sets: {}  union: {}\n",
            self.labels.join(", "),
            self.union
        ));
        for region in &self.regions {
            out.push_str(&format!(
                "  exactly {{{}}}: {} ({:.2}%)\n",
                region.labels.join(" & "),
                region.count,
                region.pct_of_union
            ));
        }
        out
    }
}

/// Exact-match Venn region counts over (query_id, sentence_id) keys.
pub fn overlap_stats(sets: &[&RetrievalSet]) -> Result<VennReport> {
    if sets.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "overlap needs at least 2 sets, got {}",
            sets.len()
        )));
    }
    if sets.len() > 16 {
        return Err(Error::InvalidArg("overlap supports at most 16 sets".into()));
    }
    let labels: Vec<String> = sets.iter().map(|s| s.spec_id.clone()).collect();
    let keysets: Vec<BTreeSet<(String, SentenceId)>> = sets.iter().map(|s| s.keys()).collect();
    let mut union: BTreeSet<&(String, SentenceId)> = BTreeSet::new();
    for ks in &keysets {
        union.extend(ks.iter());
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for key in &union {
        let mut mask = 0u32;
        for (i, ks) in keysets.iter().enumerate() {
            if ks.contains(*key) {
                mask |= 1 << i;
            }
        }
        *counts.entry(mask).or_default() += 1;
    }
    let union_size = union.len();
    let mut regions = Vec::new();
    for mask in 1..(1u32 << sets.len()) {
        let count = counts.get(&mask).copied().unwrap_or(0);
        let members: Vec<String> = labels
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, l)| l.clone())
            .collect();
        regions.push(VennRegion {
            mask,
            labels: members,
            count,
            pct_of_union: if union_size == 0 {
                0.0
            } else {
                100.0 * count as f64 / union_size as f64
            },
        });
    }
    Ok(VennReport {
        labels,
        regions,
        union: union_size,
    })
}

fn ngram_counts(tokens: &[&str], n: usize) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.join("\u{1f}")).or_default() += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with 4-gram modified precision, uniform weights
/// and brevity penalty; no smoothing. Every candidate is scored
/// against the full reference list (set-to-set comparison of two
/// retrieved corpora), with clipping at the per-reference maximum.
pub fn corpus_bleu<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::InvalidArg("BLEU needs at least one candidate".into()));
    }
    if references.is_empty() {
        return Err(Error::InvalidArg("BLEU needs at least one reference".into()));
    }
    let cand_tokens: Vec<Vec<&str>> = candidates
        .iter()
        .map(|s| s.as_ref().split_whitespace().collect())
        .collect();
    let ref_tokens: Vec<Vec<&str>> = references
        .iter()
        .map(|s| s.as_ref().split_whitespace().collect())
        .collect();

    // clip[n][gram] = max occurrence count within any single reference.
    let mut clip: Vec<BTreeMap<String, u64>> = vec![BTreeMap::new(); 4];
    for r in &ref_tokens {
        for n in 1..=4 {
            for (gram, count) in ngram_counts(r, n) {
                let slot = clip[n - 1].entry(gram).or_default();
                *slot = (*slot).max(count);
            }
        }
    }

    let mut matched = [0u64; 4];
    let mut total = [0u64; 4];
    for c in &cand_tokens {
        for n in 1..=4 {
            for (gram, count) in ngram_counts(c, n) {
                total[n - 1] += count;
                let allowed = clip[n - 1].get(&gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(allowed);
            }
        }
    }

    let mut log_sum = 0.0f64;
    for n in 0..4 {
        if total[n] == 0 || matched[n] == 0 {
            return Ok(0.0); // unsmoothed: any zero precision zeroes BLEU
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }

    let c_len: usize = cand_tokens.iter().map(Vec::len).sum();
    let r_len: usize = cand_tokens
        .iter()
        .map(|c| {
            // Closest reference length; ties resolve to the shorter.
            ref_tokens
                .iter()
                .map(Vec::len)
                .min_by_key(|&rl| (rl.abs_diff(c.len()), rl))
                .unwrap()
        })
        .sum();
    let bp = if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * (log_sum / 4.0).exp())
}

/// Sorted key=value manifest describing one pipeline run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    entries: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_text(path, &self.to_text())
    }
}

/// How a preset filters each retriever's candidates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterMode {
    /// Each retriever filtered by the oracle built on its own spec.
    PerSpec,
    /// No filtering (crude addition of all retrievals).
    NoFilter,
    /// All retrievers filtered by one shared oracle.
    Common(String),
}

/// Named experiment preset covering the augmentation configurations.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Preset {
    /// Gold data only, no augmentation.
    None,
    /// One retriever, own oracle.
    Single(String),
    /// One retriever, unfiltered.
    SingleNoFilter(String),
    /// All configured specs, per-spec oracles.
    Era,
    /// The declared domain subset, per-spec oracles.
    EraD,
    /// All configured specs, no oracles.
    BaselineE,
    /// All configured specs, one shared oracle.
    CommonOracle(String),
}

impl Preset {
    pub fn parse(name: &str) -> Result<Preset> {
        if let Some(spec) = name.strip_prefix("single-nofilter:") {
            return Ok(Preset::SingleNoFilter(spec.to_string()));
        }
        if let Some(spec) = name.strip_prefix("single:") {
            return Ok(Preset::Single(spec.to_string()));
        }
        if let Some(spec) = name.strip_prefix("common-oracle:") {
            return Ok(Preset::CommonOracle(spec.to_string()));
        }
        match name {
            "none" => Ok(Preset::None),
            "era" => Ok(Preset::Era),
            "era-d" => Ok(Preset::EraD),
            "baseline-e" => Ok(Preset::BaselineE),
            other => Err(Error::InvalidArg(format!("unknown preset {other:?}"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Preset::None => "none".into(),
            Preset::Single(s) => format!("single:{s}"),
            Preset::SingleNoFilter(s) => format!("single-nofilter:{s}"),
            Preset::Era => "era".into(),
            Preset::EraD => "era-d".into(),
            Preset::BaselineE => "baseline-e".into(),
            Preset::CommonOracle(s) => format!("common-oracle:{s}"),
        }
    }

    /// Does this preset pass candidates through an oracle?
    pub fn is_filtered(&self) -> bool {
        !matches!(self, Preset::None | Preset::SingleNoFilter(_) | Preset::BaselineE)
    }

    /// Resolve to the retriever list and filter mode under a config.
    pub fn plan(&self, config: &PipelineConfig) -> Result<(Vec<String>, FilterMode)> {
        let all = config.spec_ids();
        let check = |spec: &String| -> Result<()> {
            if all.contains(spec) {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "preset references undeclared spec {spec:?}"
                )))
            }
        };
        match self {
            Preset::None => Ok((Vec::new(), FilterMode::NoFilter)),
            Preset::Single(spec) => {
                check(spec)?;
                Ok((vec![spec.clone()], FilterMode::PerSpec))
            }
            Preset::SingleNoFilter(spec) => {
                check(spec)?;
                Ok((vec![spec.clone()], FilterMode::NoFilter))
            }
            Preset::Era => Ok((all, FilterMode::PerSpec)),
            Preset::EraD => {
                if config.domain_specs.is_empty() {
                    return Err(Error::Config(
                        "preset era-d needs a non-empty domain_specs list".into(),
                    ));
                }
                Ok((config.domain_specs.clone(), FilterMode::PerSpec))
            }
            Preset::BaselineE => Ok((all, FilterMode::NoFilter)),
            Preset::CommonOracle(spec) => {
                check(spec)?;
                Ok((all, FilterMode::Common(spec.clone())))
            }
        }
    }
}

/// Corpus and gold data loaded once, with input digests for manifests.
pub struct PipelineData {
    pub corpus: Corpus,
    pub gold: QaDataset,
    pub corpus_digest: String,
    pub qa_train_digest: String,
}

impl PipelineData {
    pub fn load(config: &PipelineConfig) -> Result<PipelineData> {
        let corpus = Corpus::load(&config.corpus)?;
        let gold = QaDataset::load(&config.qa_train, &corpus)?;
        Ok(PipelineData {
            corpus_digest: file_digest(&config.corpus)?,
            qa_train_digest: file_digest(&config.qa_train)?,
            corpus,
            gold,
        })
    }
}

/// Per-spec trained artifacts: the trained retriever encoder, the
/// fixed lexical encoder the oracle classifies with, the oracle, and
/// the corpus index built from the retriever encoder.
pub struct TrainedSpec<R> {
    pub encoder: AnyEncoder<R>,
    pub oracle_encoder: AnyEncoder<R>,
    pub oracle: PairClassifier<R>,
    pub index: VectorIndex,
}

/// Auto class weight: the negative/positive count ratio.
pub fn auto_class_weight(dataset: &QaDataset) -> f64 {
    let stats = dataset.stats();
    if stats.positives == 0 {
        1.0
    } else {
        stats.negatives as f64 / stats.positives as f64
    }
}

/// Train (or load) the encoder, train the oracle and build the index
/// for one spec under one global seed.
pub fn train_spec_artifacts<R: Real>(
    config: &PipelineConfig,
    data: &PipelineData,
    spec_id: &str,
    global_seed: u64,
) -> Result<TrainedSpec<R>> {
    let sc = config.spec(spec_id)?;
    let encoder = match sc.spec.kind {
        EncoderKind::ReferenceTrainable => {
            let hyper = config.retriever_hyper(spec_id, global_seed)?;
            AnyEncoder::Trainable(train_retriever(&data.gold, &sc.spec, &hyper)?)
        }
        EncoderKind::Precomputed => {
            let path = sc.embeddings.as_ref().ok_or_else(|| {
                Error::Config(format!("precomputed spec {spec_id} lacks embeddings path"))
            })?;
            AnyEncoder::Precomputed(PrecomputedEncoder::load(path, sc.spec.clone())?)
        }
    };
    // The oracle classifies over the spec's fixed lexical projection,
    // not over the retriever's contrastively trained weights; for
    // precomputed specs the embeddings themselves are that fixed
    // representation.
    let oracle_encoder = match sc.spec.kind {
        EncoderKind::ReferenceTrainable => {
            AnyEncoder::Trainable(crate::encoder::BiEncoder::lexical_init(sc.spec.clone())?)
        }
        EncoderKind::Precomputed => encoder.clone(),
    };
    let class_weight = config
        .oracle
        .class_weight
        .unwrap_or_else(|| auto_class_weight(&data.gold));
    let oracle_hyper = config
        .oracle
        .hyper(class_weight, derive_seed(global_seed, "train-oracle", spec_id));
    let oracle = train_pair_classifier(
        &data.gold,
        &oracle_encoder,
        &oracle_hyper,
        config.oracle.threshold,
    )?;
    let index = build_index(&data.corpus, &encoder)?;
    Ok(TrainedSpec {
        encoder,
        oracle_encoder,
        oracle,
        index,
    })
}

/// Raw and (optionally) filtered retrievals of one spec.
pub struct SpecRetrievals {
    pub raw: RetrievalSet,
    pub filtered: Option<RetrievalSet>,
}

/// A complete augmentation run for one preset at one retrieval depth.
pub struct AugmentationRun {
    pub preset: String,
    pub specs: Vec<String>,
    pub k: usize,
    pub per_spec: BTreeMap<String, SpecRetrievals>,
    pub d_aug: Vec<QaPair>,
    pub t: QaDataset,
    pub merge: MergeStats,
    pub manifest: RunManifest,
}

/// Execute one preset: retrieve per spec, filter per the preset's
/// mode, aggregate, and merge with gold into the final corpus T.
pub fn run_augmentation<R: Real>(
    config: &PipelineConfig,
    data: &PipelineData,
    artifacts: &BTreeMap<String, TrainedSpec<R>>,
    preset: &Preset,
    k: usize,
    global_seed: u64,
) -> Result<AugmentationRun> {
    let (spec_ids, filter_mode) = preset.plan(config)?;
    let mut per_spec = BTreeMap::new();
    for spec_id in &spec_ids {
        let trained = artifacts
            .get(spec_id)
            .ok_or_else(|| Error::Config(format!("no trained artifacts for spec {spec_id:?}")))?;
        let raw = retrieve_all(&trained.index, &data.gold, &trained.encoder, k)?;
        let filtered = match &filter_mode {
            FilterMode::NoFilter => None,
            FilterMode::PerSpec => Some(filter_retrievals(
                &raw,
                &trained.oracle,
                &trained.oracle_encoder,
                &data.gold,
                &data.corpus,
            )?),
            FilterMode::Common(oracle_spec) => {
                let shared = artifacts.get(oracle_spec).ok_or_else(|| {
                    Error::Config(format!(
                        "no trained artifacts for oracle spec {oracle_spec:?}"
                    ))
                })?;
                // The shared oracle classifies with its own encoder;
                // candidates come from this spec's retriever.
                Some(filter_with(
                    &raw,
                    &shared.oracle,
                    &shared.oracle_encoder,
                    &data.gold,
                    &data.corpus,
                )?)
            }
        };
        per_spec.insert(spec_id.clone(), SpecRetrievals { raw, filtered });
    }

    let contributing: Vec<&RetrievalSet> = spec_ids
        .iter()
        .map(|id| {
            let sets = &per_spec[id];
            sets.filtered.as_ref().unwrap_or(&sets.raw)
        })
        .collect();
    let d_aug = if contributing.is_empty() {
        Vec::new()
    } else {
        aggregate(&contributing)?
    };
    let (t, merge) = build_training_set(&data.gold, &d_aug, &data.corpus)?;

    let mut manifest = RunManifest::default();
    manifest.set("preset", preset.name());
    manifest.set("k", k);
    manifest.set("seed", global_seed);
    manifest.set("config_digest", config.config_digest());
    manifest.set("corpus_digest", &data.corpus_digest);
    manifest.set("qa_train_digest", &data.qa_train_digest);
    manifest.set("segmenter", SEGMENTER);
    manifest.set("bleu", BLEU_CONFIG);
    manifest.set("specs", spec_ids.join("+"));
    manifest.set(
        "filter",
        match &filter_mode {
            FilterMode::PerSpec => "per-spec".to_string(),
            FilterMode::NoFilter => "none".to_string(),
            FilterMode::Common(s) => format!("common:{s}"),
        },
    );
    for (spec_id, sets) in &per_spec {
        manifest.set(&format!("retrieved.{spec_id}"), sets.raw.entries.len());
        if let Some(f) = &sets.filtered {
            manifest.set(
                &format!("filtered_out.{spec_id}"),
                sets.raw.entries.len() - f.entries.len(),
            );
        }
    }
    let total_contributed: usize = contributing.iter().map(|s| s.entries.len()).sum();
    manifest.set("aggregated_in", total_contributed);
    manifest.set("dedup_removed", total_contributed - d_aug.len());
    manifest.set("d_aug", d_aug.len());
    manifest.set("gold_pairs", merge.gold_pairs);
    manifest.set("conflict_dropped", merge.conflict_dropped);
    manifest.set("t_pairs", t.len());
    manifest.set(
        "positive_rate_before",
        format!("{:.6}", merge.positive_rate_before),
    );
    manifest.set(
        "positive_rate_after",
        format!("{:.6}", merge.positive_rate_after),
    );

    Ok(AugmentationRun {
        preset: preset.name(),
        specs: spec_ids,
        k,
        per_spec,
        d_aug,
        t,
        merge,
        manifest,
    })
}

/// Unique sentence texts retrieved by a set, for BLEU comparisons of
/// retrieved corpora.
pub fn retrieved_texts(set: &RetrievalSet, corpus: &Corpus) -> Result<Vec<String>> {
    let ids: BTreeSet<SentenceId> = set.entries.iter().map(|e| e.sentence_id).collect();
    ids.into_iter()
        .map(|id| {
            corpus
                .get(id)
                .map(|s| s.text.clone())
                .ok_or_else(|| Error::Lookup(format!("sentence {id}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DocRecord, QaRecord};
    use crate::encoder::{EmbeddingRecord, EncoderSpec};
    use crate::index::RetrievalEntry;
    use crate::io::write_jsonl;

    fn planted_world() -> (Corpus, QaDataset, PrecomputedEncoder<f64>) {
        // Three sentences with planted embeddings; the "bad" one is
        // anti-aligned with the query.
        let texts = [
            "good sentence one.",
            "good sentence two.",
            "bad sentence here.",
        ];
        let docs = vec![DocRecord {
            doc_id: "d".into(),
            text: texts.join("\n"),
        }];
        let corpus = Corpus::from_documents(&docs, vec![]);
        let dir = tempfile::tempdir().unwrap();
        let qa = dir.path().join("qa.l");
        write_jsonl(
            &qa,
            [
                QaRecord {
                    query_id: "q0".into(),
                    query_text: "the planted query".into(),
                    sentence_id: None,
                    sentence_text: Some(texts[0].into()),
                    label: 1,
                    category: None,
                    provenance: None,
                },
                QaRecord {
                    query_id: "q0".into(),
                    query_text: "the planted query".into(),
                    sentence_id: None,
                    sentence_text: Some(texts[2].into()),
                    label: 0,
                    category: None,
                    provenance: None,
                },
            ]
            .iter(),
        )
        .unwrap();
        let dataset = QaDataset::load(&qa, &corpus).unwrap();

        let emb = dir.path().join("emb.l");
        let mut records: Vec<EmbeddingRecord> = corpus
            .iter()
            .map(|s| EmbeddingRecord {
                id: s.sentence_id.0,
                vector: if s.text.starts_with("bad") {
                    vec![-1.0, 0.0]
                } else {
                    vec![1.0, 0.0]
                },
            })
            .collect();
        records.push(EmbeddingRecord {
            id: crate::corpus::text_id("the planted query").0,
            vector: vec![1.0, 0.0],
        });
        write_jsonl(&emb, records.iter()).unwrap();
        let spec = EncoderSpec {
            spec_id: "planted".into(),
            dim: 2,
            feature_dim: 2,
            seed: 0,
            kind: EncoderKind::Precomputed,
        };
        let enc = PrecomputedEncoder::load(&emb, spec).unwrap();
        (corpus, dataset, enc)
    }

    fn sim_keyed_oracle(weight: f64, threshold: f64) -> PairClassifier<f64> {
        let d = 2;
        let mut weights = vec![0.0; 3 * d + 1];
        weights[3 * d] = weight;
        PairClassifier::new("planted".into(), d, weights, 0.0, threshold, 1.0).unwrap()
    }

    fn planted_retrievals(corpus: &Corpus) -> RetrievalSet {
        let entries: Vec<RetrievalEntry> = corpus
            .iter()
            .enumerate()
            .map(|(i, s)| RetrievalEntry {
                query_id: "q0".into(),
                sentence_id: s.sentence_id,
                score: 1.0 - i as f64 * 0.1,
                rank: i as u32 + 1,
            })
            .collect();
        RetrievalSet {
            spec_id: "planted".into(),
            k: entries.len(),
            filtered: false,
            entries,
        }
    }

    #[test]
    fn accept_all_oracle_filters_nothing() {
        let (corpus, dataset, enc) = planted_world();
        let rl = planted_retrievals(&corpus);
        // sigma(10 * sim) is ~1 or ~0; a near-zero threshold accepts all.
        let oracle = sim_keyed_oracle(10.0, 1e-9);
        let out = filter_retrievals(&rl, &oracle, &enc, &dataset, &corpus).unwrap();
        assert_eq!(out.entries, rl.entries);
        assert!(out.filtered);
    }

    #[test]
    fn reject_all_oracle_empties_the_set() {
        let (corpus, dataset, enc) = planted_world();
        let rl = planted_retrievals(&corpus);
        let oracle = sim_keyed_oracle(10.0, 1.0 - 1e-12);
        let out = filter_retrievals(&rl, &oracle, &enc, &dataset, &corpus).unwrap();
        assert!(out.entries.is_empty());
    }

    #[test]
    fn planted_oracle_removes_exactly_the_violations() {
        let (corpus, dataset, enc) = planted_world();
        let rl = planted_retrievals(&corpus);
        let oracle = sim_keyed_oracle(10.0, 0.5);
        let out = filter_retrievals(&rl, &oracle, &enc, &dataset, &corpus).unwrap();
        // Exactly the anti-aligned "bad" sentence goes; ranks of the
        // survivors are preserved from the raw set.
        assert_eq!(out.entries.len(), 2);
        for e in &out.entries {
            let text = &corpus.get(e.sentence_id).unwrap().text;
            assert!(text.starts_with("good"), "{text}");
        }
        let raw_ranks: BTreeMap<SentenceId, u32> =
            rl.entries.iter().map(|e| (e.sentence_id, e.rank)).collect();
        for e in &out.entries {
            assert_eq!(e.rank, raw_ranks[&e.sentence_id]);
        }
    }

    #[test]
    fn filter_rejects_spec_mismatch() {
        let (corpus, dataset, enc) = planted_world();
        let mut rl = planted_retrievals(&corpus);
        rl.spec_id = "other".into();
        let oracle = sim_keyed_oracle(10.0, 0.5);
        let err = filter_retrievals(&rl, &oracle, &enc, &dataset, &corpus).unwrap_err();
        assert!(matches!(err, Error::SpecMismatch { .. }));
    }

    fn set_of(spec_id: &str, keys: &[(&str, u64)]) -> RetrievalSet {
        RetrievalSet {
            spec_id: spec_id.into(),
            k: keys.len(),
            filtered: true,
            entries: keys
                .iter()
                .enumerate()
                .map(|(i, (q, s))| RetrievalEntry {
                    query_id: (*q).into(),
                    sentence_id: SentenceId(*s),
                    score: 1.0 - i as f64 * 0.01,
                    rank: i as u32 + 1,
                })
                .collect(),
        }
    }

    #[test]
    fn aggregate_is_idempotent_on_identical_sets() {
        let a = set_of("a", &[("q0", 1), ("q0", 2), ("q1", 3)]);
        let b = set_of("b", &[("q0", 1), ("q0", 2), ("q1", 3)]);
        let d_aug = aggregate(&[&a, &b]).unwrap();
        assert_eq!(d_aug.len(), 3);
        for pair in &d_aug {
            assert_eq!(pair.label, 1);
            assert_eq!(
                pair.provenance,
                Provenance::Augmented(vec!["a".into(), "b".into()])
            );
        }
    }

    #[test]
    fn aggregate_sums_disjoint_sets() {
        let a = set_of("a", &[("q0", 1), ("q0", 2)]);
        let b = set_of("b", &[("q1", 3), ("q1", 4), ("q1", 5)]);
        assert_eq!(aggregate(&[&a, &b]).unwrap().len(), 5);
    }

    #[test]
    fn aggregate_matches_inclusion_exclusion_on_planted_intersections() {
        // |A|=|B|=|C|=4; pairwise intersections {1,2}, {1}, {1};
        // triple {1}. Union = 12 - 2 - 1 - 1 + 1 = 9.
        let a = set_of("a", &[("q", 1), ("q", 2), ("q", 3), ("q", 4)]);
        let b = set_of("b", &[("q", 1), ("q", 2), ("q", 5), ("q", 6)]);
        let c = set_of("c", &[("q", 1), ("q", 7), ("q", 8), ("q", 9)]);
        let d_aug = aggregate(&[&a, &b, &c]).unwrap();
        assert_eq!(d_aug.len(), 9);
        let triple: Vec<_> = d_aug
            .iter()
            .filter(|p| {
                p.provenance
                    == Provenance::Augmented(vec!["a".into(), "b".into(), "c".into()])
            })
            .collect();
        assert_eq!(triple.len(), 1);
        assert_eq!(triple[0].sentence_id, SentenceId(1));
    }

    #[test]
    fn aggregate_rejects_duplicate_specs() {
        let a = set_of("a", &[("q", 1)]);
        let b = set_of("a", &[("q", 2)]);
        assert!(aggregate(&[&a, &b]).is_err());
    }

    fn gold_world() -> (QaDataset, Corpus) {
        let docs = vec![DocRecord {
            doc_id: "d".into(),
            text: "sentence zero here. sentence one here. sentence two here. sentence three here."
                .into(),
        }];
        let corpus = Corpus::from_documents(&docs, vec![]);
        let sids: Vec<SentenceId> = corpus.iter().map(|s| s.sentence_id).collect();
        let dir = tempfile::tempdir().unwrap();
        let qa = dir.path().join("qa.l");
        write_jsonl(
            &qa,
            [
                QaRecord {
                    query_id: "q0".into(),
                    query_text: "about zero".into(),
                    sentence_id: Some(sids[0].0),
                    sentence_text: None,
                    label: 1,
                    category: None,
                    provenance: None,
                },
                QaRecord {
                    query_id: "q0".into(),
                    query_text: "about zero".into(),
                    sentence_id: Some(sids[1].0),
                    sentence_text: None,
                    label: 0,
                    category: None,
                    provenance: None,
                },
            ]
            .iter(),
        )
        .unwrap();
        (QaDataset::load(&qa, &corpus).unwrap(), corpus)
    }

    #[test]
    fn empty_augmentation_returns_gold() {
        let (gold, corpus) = gold_world();
        let (t, stats) = build_training_set(&gold, &[], &corpus).unwrap();
        assert_eq!(t.len(), gold.len());
        assert_eq!(stats.augmented_added, 0);
        assert_eq!(stats.conflict_dropped, 0);
    }

    #[test]
    fn disjoint_augmentation_extends_gold() {
        let (gold, corpus) = gold_world();
        let new_sid = corpus.iter().nth(2).unwrap().sentence_id;
        let d_aug = vec![QaPair {
            query_id: "q0".into(),
            sentence_id: new_sid,
            label: 1,
            provenance: Provenance::Augmented(vec!["a".into()]),
        }];
        let (t, stats) = build_training_set(&gold, &d_aug, &corpus).unwrap();
        assert_eq!(t.len(), gold.len() + 1);
        assert_eq!(stats.augmented_added, 1);
        assert!(stats.positive_rate_after > stats.positive_rate_before);
        assert_eq!(
            t.queries().keys().collect::<Vec<_>>(),
            gold.queries().keys().collect::<Vec<_>>()
        );
    }

    #[test]
    fn gold_negative_wins_over_augmented_positive() {
        let (gold, corpus) = gold_world();
        let negative_sid = gold
            .pairs()
            .iter()
            .find(|p| p.label == 0)
            .unwrap()
            .sentence_id;
        let d_aug = vec![QaPair {
            query_id: "q0".into(),
            sentence_id: negative_sid,
            label: 1,
            provenance: Provenance::Augmented(vec!["a".into()]),
        }];
        let (t, stats) = build_training_set(&gold, &d_aug, &corpus).unwrap();
        assert_eq!(t.len(), gold.len());
        assert_eq!(stats.conflict_dropped, 1);
        // The gold label survives.
        assert_eq!(t.pair_labels()[&("q0".to_string(), negative_sid)], 0);
    }

    #[test]
    fn foreign_query_in_augmentation_is_rejected() {
        let (gold, corpus) = gold_world();
        let sid = corpus.iter().next().unwrap().sentence_id;
        let d_aug = vec![QaPair {
            query_id: "unknown-query".into(),
            sentence_id: sid,
            label: 1,
            provenance: Provenance::Augmented(vec!["a".into()]),
        }];
        let err = build_training_set(&gold, &d_aug, &corpus).unwrap_err();
        assert!(err.to_string().contains("unknown-query"), "{err}");
    }

    #[test]
    fn overlap_of_a_set_with_itself_is_total() {
        let a = set_of("a", &[("q", 1), ("q", 2)]);
        let b = set_of("b", &[("q", 1), ("q", 2)]);
        let report = overlap_stats(&[&a, &b]).unwrap();
        assert_eq!(report.union, 2);
        let both = report.regions.iter().find(|r| r.mask == 0b11).unwrap();
        assert_eq!(both.count, 2);
        assert_eq!(both.pct_of_union, 100.0);
    }

    #[test]
    fn overlap_of_disjoint_sets_has_empty_intersections() {
        let a = set_of("a", &[("q", 1)]);
        let b = set_of("b", &[("q", 2)]);
        let report = overlap_stats(&[&a, &b]).unwrap();
        assert_eq!(report.union, 2);
        assert_eq!(
            report.regions.iter().find(|r| r.mask == 0b11).unwrap().count,
            0
        );
    }

    #[test]
    fn overlap_matches_hand_enumeration_on_three_sets() {
        let a = set_of("a", &[("q", 1), ("q", 2), ("q", 3), ("q", 4)]);
        let b = set_of("b", &[("q", 1), ("q", 2), ("q", 5), ("q", 6)]);
        let c = set_of("c", &[("q", 1), ("q", 7), ("q", 8), ("q", 9)]);
        let report = overlap_stats(&[&a, &b, &c]).unwrap();
        assert_eq!(report.union, 9);
        let count = |mask: u32| {
            report
                .regions
                .iter()
                .find(|r| r.mask == mask)
                .unwrap()
                .count
        };
        assert_eq!(count(0b001), 2); // only A: 3, 4
        assert_eq!(count(0b010), 2); // only B: 5, 6
        assert_eq!(count(0b100), 3); // only C: 7, 8, 9
        assert_eq!(count(0b011), 1); // A&B only: 2
        assert_eq!(count(0b101), 0);
        assert_eq!(count(0b110), 0);
        assert_eq!(count(0b111), 1); // 1
        let total: usize = report.regions.iter().map(|r| r.count).sum();
        assert_eq!(total, report.union);
    }

    #[test]
    fn overlap_needs_two_sets() {
        let a = set_of("a", &[("q", 1)]);
        assert!(overlap_stats(&[&a]).is_err());
    }

    #[test]
    fn bleu_of_identical_corpora_is_one() {
        let corpus: Vec<String> = vec![
            "we collect your data for advertising purposes".into(),
            "your information may be shared with partners".into(),
            "data is retained for two years at most".into(),
        ];
        let bleu = corpus_bleu(&corpus, &corpus).unwrap();
        assert!((bleu - 1.0).abs() < 1e-9, "{bleu}");
    }

    #[test]
    fn bleu_without_shared_four_grams_is_zero() {
        let cands: Vec<String> = vec!["a b c d e".into()];
        let refs: Vec<String> = vec!["a b x c d".into()];
        // Unigrams and some bigrams match, but no 4-gram does.
        assert_eq!(corpus_bleu(&cands, &refs).unwrap(), 0.0);
    }

    #[test]
    fn bleu_matches_hand_computed_fixture() {
        // p1 = 9/15, p2 = 6/12, p3 = 4/9, p4 = 2/6; c=15 > r=14 so
        // BP=1; BLEU = (p1*p2*p3*p4)^(1/4) = 0.4591497693322866.
        let cands: Vec<String> = vec!["a b c d".into(), "e f g h e f".into(), "x y z w q".into()];
        let refs: Vec<String> = vec!["a b c d".into(), "e f g h".into(), "p q r s t".into()];
        let bleu = corpus_bleu(&cands, &refs).unwrap();
        assert!((bleu - 0.4591497693322866).abs() < 1e-9, "{bleu}");
    }

    #[test]
    fn bleu_applies_brevity_penalty() {
        // Perfect precisions but candidates shorter than references:
        // c=8, r=12, BP=exp(1-12/8)=0.6065306597126334.
        let cands: Vec<String> = vec!["a b c d".into(), "e f g h".into()];
        let refs: Vec<String> = vec!["a b c d x y".into(), "e f g h u v".into()];
        let bleu = corpus_bleu(&cands, &refs).unwrap();
        assert!((bleu - 0.6065306597126334).abs() < 1e-9, "{bleu}");
    }

    #[test]
    fn bleu_rejects_empty_inputs() {
        let empty: Vec<String> = Vec::new();
        let some: Vec<String> = vec!["a b".into()];
        assert!(corpus_bleu(&empty, &some).is_err());
        assert!(corpus_bleu(&some, &empty).is_err());
    }

    #[test]
    fn preset_parsing_roundtrips() {
        for name in [
            "none",
            "era",
            "era-d",
            "baseline-e",
            "single:alpha",
            "single-nofilter:alpha",
            "common-oracle:beta",
        ] {
            assert_eq!(Preset::parse(name).unwrap().name(), name);
        }
        assert!(Preset::parse("bogus").is_err());
    }

    #[test]
    fn manifest_is_sorted_and_stable() {
        let mut m = RunManifest::default();
        m.set("zeta", 1);
        m.set("alpha", "x");
        assert_eq!(m.to_text(), "alpha=x\nzeta=1\n");
        let mut m2 = RunManifest::default();
        m2.set("alpha", "x");
        m2.set("zeta", 1);
        assert_eq!(m.digest(), m2.digest());
    }
}
