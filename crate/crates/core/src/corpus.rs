//! Corpus ingestion and QA dataset loading.
//!
//! Raw documents are segmented into sentences, normalized, assigned
//! stable content-hash ids and deduplicated into an id-addressed
//! [`Corpus`]. Labeled QA data loads into a [`QaDataset`] whose pairs
//! reference corpus sentences (or carry inline text hashed with the
//! same function, so ids join across files and runs).

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::hash::{file_digest, fnv1a};
use crate::io::{read_jsonl, write_jsonl};

/// Stable 64-bit identifier of a normalized sentence text.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct SentenceId(pub u64);

impl fmt::Display for SentenceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// NFC-normalize, collapse whitespace runs to single spaces and trim.
/// Case is preserved: relevance annotations are sensitive to surface
/// form, so we never fold it away.
pub fn normalize_text(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    let mut pending_space = false;
    for ch in nfc.chars() {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(ch);
        }
    }
    out
}

/// Content-hash id of a normalized text. Exposed so that external
/// embedding files can be keyed consistently with corpus ids.
pub fn text_id(normalized: &str) -> SentenceId {
    SentenceId(fnv1a(normalized.as_bytes()))
}

/// One normalized sentence of a policy document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySentence {
    pub sentence_id: SentenceId,
    pub doc_id: String,
    pub position: u32,
    pub text: String,
}

/// Split a raw document into normalized sentences.
///
/// Boundaries are terminal punctuation (`.`, `!`, `?`) followed by
/// whitespace, plus newlines. Empty segments are dropped and positions
/// are consecutive from 0.
pub fn segment_document(raw_text: &str, doc_id: &str) -> Vec<PolicySentence> {
    let mut sentences = Vec::new();
    for line in raw_text.split('\n') {
        for segment in split_terminal_punct(line) {
            let text = normalize_text(segment);
            if text.is_empty() {
                continue;
            }
            sentences.push(PolicySentence {
                sentence_id: text_id(&text),
                doc_id: doc_id.to_string(),
                position: sentences.len() as u32,
                text,
            });
        }
    }
    sentences
}

fn split_terminal_punct(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = line.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(_, next)) = iter.peek() {
                if next.is_whitespace() {
                    let end = i + c.len_utf8();
                    out.push(&line[start..end]);
                    start = end;
                }
            }
        }
    }
    if start < line.len() {
        out.push(&line[start..]);
    }
    out
}

/// Raw document record as stored in a document file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocRecord {
    pub doc_id: String,
    pub text: String,
}

/// Ingested source file: path plus content digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub path: String,
    pub digest: String,
}

/// Deduplicated, id-addressed pool of unlabeled sentences.
///
/// Iteration order is ascending `sentence_id`, so serialization is
/// deterministic and ids join across runs.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    sentences: Vec<PolicySentence>,
    source_manifest: Vec<SourceFile>,
    doc_count: usize,
}

impl Corpus {
    /// Build a corpus from segmented documents. Exact-duplicate
    /// normalized texts collapse to their first occurrence; distinct
    /// texts that collide on the 64-bit hash are disambiguated by
    /// re-hashing with document id and position appended, and reported.
    pub fn from_documents(docs: &[DocRecord], source_manifest: Vec<SourceFile>) -> Corpus {
        let mut by_id: BTreeMap<SentenceId, PolicySentence> = BTreeMap::new();
        for doc in docs {
            for mut sentence in segment_document(&doc.text, &doc.doc_id) {
                match by_id.entry(sentence.sentence_id) {
                    Entry::Vacant(slot) => {
                        slot.insert(sentence);
                    }
                    Entry::Occupied(existing) => {
                        if existing.get().text == sentence.text {
                            continue; // exact duplicate, keep first
                        }
                        log::warn!(
                            "sentence id collision between {:?} and {:?}; disambiguating",
                            existing.get().text,
                            sentence.text
                        );
                        let salted = format!(
                            "{}\u{0}{}\u{0}{}",
                            sentence.text, sentence.doc_id, sentence.position
                        );
                        sentence.sentence_id = text_id(&salted);
                        by_id.insert(sentence.sentence_id, sentence);
                    }
                }
            }
        }
        let doc_count = docs.len();
        Corpus {
            sentences: by_id.into_values().collect(),
            source_manifest,
            doc_count,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn source_manifest(&self) -> &[SourceFile] {
        &self.source_manifest
    }

    /// Sentences in ascending `sentence_id` order.
    pub fn iter(&self) -> impl Iterator<Item = &PolicySentence> {
        self.sentences.iter()
    }

    pub fn get(&self, id: SentenceId) -> Option<&PolicySentence> {
        self.sentences
            .binary_search_by_key(&id, |s| s.sentence_id)
            .ok()
            .map(|i| &self.sentences[i])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, self.sentences.iter())
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let sentences: Vec<PolicySentence> = read_jsonl(path)?;
        let mut prev: Option<SentenceId> = None;
        let mut docs = BTreeSet::new();
        for s in &sentences {
            if let Some(p) = prev {
                if s.sentence_id <= p {
                    return Err(Error::Schema(format!(
                        "corpus file {} is not sorted by ascending sentence_id near {}",
                        path.display(),
                        s.sentence_id
                    )));
                }
            }
            prev = Some(s.sentence_id);
            docs.insert(s.doc_id.clone());
        }
        let digest = file_digest(path)?;
        Ok(Corpus {
            sentences,
            source_manifest: vec![SourceFile {
                path: path.display().to_string(),
                digest,
            }],
            doc_count: docs.len(),
        })
    }
}

/// Ingest document files into a deduplicated corpus.
pub fn ingest_corpus(paths: &[PathBuf]) -> Result<Corpus> {
    let mut docs = Vec::new();
    let mut manifest = Vec::new();
    for path in paths {
        let digest = file_digest(path)?;
        let records: Vec<DocRecord> = read_jsonl(path)?;
        for (i, record) in records.iter().enumerate() {
            if record.doc_id.is_empty() {
                return Err(Error::parse(path, i + 1, "empty doc_id"));
            }
        }
        docs.extend(records);
        manifest.push(SourceFile {
            path: path.display().to_string(),
            digest,
        });
    }
    Ok(Corpus::from_documents(&docs, manifest))
}

/// Binary relevance label.
pub type Label = u8;

/// Where a QA pair came from: expert annotation or retrieval-based
/// augmentation (with the contributing encoder specs).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Gold,
    Augmented(Vec<String>),
}

impl Provenance {
    pub fn is_augmented(&self) -> bool {
        matches!(self, Provenance::Augmented(_))
    }

    pub fn encode(&self) -> String {
        match self {
            Provenance::Gold => "gold".to_string(),
            Provenance::Augmented(specs) => format!("augmented:{}", specs.join("+")),
        }
    }

    pub fn decode(s: &str) -> Result<Provenance> {
        if s == "gold" {
            return Ok(Provenance::Gold);
        }
        if let Some(rest) = s.strip_prefix("augmented:") {
            let specs: Vec<String> = rest.split('+').map(str::to_string).collect();
            if specs.iter().any(|s| s.is_empty()) {
                return Err(Error::Schema(format!("bad provenance {s:?}")));
            }
            return Ok(Provenance::Augmented(specs));
        }
        Err(Error::Schema(format!("bad provenance {s:?}")))
    }
}

/// One (query, sentence, label) instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaPair {
    pub query_id: String,
    pub sentence_id: SentenceId,
    pub label: Label,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryInfo {
    pub text: String,
    pub category: Option<String>,
}

/// On-disk QA record. Either `sentence_id` or `sentence_text` must be
/// present; inline text is hashed into an id with the corpus hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaRecord {
    pub query_id: String,
    pub query_text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentence_id: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentence_text: Option<String>,
    pub label: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

/// Labeled QA dataset with resolved sentence texts.
#[derive(Debug, Clone, Default)]
pub struct QaDataset {
    pairs: Vec<QaPair>,
    queries: BTreeMap<String, QueryInfo>,
    sentence_texts: BTreeMap<SentenceId, String>,
}

impl QaDataset {
    pub fn new(
        pairs: Vec<QaPair>,
        queries: BTreeMap<String, QueryInfo>,
        sentence_texts: BTreeMap<SentenceId, String>,
    ) -> Result<QaDataset> {
        let ds = QaDataset {
            pairs,
            queries,
            sentence_texts,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut dups = Vec::new();
        for pair in &self.pairs {
            if pair.label > 1 {
                return Err(Error::Schema(format!(
                    "label {} outside {{0,1}} for query {}",
                    pair.label, pair.query_id
                )));
            }
            if pair.provenance.is_augmented() && pair.label != 1 {
                return Err(Error::Schema(format!(
                    "augmented pair ({}, {}) must be positive",
                    pair.query_id, pair.sentence_id
                )));
            }
            if !seen.insert((pair.query_id.clone(), pair.sentence_id)) {
                dups.push(format!("({}, {})", pair.query_id, pair.sentence_id));
            }
            if !self.queries.contains_key(&pair.query_id) {
                return Err(Error::Schema(format!("query {} has no info", pair.query_id)));
            }
            if !self.sentence_texts.contains_key(&pair.sentence_id) {
                return Err(Error::Schema(format!(
                    "sentence {} has no resolved text",
                    pair.sentence_id
                )));
            }
        }
        if !dups.is_empty() {
            return Err(Error::Schema(format!(
                "duplicate (query_id, sentence_id) pairs: {}",
                dups.join(", ")
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[QaPair] {
        &self.pairs
    }

    pub fn queries(&self) -> &BTreeMap<String, QueryInfo> {
        &self.queries
    }

    pub fn query_text(&self, query_id: &str) -> Result<&str> {
        self.queries
            .get(query_id)
            .map(|q| q.text.as_str())
            .ok_or_else(|| Error::Lookup(format!("query {query_id}")))
    }

    pub fn sentence_text(&self, id: SentenceId) -> Result<&str> {
        self.sentence_texts
            .get(&id)
            .map(String::as_str)
            .ok_or_else(|| Error::Lookup(format!("sentence {id}")))
    }

    pub fn sentence_texts(&self) -> &BTreeMap<SentenceId, String> {
        &self.sentence_texts
    }

    /// Map (query_id, sentence_id) -> label over the dataset's pairs.
    pub fn pair_labels(&self) -> BTreeMap<(String, SentenceId), Label> {
        self.pairs
            .iter()
            .map(|p| ((p.query_id.clone(), p.sentence_id), p.label))
            .collect()
    }

    /// Positive pairs as (query_text, sentence_text), in pair order.
    pub fn positive_texts(&self) -> Result<Vec<(String, String)>> {
        self.pairs
            .iter()
            .filter(|p| p.label == 1)
            .map(|p| {
                Ok((
                    self.query_text(&p.query_id)?.to_string(),
                    self.sentence_text(p.sentence_id)?.to_string(),
                ))
            })
            .collect()
    }

    pub fn stats(&self) -> DatasetStats {
        let positives = self.pairs.iter().filter(|p| p.label == 1).count();
        let negatives = self.pairs.len() - positives;
        let augmented = self
            .pairs
            .iter()
            .filter(|p| p.provenance.is_augmented())
            .count();
        let mut per_query: BTreeMap<&str, usize> = BTreeMap::new();
        for pair in &self.pairs {
            if pair.label == 1 {
                *per_query.entry(pair.query_id.as_str()).or_default() += 1;
            }
        }
        let queries = self.queries.len();
        let mut categories: BTreeMap<String, usize> = BTreeMap::new();
        for info in self.queries.values() {
            let tag = info.category.clone().unwrap_or_else(|| "Others".to_string());
            *categories.entry(tag).or_default() += 1;
        }
        DatasetStats {
            pairs: self.pairs.len(),
            queries,
            positives,
            negatives,
            augmented,
            positive_rate: if self.pairs.is_empty() {
                0.0
            } else {
                positives as f64 / self.pairs.len() as f64
            },
            positives_per_query: if queries == 0 {
                0.0
            } else {
                positives as f64 / queries as f64
            },
            categories,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records = self.pairs.iter().map(|p| {
            let info = &self.queries[&p.query_id];
            QaRecord {
                query_id: p.query_id.clone(),
                query_text: info.text.clone(),
                sentence_id: Some(p.sentence_id.0),
                sentence_text: Some(self.sentence_texts[&p.sentence_id].clone()),
                label: i64::from(p.label),
                category: info.category.clone(),
                provenance: Some(p.provenance.encode()),
            }
        });
        write_jsonl(path, records)
    }

    /// Load a QA file, resolving sentence references against `corpus`.
    /// Records may instead carry inline sentence text, which is
    /// normalized and hashed into an id with the corpus hash function.
    pub fn load(path: &Path, corpus: &Corpus) -> Result<QaDataset> {
        let records: Vec<QaRecord> = read_jsonl(path)?;
        let mut pairs = Vec::with_capacity(records.len());
        let mut queries: BTreeMap<String, QueryInfo> = BTreeMap::new();
        let mut sentence_texts: BTreeMap<SentenceId, String> = BTreeMap::new();

        for (i, record) in records.into_iter().enumerate() {
            let line = i + 1;
            if record.query_id.is_empty() {
                return Err(Error::parse(path, line, "empty query_id"));
            }
            if !(0..=1).contains(&record.label) {
                return Err(Error::parse(
                    path,
                    line,
                    format!("label {} outside {{0,1}}", record.label),
                ));
            }
            let query_text = normalize_text(&record.query_text);
            match queries.entry(record.query_id.clone()) {
                Entry::Vacant(slot) => {
                    slot.insert(QueryInfo {
                        text: query_text,
                        category: record.category.clone(),
                    });
                }
                Entry::Occupied(mut existing) => {
                    if existing.get().text != query_text {
                        return Err(Error::parse(
                            path,
                            line,
                            format!("query {} has conflicting texts", record.query_id),
                        ));
                    }
                    match (&existing.get().category, &record.category) {
                        (Some(a), Some(b)) if a != b => {
                            return Err(Error::parse(
                                path,
                                line,
                                format!("query {} has conflicting categories", record.query_id),
                            ));
                        }
                        (None, Some(_)) => {
                            existing.get_mut().category = record.category.clone();
                        }
                        _ => {}
                    }
                }
            }

            let (sentence_id, text) = match (&record.sentence_id, &record.sentence_text) {
                (_, Some(raw)) => {
                    let text = normalize_text(raw);
                    if text.is_empty() {
                        return Err(Error::parse(path, line, "empty sentence_text"));
                    }
                    let id = text_id(&text);
                    if let Some(stated) = record.sentence_id {
                        if stated != id.0 {
                            return Err(Error::parse(
                                path,
                                line,
                                format!("sentence_id {stated} disagrees with text hash {id}"),
                            ));
                        }
                    }
                    (id, text)
                }
                (Some(raw_id), None) => {
                    let id = SentenceId(*raw_id);
                    let sentence = corpus
                        .get(id)
                        .ok_or_else(|| Error::Lookup(format!("sentence {id} (at {path:?}:{line})",
                            path = path.display())))?;
                    (id, sentence.text.clone())
                }
                (None, None) => {
                    return Err(Error::parse(
                        path,
                        line,
                        "record carries neither sentence_id nor sentence_text",
                    ));
                }
            };
            if let Some(existing) = sentence_texts.get(&sentence_id) {
                if *existing != text {
                    return Err(Error::parse(
                        path,
                        line,
                        format!("sentence {sentence_id} resolves to conflicting texts"),
                    ));
                }
            } else {
                sentence_texts.insert(sentence_id, text);
            }

            let provenance = match &record.provenance {
                None => Provenance::Gold,
                Some(p) => Provenance::decode(p)?,
            };
            pairs.push(QaPair {
                query_id: record.query_id,
                sentence_id,
                label: record.label as Label,
                provenance,
            });
        }
        QaDataset::new(pairs, queries, sentence_texts)
    }

    /// Load a QA file whose records all carry inline sentence text.
    pub fn load_inline(path: &Path) -> Result<QaDataset> {
        QaDataset::load(path, &Corpus::default())
    }
}

/// Label-distribution statistics reported by the stats command.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub pairs: usize,
    pub queries: usize,
    pub positives: usize,
    pub negatives: usize,
    pub augmented: usize,
    pub positive_rate: f64,
    pub positives_per_query: f64,
    pub categories: BTreeMap<String, usize>,
}

/// Corpus-side statistics (sentence counts per document).
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub sentences: usize,
    pub documents: usize,
    pub sentences_per_document: f64,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let docs = corpus.doc_count().max(
        corpus
            .iter()
            .map(|s| s.doc_id.as_str())
            .collect::<BTreeSet<_>>()
            .len(),
    );
    CorpusStats {
        sentences: corpus.len(),
        documents: docs,
        sentences_per_document: if docs == 0 {
            0.0
        } else {
            corpus.len() as f64 / docs as f64
        },
    }
}
