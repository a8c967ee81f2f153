//! Synthetic sentence-selection benchmark with planted structure.
//!
//! A vocabulary is partitioned into per-topic signature words, shared
//! distractor-marker words, and background filler. Corpus sentences
//! come in three kinds:
//!
//! - relevant(t): a few signature words of topic t plus background —
//!   genuinely answers topic-t queries;
//! - distractor(t): fewer signature words plus marker words — lexically
//!   close to topic t but labeled irrelevant (the planted "noise" an
//!   oracle should reject);
//! - noise: background only.
//!
//! Gold training positives are drawn from the *strong* relevant
//! sentences only, so the labeled data underrepresents the weaker
//! phrasings that retrieval can surface. Test positives mix all
//! strengths.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, DocRecord, QaDataset, QaRecord, SentenceId};
use crate::error::Result;
use crate::io::write_jsonl;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub vocabulary: usize,
    pub topics: usize,
    pub corpus_sentences: usize,
    pub relevant_per_topic: usize,
    pub distractors_per_topic: usize,
    pub signature_words_per_topic: usize,
    pub marker_words: usize,
    /// Signature words per relevant sentence (inclusive range).
    pub relevant_signature_range: (usize, usize),
    /// Signature words per distractor sentence (inclusive range).
    pub distractor_signature_range: (usize, usize),
    /// Signature words per query.
    pub query_signature_words: usize,
    /// Marker words per distractor sentence.
    pub markers_per_distractor: usize,
    pub train_queries: usize,
    pub gold_positives_per_query: usize,
    pub train_pairs_per_query: usize,
    pub test_queries: usize,
    pub test_positives_per_query: usize,
    pub test_pairs_per_query: usize,
    pub doc_sentences: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 7,
            vocabulary: 1000,
            topics: 8,
            corpus_sentences: 5000,
            relevant_per_topic: 200,
            distractors_per_topic: 120,
            signature_words_per_topic: 12,
            marker_words: 40,
            relevant_signature_range: (3, 6),
            distractor_signature_range: (5, 6),
            query_signature_words: 8,
            markers_per_distractor: 4,
            train_queries: 40,
            gold_positives_per_query: 3,
            train_pairs_per_query: 60,
            test_queries: 16,
            test_positives_per_query: 8,
            test_pairs_per_query: 160,
            doc_sentences: 50,
        }
    }
}

impl BenchmarkConfig {
    /// A small variant for fast tests and the bundled fixture.
    pub fn small() -> Self {
        BenchmarkConfig {
            seed: 11,
            vocabulary: 200,
            topics: 4,
            corpus_sentences: 200,
            relevant_per_topic: 24,
            distractors_per_topic: 12,
            signature_words_per_topic: 8,
            marker_words: 16,
            relevant_signature_range: (3, 5),
            distractor_signature_range: (4, 4),
            query_signature_words: 6,
            markers_per_distractor: 3,
            train_queries: 8,
            gold_positives_per_query: 2,
            train_pairs_per_query: 20,
            test_queries: 4,
            test_positives_per_query: 4,
            test_pairs_per_query: 40,
            doc_sentences: 20,
        }
    }
}

const CATEGORIES: [&str; 8] = [
    "Data Collection",
    "Data Sharing",
    "Data Security",
    "Data Retention",
    "User Access",
    "User Choice",
    "Data Deletion",
    "Others",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Relevant { topic: usize, strength: usize },
    Distractor { topic: usize },
    Noise,
}

struct PlantedSentence {
    text: String,
    kind: Kind,
}

/// Generated benchmark: raw documents, the ingested corpus, and the
/// train/test datasets with planted labels.
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub docs: Vec<DocRecord>,
    pub corpus: Corpus,
    pub train: QaDataset,
    pub test: QaDataset,
    /// Planted truth: per topic, (sentence id, signature strength).
    pub relevant_by_topic: Vec<Vec<(SentenceId, usize)>>,
    /// Planted truth: per topic, distractor sentence ids.
    pub distractors_by_topic: Vec<Vec<SentenceId>>,
    /// Topic of each query id (train and test).
    pub query_topics: std::collections::BTreeMap<String, usize>,
}

struct WordTable {
    signatures: Vec<Vec<String>>, // per topic
    markers: Vec<String>,
    background: Vec<String>,
}

fn build_words(cfg: &BenchmarkConfig) -> WordTable {
    let word = |i: usize| format!("w{i:03}");
    let mut next = 0;
    let mut signatures = Vec::with_capacity(cfg.topics);
    for _ in 0..cfg.topics {
        signatures.push(
            (0..cfg.signature_words_per_topic)
                .map(|_| {
                    let w = word(next);
                    next += 1;
                    w
                })
                .collect(),
        );
    }
    let markers: Vec<String> = (0..cfg.marker_words)
        .map(|_| {
            let w = word(next);
            next += 1;
            w
        })
        .collect();
    let background: Vec<String> = (next..cfg.vocabulary).map(word).collect();
    assert!(
        background.len() >= 20,
        "vocabulary too small for the requested topic/marker structure"
    );
    WordTable {
        signatures,
        markers,
        background,
    }
}

fn sample_distinct<'a>(
    rng: &mut ChaCha8Rng,
    pool: &'a [String],
    n: usize,
) -> Vec<&'a String> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.into_iter().map(|i| &pool[i]).collect()
}

fn make_sentence(rng: &mut ChaCha8Rng, words: Vec<&String>) -> String {
    let mut tokens: Vec<&String> = words;
    tokens.shuffle(rng);
    let mut text = tokens
        .iter()
        .map(|s| s.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    text.push('.');
    text
}

/// Ids from `pool` sharing the most tokens with `query`, descending,
/// ties by ascending id.
fn top_overlap(
    corpus: &Corpus,
    query: &str,
    pool: &[SentenceId],
    n: usize,
) -> Vec<SentenceId> {
    let q_tokens: BTreeSet<&str> = query.split_whitespace().collect();
    let mut scored: Vec<(usize, SentenceId)> = pool
        .iter()
        .map(|&sid| {
            let text = &corpus.get(sid).expect("planted sentence").text;
            let shared = text
                .split_whitespace()
                .filter(|t| q_tokens.contains(t))
                .count();
            (shared, sid)
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(n);
    scored.into_iter().map(|(_, sid)| sid).collect()
}

/// Generate the benchmark deterministically from its config.
pub fn generate(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    let words = build_words(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let planted_total = cfg.topics * (cfg.relevant_per_topic + cfg.distractors_per_topic);
    assert!(
        cfg.corpus_sentences >= planted_total,
        "corpus_sentences must cover the planted sentences"
    );

    let mut sentences: Vec<PlantedSentence> = Vec::with_capacity(cfg.corpus_sentences);
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let push_unique = |s: PlantedSentence, seen: &mut BTreeSet<String>, out: &mut Vec<PlantedSentence>| {
        if seen.insert(s.text.clone()) {
            out.push(s);
            true
        } else {
            false
        }
    };

    for topic in 0..cfg.topics {
        let sig = &words.signatures[topic];
        let mut made = 0;
        while made < cfg.relevant_per_topic {
            let (lo, hi) = cfg.relevant_signature_range;
            let strength = rng.gen_range(lo..=hi.min(sig.len()));
            let mut toks = sample_distinct(&mut rng, sig, strength);
            let n_bg = rng.gen_range(4..=7);
            toks.extend(sample_distinct(&mut rng, &words.background, n_bg));
            let s = PlantedSentence {
                text: make_sentence(&mut rng, toks),
                kind: Kind::Relevant { topic, strength },
            };
            if push_unique(s, &mut seen, &mut sentences) {
                made += 1;
            }
        }
        let mut made = 0;
        while made < cfg.distractors_per_topic {
            // Near-misses: topic-heavy like the relevant sentences,
            // plus the marker words that flag them as irrelevant.
            let (lo, hi) = cfg.distractor_signature_range;
            let n_sig = rng.gen_range(lo..=hi.min(sig.len()));
            let mut toks = sample_distinct(&mut rng, sig, n_sig);
            toks.extend(sample_distinct(&mut rng, &words.markers, cfg.markers_per_distractor));
            let n_bg = rng.gen_range(1..=2);
            toks.extend(sample_distinct(&mut rng, &words.background, n_bg));
            let s = PlantedSentence {
                text: make_sentence(&mut rng, toks),
                kind: Kind::Distractor { topic },
            };
            if push_unique(s, &mut seen, &mut sentences) {
                made += 1;
            }
        }
    }
    while sentences.len() < cfg.corpus_sentences {
        let n_bg = rng.gen_range(9..=13);
        let toks = sample_distinct(&mut rng, &words.background, n_bg);
        let s = PlantedSentence {
            text: make_sentence(&mut rng, toks),
            kind: Kind::Noise,
        };
        push_unique(s, &mut seen, &mut sentences);
    }

    // Scatter planted sentences over documents.
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(&mut rng);
    let mut docs = Vec::new();
    for (doc_idx, chunk) in order.chunks(cfg.doc_sentences).enumerate() {
        let text = chunk
            .iter()
            .map(|&i| sentences[i].text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        docs.push(DocRecord {
            doc_id: format!("doc{doc_idx:03}"),
            text,
        });
    }
    let corpus = Corpus::from_documents(&docs, vec![]);
    assert_eq!(corpus.len(), sentences.len(), "unexpected dedup in benchmark corpus");

    // Index planted sentences by id and kind.
    let id_of = |text: &str| -> SentenceId { crate::corpus::text_id(text) };
    let mut relevant_by_topic: Vec<Vec<(SentenceId, usize)>> = vec![Vec::new(); cfg.topics];
    let mut distractors_by_topic: Vec<Vec<SentenceId>> = vec![Vec::new(); cfg.topics];
    let mut noise_ids: Vec<SentenceId> = Vec::new();
    for s in &sentences {
        match s.kind {
            Kind::Relevant { topic, strength } => {
                relevant_by_topic[topic].push((id_of(&s.text), strength))
            }
            Kind::Distractor { topic } => distractors_by_topic[topic].push(id_of(&s.text)),
            Kind::Noise => noise_ids.push(id_of(&s.text)),
        }
    }

    let mut query_topics: std::collections::BTreeMap<String, usize> = std::collections::BTreeMap::new();
    let query_text = |rng: &mut ChaCha8Rng, topic: usize| -> String {
        let sig = &words.signatures[topic];
        let n = cfg.query_signature_words.min(sig.len());
        let toks = sample_distinct(rng, sig, n);
        toks.iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };

    // Training queries: gold positives come from the strong relevant
    // sentences; negatives mix same-topic distractors with noise and
    // other-topic relevant sentences.
    let mut train_records = Vec::new();
    let mut gold_positive_ids: BTreeSet<SentenceId> = BTreeSet::new();
    let mut train_query_texts: BTreeSet<String> = BTreeSet::new();
    for qi in 0..cfg.train_queries {
        let topic = qi % cfg.topics;
        let mut text = query_text(&mut rng, topic);
        while !train_query_texts.insert(text.clone()) {
            text = query_text(&mut rng, topic);
        }
        let query_id = format!("train-q{qi:03}");
        query_topics.insert(query_id.clone(), topic);
        let category = CATEGORIES[topic % CATEGORIES.len()];

        let strong_min = cfg.relevant_signature_range.1.saturating_sub(1);
        let strong: Vec<SentenceId> = relevant_by_topic[topic]
            .iter()
            .filter(|(_, strength)| *strength >= strong_min)
            .map(|(id, _)| *id)
            .collect();
        let mut strong_pool = strong.clone();
        strong_pool.shuffle(&mut rng);
        let positives: Vec<SentenceId> = strong_pool
            .into_iter()
            .take(cfg.gold_positives_per_query)
            .collect();
        assert_eq!(
            positives.len(),
            cfg.gold_positives_per_query,
            "not enough strong relevant sentences for topic {topic}"
        );
        gold_positive_ids.extend(positives.iter().copied());

        let negatives_needed = cfg.train_pairs_per_query - positives.len();
        let n_distractor = (negatives_needed * 3 / 10).min(distractors_by_topic[topic].len());
        let mut negatives: Vec<SentenceId> = Vec::new();
        // Annotate the *confusing* distractors: the ones sharing the
        // most words with this query, i.e. what retrieval will surface.
        negatives.extend(top_overlap(
            &corpus,
            &text,
            &distractors_by_topic[topic],
            n_distractor,
        ));
        // Fill with noise and other-topic relevant sentences.
        let mut filler: Vec<SentenceId> = Vec::new();
        filler.extend(noise_ids.iter().copied());
        for (other, list) in relevant_by_topic.iter().enumerate() {
            if other != topic {
                filler.extend(list.iter().map(|(id, _)| *id));
            }
        }
        filler.shuffle(&mut rng);
        for id in filler {
            if negatives.len() >= negatives_needed {
                break;
            }
            if !negatives.contains(&id) {
                negatives.push(id);
            }
        }

        for (sid, label) in positives
            .iter()
            .map(|s| (*s, 1i64))
            .chain(negatives.iter().map(|s| (*s, 0i64)))
        {
            let sentence = corpus.get(sid).expect("planted sentence in corpus");
            train_records.push(QaRecord {
                query_id: query_id.clone(),
                query_text: text.clone(),
                sentence_id: Some(sid.0),
                sentence_text: Some(sentence.text.clone()),
                label,
                category: Some(category.to_string()),
                provenance: None,
            });
        }
    }

    // Test queries: fresh texts, positives span all strengths and
    // avoid the train gold positives.
    let mut test_records = Vec::new();
    for qi in 0..cfg.test_queries {
        let topic = qi % cfg.topics;
        let mut text = query_text(&mut rng, topic);
        while train_query_texts.contains(&text) {
            text = query_text(&mut rng, topic);
        }
        let query_id = format!("test-q{qi:03}");
        query_topics.insert(query_id.clone(), topic);
        let category = CATEGORIES[topic % CATEGORIES.len()];

        let mut candidates: Vec<SentenceId> = relevant_by_topic[topic]
            .iter()
            .map(|(id, _)| *id)
            .filter(|id| !gold_positive_ids.contains(id))
            .collect();
        candidates.shuffle(&mut rng);
        let positives: Vec<SentenceId> = candidates
            .into_iter()
            .take(cfg.test_positives_per_query)
            .collect();
        assert_eq!(positives.len(), cfg.test_positives_per_query);

        let negatives_needed = cfg.test_pairs_per_query - positives.len();
        let n_distractor = (negatives_needed / 5).min(distractors_by_topic[topic].len());
        let mut negatives: Vec<SentenceId> = Vec::new();
        negatives.extend(top_overlap(
            &corpus,
            &text,
            &distractors_by_topic[topic],
            n_distractor,
        ));
        let mut filler: Vec<SentenceId> = Vec::new();
        filler.extend(noise_ids.iter().copied());
        for (other, list) in relevant_by_topic.iter().enumerate() {
            if other != topic {
                filler.extend(list.iter().map(|(id, _)| *id));
            }
        }
        filler.shuffle(&mut rng);
        for id in filler {
            if negatives.len() >= negatives_needed {
                break;
            }
            if !negatives.contains(&id) && !positives.contains(&id) {
                negatives.push(id);
            }
        }

        for (sid, label) in positives
            .iter()
            .map(|s| (*s, 1i64))
            .chain(negatives.iter().map(|s| (*s, 0i64)))
        {
            let sentence = corpus.get(sid).expect("planted sentence in corpus");
            test_records.push(QaRecord {
                query_id: query_id.clone(),
                query_text: text.clone(),
                sentence_id: Some(sid.0),
                sentence_text: Some(sentence.text.clone()),
                label,
                category: Some(category.to_string()),
                provenance: None,
            });
        }
    }

    let dir = tempfile_dir()?;
    let train_path = dir.join("train.l");
    let test_path = dir.join("test.l");
    write_jsonl(&train_path, train_records.iter())?;
    write_jsonl(&test_path, test_records.iter())?;
    let train = QaDataset::load(&train_path, &corpus)?;
    let test = QaDataset::load(&test_path, &corpus)?;
    std::fs::remove_dir_all(&dir).ok();

    Ok(Benchmark {
        config: cfg.clone(),
        docs,
        corpus,
        train,
        test,
        relevant_by_topic,
        distractors_by_topic,
        query_topics,
    })
}

// Scratch directory for materializing records through the loaders,
// so generated datasets pass exactly the validation real files do.
fn tempfile_dir() -> Result<PathBuf> {
    let base = std::env::temp_dir().join(format!(
        "ensaug-synthetic-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0)
    ));
    std::fs::create_dir_all(&base)
        .map_err(|e| crate::error::Error::io(&base, e))?;
    Ok(base)
}

/// Paths of a benchmark written to disk.
pub struct BenchmarkFiles {
    pub docs: PathBuf,
    pub corpus: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
}

impl Benchmark {
    /// Write docs.l, corpus.l, train.l and test.l into a directory.
    pub fn write_files(&self, dir: &Path) -> Result<BenchmarkFiles> {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
        let files = BenchmarkFiles {
            docs: dir.join("docs.l"),
            corpus: dir.join("corpus.l"),
            train: dir.join("train.l"),
            test: dir.join("test.l"),
        };
        write_jsonl(&files.docs, self.docs.iter())?;
        self.corpus.save(&files.corpus)?;
        self.train.save(&files.train)?;
        self.test.save(&files.test)?;
        Ok(files)
    }
}
