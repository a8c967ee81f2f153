//! Evaluation: precision/recall/F1 over sentence-selection
//! predictions, per-category breakdowns, and the experiment driver
//! that compares augmentation presets side by side over seeds and
//! retrieval depths.

use std::collections::{BTreeMap, BTreeSet};

use crate::classifier::{
    pair_features_from_embeddings, score_features, train_pair_classifier, PairClassifier,
};
use crate::config::PipelineConfig;
use crate::corpus::{QaDataset, SentenceId};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::pipeline::{
    auto_class_weight, corpus_bleu, filter_retrievals, overlap_stats, retrieved_texts,
    run_augmentation, train_spec_artifacts, PipelineData, Preset, TrainedSpec, VennReport,
    BLEU_CONFIG, SEGMENTER,
};
use crate::real::Real;

/// Binary confusion counts and the derived micro metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold positives.
    pub support: usize,
}

impl Metrics {
    /// Zero-denominator convention: a ratio with an empty denominator
    /// is 0, so degenerate presets stay comparable.
    pub fn from_confusion(tp: usize, fp: usize, fn_: usize, tn: usize) -> Metrics {
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            true_negatives: tn,
            precision,
            recall,
            f1,
            support: tp + fn_,
        }
    }

    pub fn correct(&self) -> usize {
        self.true_positives + self.true_negatives
    }
}

pub type PredictionSet = BTreeSet<(String, SentenceId)>;

fn check_universe(predictions: &PredictionSet, gold: &QaDataset) -> Result<()> {
    for (query_id, sentence_id) in predictions {
        if !gold.queries().contains_key(query_id) {
            return Err(Error::Lookup(format!("predicted query {query_id}")));
        }
        if !gold.sentence_texts().contains_key(sentence_id) {
            return Err(Error::Lookup(format!("predicted sentence {sentence_id}")));
        }
    }
    Ok(())
}

/// Micro-averaged binary metrics of predicted-positive pairs against
/// the gold pairs. A predicted pair that gold does not label counts as
/// a false positive.
pub fn evaluate(predictions: &PredictionSet, gold: &QaDataset) -> Result<Metrics> {
    check_universe(predictions, gold)?;
    let labels = gold.pair_labels();
    let mut tp = 0;
    let mut fp = 0;
    for key in predictions {
        match labels.get(key) {
            Some(1) => tp += 1,
            _ => fp += 1,
        }
    }
    let mut fn_ = 0;
    let mut tn = 0;
    for (key, label) in &labels {
        if !predictions.contains(key) {
            if *label == 1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
        }
    }
    Ok(Metrics::from_confusion(tp, fp, fn_, tn))
}

/// Metrics restricted to each category's queries. Queries missing from
/// the category map fall into "Others".
pub fn evaluate_by_category(
    predictions: &PredictionSet,
    gold: &QaDataset,
    categories: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, Metrics>> {
    check_universe(predictions, gold)?;
    let tag_of = |query_id: &str| -> String {
        categories
            .get(query_id)
            .cloned()
            .unwrap_or_else(|| "Others".to_string())
    };
    let labels = gold.pair_labels();
    #[derive(Default)]
    struct Counts {
        tp: usize,
        fp: usize,
        fn_: usize,
        tn: usize,
    }
    let mut per_tag: BTreeMap<String, Counts> = BTreeMap::new();
    // Every gold query's category appears, even with no activity.
    for query_id in gold.queries().keys() {
        per_tag.entry(tag_of(query_id)).or_default();
    }
    for key in predictions {
        let counts = per_tag.entry(tag_of(&key.0)).or_default();
        match labels.get(key) {
            Some(1) => counts.tp += 1,
            _ => counts.fp += 1,
        }
    }
    for (key, label) in &labels {
        if !predictions.contains(key) {
            let counts = per_tag.entry(tag_of(&key.0)).or_default();
            if *label == 1 {
                counts.fn_ += 1;
            } else {
                counts.tn += 1;
            }
        }
    }
    Ok(per_tag
        .into_iter()
        .map(|(tag, c)| (tag, Metrics::from_confusion(c.tp, c.fp, c.fn_, c.tn)))
        .collect())
}

/// Macro-averaged metrics: per-query precision/recall/F1 averaged
/// arithmetically over queries. Micro is the default; this sits behind
/// a flag and reports stamp which one they used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub queries: usize,
}

pub fn evaluate_macro(predictions: &PredictionSet, gold: &QaDataset) -> Result<MacroMetrics> {
    check_universe(predictions, gold)?;
    let labels = gold.pair_labels();
    let mut per_query: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for q in gold.queries().keys() {
        per_query.insert(q.as_str(), (0, 0, 0));
    }
    for key in predictions {
        let slot = per_query.get_mut(key.0.as_str()).unwrap();
        match labels.get(key) {
            Some(1) => slot.0 += 1,
            _ => slot.1 += 1,
        }
    }
    for (key, label) in &labels {
        if *label == 1 && !predictions.contains(key) {
            per_query.get_mut(key.0.as_str()).unwrap().2 += 1;
        }
    }
    let n = per_query.len();
    let mut sum_p = 0.0;
    let mut sum_r = 0.0;
    let mut sum_f = 0.0;
    for (tp, fp, fn_) in per_query.values() {
        let m = Metrics::from_confusion(*tp, *fp, *fn_, 0);
        sum_p += m.precision;
        sum_r += m.recall;
        sum_f += m.f1;
    }
    Ok(MacroMetrics {
        precision: sum_p / n.max(1) as f64,
        recall: sum_r / n.max(1) as f64,
        f1: sum_f / n.max(1) as f64,
        queries: n,
    })
}

/// Mean and population standard deviation over per-seed values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd::default();
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Classify every pair of the dataset and return the predicted
/// positives. Embeddings are computed once per unique query/sentence.
pub fn predict_positives<R: Real, E: TextEncoder<R>>(
    clf: &PairClassifier<R>,
    dataset: &QaDataset,
    enc: &E,
) -> Result<PredictionSet> {
    if clf.spec_id != enc.spec().spec_id {
        return Err(Error::SpecMismatch {
            expected: clf.spec_id.clone(),
            found: enc.spec().spec_id.clone(),
            context: "predict".into(),
        });
    }
    let mut q_embs: BTreeMap<&str, Vec<R>> = BTreeMap::new();
    for (qid, info) in dataset.queries() {
        q_embs.insert(qid.as_str(), enc.encode_query(&info.text)?);
    }
    let mut p_embs: BTreeMap<SentenceId, Vec<R>> = BTreeMap::new();
    for (sid, text) in dataset.sentence_texts() {
        p_embs.insert(*sid, enc.encode_passage(text)?);
    }
    let mut out = PredictionSet::new();
    for pair in dataset.pairs() {
        let feats = pair_features_from_embeddings(
            &q_embs[pair.query_id.as_str()],
            &p_embs[&pair.sentence_id],
        );
        if score_features(clf, &feats) >= clf.threshold {
            out.insert((pair.query_id.clone(), pair.sentence_id));
        }
    }
    Ok(out)
}

/// One experiment cell: a preset evaluated at one depth under one seed.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub preset: String,
    pub k: usize,
    pub seed: u64,
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Debug, Clone)]
pub struct CellMetrics {
    pub metrics: Metrics,
    pub by_category: BTreeMap<String, Metrics>,
    pub manifest_digest: String,
    pub t_pairs: usize,
    pub d_aug: usize,
}

/// Aggregated row: one preset at one depth, mean +- std over seeds.
#[derive(Debug, Clone)]
pub struct PresetRow {
    pub preset: String,
    pub k: usize,
    pub filtered: bool,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub cells: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Default)]
pub struct CategoryCell {
    pub f1: MeanStd,
    pub correct: MeanStd,
    pub support: usize,
    pub share_pct: f64,
}

/// Full experiment output.
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    pub rows: Vec<PresetRow>,
    pub cells: Vec<CellResult>,
    /// preset -> category -> aggregated cell, at the default depth.
    pub breakdown: BTreeMap<String, BTreeMap<String, CategoryCell>>,
    pub venn_raw: Option<VennReport>,
    pub venn_filtered: Option<VennReport>,
    /// (candidate spec, reference spec, corpus BLEU of raw retrievals).
    pub bleu_pairs: Vec<(String, String, f64)>,
    pub config_digest: String,
    pub averaging: &'static str,
}

/// Run every preset x depth x seed cell: train retrievers and oracles,
/// augment, train the final QA model, and evaluate on the held-out
/// split. Failures abort only their own cell.
pub fn run_experiment<R: Real>(
    config: &PipelineConfig,
    presets: &[Preset],
    seeds: &[u64],
) -> Result<ExperimentReport> {
    if presets.is_empty() {
        return Err(Error::InvalidArg(
            "experiment needs at least one preset".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArg("experiment needs at least one seed".into()));
    }
    let data = PipelineData::load(config)?;
    let test_path = config
        .qa_test
        .as_ref()
        .ok_or_else(|| Error::Config("experiment requires qa_test".into()))?;
    let test = QaDataset::load(test_path, &data.corpus)?;
    let categories: BTreeMap<String, String> = test
        .queries()
        .iter()
        .map(|(q, info)| {
            (
                q.clone(),
                info.category.clone().unwrap_or_else(|| "Others".to_string()),
            )
        })
        .collect();

    // Specs any preset needs, plus the final model's encoder.
    let mut needed: BTreeSet<String> = BTreeSet::new();
    needed.insert(config.final_spec.clone());
    for preset in presets {
        let (specs, mode) = preset.plan(config)?;
        needed.extend(specs);
        if let crate::pipeline::FilterMode::Common(spec) = mode {
            needed.insert(spec);
        }
    }

    let mut cells: Vec<CellResult> = Vec::new();
    let mut diversity: Option<Diversity> = None;
    for &seed in seeds {
        let mut artifacts: BTreeMap<String, TrainedSpec<R>> = BTreeMap::new();
        let mut train_failure: Option<String> = None;
        for spec_id in &needed {
            match train_spec_artifacts::<R>(config, &data, spec_id, seed) {
                Ok(trained) => {
                    artifacts.insert(spec_id.clone(), trained);
                }
                Err(e) => {
                    train_failure = Some(format!("training {spec_id}: {e}"));
                    break;
                }
            }
        }
        if let Some(msg) = train_failure {
            for &k in &config.ks {
                for preset in presets {
                    cells.push(CellResult {
                        preset: preset.name(),
                        k,
                        seed,
                        outcome: Err(msg.clone()),
                    });
                }
            }
            continue;
        }

        // Diversity analytics come from the first fully trained seed.
        if diversity.is_none() {
            diversity = Some(compute_diversity(config, &data, &artifacts)?);
        }

        for &k in &config.ks {
            for preset in presets {
                let outcome =
                    run_cell(config, &data, &artifacts, &test, &categories, preset, k, seed);
                cells.push(CellResult {
                    preset: preset.name(),
                    k,
                    seed,
                    outcome: outcome.map_err(|e| e.to_string()),
                });
            }
        }
    }

    // Aggregate rows in declaration order: depth-major, then preset.
    let mut rows = Vec::new();
    for &k in &config.ks {
        for preset in presets {
            let name = preset.name();
            let mine: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.preset == name && c.k == k)
                .collect();
            let ok: Vec<&CellMetrics> = mine
                .iter()
                .filter_map(|c| c.outcome.as_ref().ok())
                .collect();
            rows.push(PresetRow {
                preset: name.clone(),
                k,
                filtered: preset.is_filtered(),
                precision: mean_std(&ok.iter().map(|m| m.metrics.precision).collect::<Vec<_>>()),
                recall: mean_std(&ok.iter().map(|m| m.metrics.recall).collect::<Vec<_>>()),
                f1: mean_std(&ok.iter().map(|m| m.metrics.f1).collect::<Vec<_>>()),
                cells: mine.len(),
                failures: mine.len() - ok.len(),
            });
        }
    }

    // Category breakdown at the default depth.
    let default_k = config.ks[0];
    let total_queries = test.queries().len().max(1);
    let mut shares: BTreeMap<String, usize> = BTreeMap::new();
    for info in test.queries().values() {
        let tag = info.category.clone().unwrap_or_else(|| "Others".to_string());
        *shares.entry(tag).or_default() += 1;
    }
    let mut breakdown: BTreeMap<String, BTreeMap<String, CategoryCell>> = BTreeMap::new();
    for preset in presets {
        let name = preset.name();
        let ok: Vec<&CellMetrics> = cells
            .iter()
            .filter(|c| c.preset == name && c.k == default_k)
            .filter_map(|c| c.outcome.as_ref().ok())
            .collect();
        if ok.is_empty() {
            continue;
        }
        let mut tags: BTreeSet<&String> = BTreeSet::new();
        for m in &ok {
            tags.extend(m.by_category.keys());
        }
        let mut per_tag = BTreeMap::new();
        for tag in tags {
            let f1s: Vec<f64> = ok
                .iter()
                .filter_map(|m| m.by_category.get(tag).map(|c| c.f1))
                .collect();
            let corrects: Vec<f64> = ok
                .iter()
                .filter_map(|m| m.by_category.get(tag).map(|c| c.correct() as f64))
                .collect();
            let support = ok
                .iter()
                .filter_map(|m| m.by_category.get(tag).map(|c| c.support))
                .next()
                .unwrap_or(0);
            per_tag.insert(
                tag.clone(),
                CategoryCell {
                    f1: mean_std(&f1s),
                    correct: mean_std(&corrects),
                    support,
                    share_pct: 100.0 * shares.get(tag).copied().unwrap_or(0) as f64
                        / total_queries as f64,
                },
            );
        }
        breakdown.insert(name, per_tag);
    }

    let (venn_raw, venn_filtered, bleu_pairs) = diversity.unwrap_or((None, None, Vec::new()));
    Ok(ExperimentReport {
        seeds: seeds.to_vec(),
        ks: config.ks.clone(),
        rows,
        cells,
        breakdown,
        venn_raw,
        venn_filtered,
        bleu_pairs,
        config_digest: config.config_digest(),
        averaging: "micro",
    })
}

#[allow(clippy::too_many_arguments)]
fn run_cell<R: Real>(
    config: &PipelineConfig,
    data: &PipelineData,
    artifacts: &BTreeMap<String, TrainedSpec<R>>,
    test: &QaDataset,
    categories: &BTreeMap<String, String>,
    preset: &Preset,
    k: usize,
    seed: u64,
) -> Result<CellMetrics> {
    let run = run_augmentation(config, data, artifacts, preset, k, seed)?;
    let final_spec = &config.final_spec;
    let trained = artifacts
        .get(final_spec)
        .ok_or_else(|| Error::Config(format!("no artifacts for final spec {final_spec:?}")))?;
    let class_weight = config
        .final_model
        .class_weight
        .unwrap_or_else(|| auto_class_weight(&run.t));
    let hyper = config
        .final_model
        .hyper(class_weight, derive_seed(seed, "train-final", final_spec));
    // The final model, like the oracle, classifies over the spec's
    // fixed lexical representation; the trained bi-encoders only
    // decide what gets retrieved into T.
    let clf = train_pair_classifier(
        &run.t,
        &trained.oracle_encoder,
        &hyper,
        config.final_model.threshold,
    )?;
    let preds = predict_positives(&clf, test, &trained.oracle_encoder)?;
    let metrics = evaluate(&preds, test)?;
    let by_category = evaluate_by_category(&preds, test, categories)?;
    Ok(CellMetrics {
        metrics,
        by_category,
        manifest_digest: run.manifest.digest(),
        t_pairs: run.t.len(),
        d_aug: run.d_aug.len(),
    })
}

type Diversity = (
    Option<VennReport>,
    Option<VennReport>,
    Vec<(String, String, f64)>,
);

// Venn regions and pairwise BLEU over the configured specs' raw and
// own-oracle-filtered retrievals, at the default depth.
fn compute_diversity<R: Real>(
    config: &PipelineConfig,
    data: &PipelineData,
    artifacts: &BTreeMap<String, TrainedSpec<R>>,
) -> Result<Diversity> {
    let spec_ids: Vec<String> = config
        .spec_ids()
        .into_iter()
        .filter(|id| artifacts.contains_key(id))
        .collect();
    if spec_ids.len() < 2 {
        return Ok((None, None, Vec::new()));
    }
    let k = config.ks[0];
    let mut raw_sets = Vec::new();
    let mut filtered_sets = Vec::new();
    let mut texts = BTreeMap::new();
    for spec_id in &spec_ids {
        let trained = &artifacts[spec_id];
        let raw = crate::index::retrieve_all(&trained.index, &data.gold, &trained.encoder, k)?;
        let filtered = filter_retrievals(
            &raw,
            &trained.oracle,
            &trained.oracle_encoder,
            &data.gold,
            &data.corpus,
        )?;
        texts.insert(spec_id.clone(), retrieved_texts(&raw, &data.corpus)?);
        raw_sets.push(raw);
        filtered_sets.push(filtered);
    }
    let raw_refs: Vec<&crate::index::RetrievalSet> = raw_sets.iter().collect();
    let filtered_refs: Vec<&crate::index::RetrievalSet> = filtered_sets.iter().collect();
    let venn_raw = overlap_stats(&raw_refs)?;
    let venn_filtered = overlap_stats(&filtered_refs)?;
    let mut bleu_pairs = Vec::new();
    for a in &spec_ids {
        for b in &spec_ids {
            if a != b {
                let bleu = corpus_bleu(&texts[a], &texts[b])?;
                bleu_pairs.push((a.clone(), b.clone(), bleu));
            }
        }
    }
    Ok((Some(venn_raw), Some(venn_filtered), bleu_pairs))
}

impl ExperimentReport {
    /// Aligned text table: one row per preset x depth, then the
    /// category breakdown and diversity sections.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str("experiment report\n");
        out.push_str(&format!("config_digest={}\n", self.config_digest));
        out.push_str(&format!(
            "metrics={} bleu={} segmenter={}\n",
            self.averaging, BLEU_CONFIG, SEGMENTER
        ));
        out.push_str(&format!(
            "seeds={}\n\n",
            self.seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(",")
        ));

        out.push_str(&format!(
            "{:<28} {:>4} {:>6} {:>15} {:>15} {:>15}\n",
            "preset", "k", "oracle", "precision", "recall", "f1"
        ));
        for row in &self.rows {
            let fmt = |m: &MeanStd| format!("{:.3}+-{:.3}", m.mean, m.std);
            out.push_str(&format!(
                "{:<28} {:>4} {:>6} {:>15} {:>15} {:>15}",
                row.preset,
                row.k,
                if row.filtered { "yes" } else { "no" },
                fmt(&row.precision),
                fmt(&row.recall),
                fmt(&row.f1)
            ));
            if row.failures > 0 {
                out.push_str(&format!(
                    "  [{} of {} cells failed]",
                    row.failures, row.cells
                ));
            }
            out.push('\n');
        }

        if !self.breakdown.is_empty() {
            out.push_str(&format!(
                "\ncategory breakdown at k={} (mean F1, mean correct predictions)\n",
                self.ks[0]
            ));
            for (preset, per_tag) in &self.breakdown {
                out.push_str(&format!("  preset {preset}\n"));
                out.push_str(&format!(
                    "    {:<20} {:>6} {:>9} {:>9} {:>9}\n",
                    "category", "share", "support", "f1", "correct"
                ));
                for (tag, cell) in per_tag {
                    out.push_str(&format!(
                        "    {:<20} {:>5.1}% {:>9} {:>9.3} {:>9.1}\n",
                        tag, cell.share_pct, cell.support, cell.f1.mean, cell.correct.mean
                    ));
                }
            }
        }

        if let Some(venn) = &self.venn_raw {
            out.push_str("\nretrieval overlap (raw)\n");
            out.push_str(&venn.render());
        }
        if let Some(venn) = &self.venn_filtered {
            out.push_str("\nretrieval overlap (filtered)\n");
            out.push_str(&venn.render());
        }
        if !self.bleu_pairs.is_empty() {
            out.push_str("\npairwise BLEU of raw retrieved corpora\n");
            for (a, b, bleu) in &self.bleu_pairs {
                out.push_str(&format!("  {a} vs {b}: {bleu:.4}\n"));
            }
        }
        out.push_str(
            "\nnote: human-agreement reference rows are out of scope for this artifact.\n",
        );
        out
    }

    /// CSV with one row per preset x depth.
    pub fn render_csv(&self) -> String {
        let mut out = String::from(
            "preset,k,oracle,precision_mean,precision_std,recall_mean,recall_std,f1_mean,f1_std,failures\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                row.preset,
                row.k,
                row.filtered,
                row.precision.mean,
                row.precision.std,
                row.recall.mean,
                row.recall.std,
                row.f1.mean,
                row.f1.std,
                row.failures
            ));
        }
        out
    }

    /// CSV of the per-category breakdown at the default depth.
    pub fn render_breakdown_csv(&self) -> String {
        let mut out =
            String::from("preset,category,share_pct,support,f1_mean,f1_std,correct_mean\n");
        for (preset, per_tag) in &self.breakdown {
            for (tag, cell) in per_tag {
                out.push_str(&format!(
                    "{},{},{:.2},{},{:.6},{:.6},{:.2}\n",
                    preset, tag, cell.share_pct, cell.support, cell.f1.mean, cell.f1.std,
                    cell.correct.mean
                ));
            }
        }
        out
    }

    pub fn row(&self, preset: &str, k: usize) -> Option<&PresetRow> {
        self.rows.iter().find(|r| r.preset == preset && r.k == k)
    }
}
