//! Pipeline configuration: a flat key-value text file describing data
//! paths, encoder specs, hyperparameters and experiment presets.
//!
//! One global seed drives everything; per-stage seeds are derived by
//! stable hashing of (seed, stage, spec_id), so stages never share an
//! RNG stream and a single knob reproduces a whole run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::classifier::ClassifierHyper;
use crate::encoder::{EncoderKind, EncoderSpec, RetrieverHyper};
use crate::error::{Error, Result};
use crate::hash::derive_seed;

/// Declared encoder spec plus optional per-spec overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecConfig {
    pub spec: EncoderSpec,
    /// Embedding file for `precomputed` specs.
    pub embeddings: Option<PathBuf>,
    /// Per-spec retriever hyper overrides (None = global values).
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
}

/// Oracle / final-model hyperparameters as configured. `class_weight`
/// of `None` means "auto": the negative/positive count ratio of the
/// training set the model is fit on.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub threshold: f64,
    pub class_weight: Option<f64>,
}

impl ClassifierConfig {
    pub fn hyper(&self, class_weight: f64, seed: u64) -> ClassifierHyper {
        ClassifierHyper {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            l2: self.l2,
            class_weight,
            seed,
        }
    }
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            learning_rate: 2.0,
            epochs: 200,
            l2: 1e-4,
            threshold: 0.5,
            class_weight: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub qa_train: PathBuf,
    pub qa_test: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub k: usize,
    /// Retrieval depths the experiment command sweeps over.
    pub ks: Vec<usize>,
    pub specs: Vec<SpecConfig>,
    /// Subset of spec ids the `era-d` preset aggregates.
    pub domain_specs: Vec<String>,
    /// Spec whose encoder backs the final QA model.
    pub final_spec: String,
    pub presets: Vec<String>,
    pub retriever: RetrieverDefaults,
    pub oracle: ClassifierConfig,
    pub final_model: ClassifierConfig,
    /// Raw config text, for digesting into manifests.
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverDefaults {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for RetrieverDefaults {
    fn default() -> Self {
        RetrieverDefaults {
            batch_size: 8,
            learning_rate: 0.5,
            epochs: 30,
        }
    }
}

impl PipelineConfig {
    pub fn spec(&self, spec_id: &str) -> Result<&SpecConfig> {
        self.specs
            .iter()
            .find(|s| s.spec.spec_id == spec_id)
            .ok_or_else(|| Error::Config(format!("unknown spec id {spec_id:?}")))
    }

    pub fn spec_ids(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.spec.spec_id.clone()).collect()
    }

    /// Retriever hyper for a spec under a given global seed.
    pub fn retriever_hyper(&self, spec_id: &str, global_seed: u64) -> Result<RetrieverHyper> {
        let sc = self.spec(spec_id)?;
        Ok(RetrieverHyper {
            batch_size: sc.batch_size.unwrap_or(self.retriever.batch_size),
            learning_rate: sc.learning_rate.unwrap_or(self.retriever.learning_rate),
            epochs: sc.epochs.unwrap_or(self.retriever.epochs),
            seed: derive_seed(global_seed, "train-retriever", spec_id),
        })
    }

    pub fn config_digest(&self) -> String {
        crate::hash::sha256_hex(self.raw.as_bytes())
    }
}

fn parse_kv(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i + 1, "expected `key = value`"))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::parse(path, i + 1, format!("duplicate key {key:?}")));
        }
    }
    Ok(map)
}

struct KvReader<'a> {
    map: BTreeMap<String, String>,
    base: &'a Path,
}

impl<'a> KvReader<'a> {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn required(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    fn path(&mut self, key: &str) -> Result<PathBuf> {
        let v = self.required(key)?;
        Ok(self.resolve(&v))
    }

    fn resolve(&self, value: &str) -> PathBuf {
        let p = PathBuf::from(value);
        if p.is_absolute() {
            p
        } else {
            self.base.join(p)
        }
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<T>()
                .map_err(|_| Error::Config(format!("key {key:?} has unparsable value {v:?}"))),
        }
    }

    fn parsed_req<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.required(key)?;
        v.parse::<T>()
            .map_err(|_| Error::Config(format!("key {key:?} has unparsable value {v:?}")))
    }

    fn parsed_opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("key {key:?} has unparsable value {v:?}"))),
        }
    }

    fn list(&mut self, key: &str) -> Vec<String> {
        self.take(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Load and validate a pipeline configuration file.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let map = parse_kv(&raw, path)?;
    let mut r = KvReader { map, base };

    let corpus = r.path("corpus")?;
    let qa_train = r.path("qa_train")?;
    let qa_test = r.take("qa_test").map(|v| r.resolve(&v));
    let out_dir = r
        .take("out_dir")
        .map(|v| r.resolve(&v))
        .unwrap_or_else(|| base.join("out"));
    let seed: u64 = r.parsed("seed", 42)?;
    let k: usize = r.parsed("k", 10)?;
    let ks: Vec<usize> = {
        let listed = r.list("ks");
        if listed.is_empty() {
            vec![k]
        } else {
            let mut out = Vec::with_capacity(listed.len());
            for v in listed {
                out.push(
                    v.parse::<usize>()
                        .map_err(|_| Error::Config(format!("ks entry {v:?} is not an integer")))?,
                );
            }
            out
        }
    };

    let spec_ids = r.list("specs");
    if spec_ids.is_empty() {
        return Err(Error::Config(
            "key \"specs\" must list at least one spec".into(),
        ));
    }
    {
        let mut seen = std::collections::BTreeSet::new();
        for id in &spec_ids {
            if !seen.insert(id) {
                return Err(Error::Config(format!("duplicate spec id {id:?}")));
            }
        }
    }
    let mut specs = Vec::with_capacity(spec_ids.len());
    for id in &spec_ids {
        let kind = match r.take(&format!("spec.{id}.kind")).as_deref() {
            None | Some("reference_trainable") => EncoderKind::ReferenceTrainable,
            Some("precomputed") => EncoderKind::Precomputed,
            Some(other) => {
                return Err(Error::Config(format!(
                    "spec.{id}.kind has unknown value {other:?}"
                )))
            }
        };
        let spec = EncoderSpec {
            spec_id: id.clone(),
            dim: r.parsed_req(&format!("spec.{id}.dim"))?,
            feature_dim: r.parsed_req(&format!("spec.{id}.feature_dim"))?,
            seed: r.parsed_req(&format!("spec.{id}.seed"))?,
            kind,
        };
        spec.validate()?;
        let embeddings = r.take(&format!("spec.{id}.embeddings")).map(|v| r.resolve(&v));
        if kind == EncoderKind::Precomputed && embeddings.is_none() {
            return Err(Error::Config(format!(
                "precomputed spec {id} requires spec.{id}.embeddings"
            )));
        }
        specs.push(SpecConfig {
            spec,
            embeddings,
            batch_size: r.parsed_opt(&format!("spec.{id}.batch_size"))?,
            learning_rate: r.parsed_opt(&format!("spec.{id}.learning_rate"))?,
            epochs: r.parsed_opt(&format!("spec.{id}.epochs"))?,
        });
    }

    let domain_specs = r.list("domain_specs");
    for id in &domain_specs {
        if !spec_ids.contains(id) {
            return Err(Error::Config(format!(
                "domain_specs entry {id:?} is not a declared spec"
            )));
        }
    }
    let final_spec = r
        .take("final_spec")
        .unwrap_or_else(|| spec_ids.last().unwrap().clone());
    if !spec_ids.contains(&final_spec) {
        return Err(Error::Config(format!(
            "final_spec {final_spec:?} is not a declared spec"
        )));
    }

    let presets = r.list("presets");

    let retriever = RetrieverDefaults {
        batch_size: r.parsed("retriever.batch_size", RetrieverDefaults::default().batch_size)?,
        learning_rate: r.parsed(
            "retriever.learning_rate",
            RetrieverDefaults::default().learning_rate,
        )?,
        epochs: r.parsed("retriever.epochs", RetrieverDefaults::default().epochs)?,
    };
    let classifier_section = |r: &mut KvReader, prefix: &str| -> Result<ClassifierConfig> {
        let d = ClassifierConfig::default();
        let class_weight = match r.take(&format!("{prefix}.class_weight")).as_deref() {
            None | Some("auto") => None,
            Some(v) => Some(v.parse::<f64>().map_err(|_| {
                Error::Config(format!("{prefix}.class_weight has unparsable value {v:?}"))
            })?),
        };
        Ok(ClassifierConfig {
            learning_rate: r.parsed(&format!("{prefix}.learning_rate"), d.learning_rate)?,
            epochs: r.parsed(&format!("{prefix}.epochs"), d.epochs)?,
            l2: r.parsed(&format!("{prefix}.l2"), d.l2)?,
            threshold: r.parsed(&format!("{prefix}.tau"), d.threshold)?,
            class_weight,
        })
    };
    let oracle = classifier_section(&mut r, "oracle")?;
    let final_model = classifier_section(&mut r, "final")?;

    if let Some(unknown) = r.map.keys().next() {
        return Err(Error::Config(format!("unknown config key {unknown:?}")));
    }

    let config = PipelineConfig {
        corpus,
        qa_train,
        qa_test,
        out_dir,
        seed,
        k,
        ks,
        specs,
        domain_specs,
        final_spec,
        presets,
        retriever,
        oracle,
        final_model,
        raw,
    };
    validate_config(&config)?;
    Ok(config)
}

fn validate_config(config: &PipelineConfig) -> Result<()> {
    if config.k < 1 {
        return Err(Error::InvalidArg("k must be >= 1".into()));
    }
    for k in &config.ks {
        if *k < 1 {
            return Err(Error::InvalidArg("ks entries must be >= 1".into()));
        }
    }
    for (name, path) in [("corpus", &config.corpus), ("qa_train", &config.qa_train)] {
        if !path.exists() {
            return Err(Error::Config(format!(
                "{name} path {} does not exist",
                path.display()
            )));
        }
    }
    if let Some(test) = &config.qa_test {
        if !test.exists() {
            return Err(Error::Config(format!(
                "qa_test path {} does not exist",
                test.display()
            )));
        }
    }
    for sc in &config.specs {
        if let Some(emb) = &sc.embeddings {
            if !emb.exists() {
                return Err(Error::Config(format!(
                    "embeddings path {} does not exist",
                    emb.display()
                )));
            }
        }
    }
    if config.oracle.threshold <= 0.0 || config.oracle.threshold >= 1.0 {
        return Err(Error::Config("oracle.tau must lie in (0, 1)".into()));
    }
    if config.final_model.threshold <= 0.0 || config.final_model.threshold >= 1.0 {
        return Err(Error::Config("final.tau must lie in (0, 1)".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_minimal(dir: &Path) -> PathBuf {
        std::fs::write(dir.join("corpus.l"), "").unwrap();
        std::fs::write(dir.join("train.l"), "").unwrap();
        let cfg = "\
# comment line
corpus = corpus.l
qa_train = train.l
seed = 7
k = 10
specs = alpha, beta
spec.alpha.dim = 8
spec.alpha.feature_dim = 64
spec.alpha.seed = 1
spec.beta.dim = 8
spec.beta.feature_dim = 64
spec.beta.seed = 2
domain_specs = beta
final_spec = beta
oracle.tau = 0.5
";
        let path = dir.join("run.cfg");
        std::fs::write(&path, cfg).unwrap();
        path
    }

    #[test]
    fn loads_a_minimal_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_minimal(dir.path());
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.k, 10);
        assert_eq!(cfg.ks, vec![10]);
        assert_eq!(cfg.spec_ids(), vec!["alpha", "beta"]);
        assert_eq!(cfg.final_spec, "beta");
        assert_eq!(cfg.oracle.threshold, 0.5);
        assert!(cfg.oracle.class_weight.is_none());
    }

    #[test]
    fn missing_path_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_minimal(dir.path());
        std::fs::remove_file(dir.path().join("corpus.l")).unwrap();
        let err = load_config(&path).unwrap_err();
        assert!(err.to_string().contains("corpus"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_minimal(dir.path());
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("bogus_key = 1\n");
        std::fs::write(&path, text).unwrap();
        let err = load_config(&path).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn duplicate_spec_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("corpus.l"), "").unwrap();
        std::fs::write(dir.path().join("train.l"), "").unwrap();
        let cfg = "\
corpus = corpus.l
qa_train = train.l
specs = a, a
spec.a.dim = 2
spec.a.feature_dim = 8
spec.a.seed = 1
";
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, cfg).unwrap();
        let err = load_config(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate spec id"), "{err}");
    }

    #[test]
    fn per_spec_overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("corpus.l"), "").unwrap();
        std::fs::write(dir.path().join("train.l"), "").unwrap();
        let cfg = "\
corpus = corpus.l
qa_train = train.l
specs = a
spec.a.dim = 2
spec.a.feature_dim = 8
spec.a.seed = 1
spec.a.epochs = 99
retriever.epochs = 5
";
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, cfg).unwrap();
        let config = load_config(&path).unwrap();
        let hyper = config.retriever_hyper("a", 42).unwrap();
        assert_eq!(hyper.epochs, 99);
        assert_eq!(
            hyper.seed,
            crate::hash::derive_seed(42, "train-retriever", "a")
        );
    }
}
