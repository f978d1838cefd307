//! Experiment manifests: a plain-text `key = value` format with `#`
//! comments and comma-separated lists.
//!
//! ```text
//! # desk-scale semi-supervision grid
//! kind = experiment
//! dataset = synthetic
//! flavors = none, vae, piwo
//! rates = 0.005, 0.1, 1.0
//! alpha_grid = 1, 10
//! seed = 42
//! out = runs/grid
//! ```
//!
//! Environment variables prefixed `PIWO_` override manifest values
//! (`PIWO_SEED`, `PIWO_JOBS`, `PIWO_OUT`, `PIWO_PRESET`), and explicit
//! command-line flags override both.

use std::collections::BTreeMap;
use std::path::PathBuf;

use piwo_core::data::SyntheticSpec;
use piwo_core::objectives::Flavor;
use piwo_core::training::TrainConfig;

/// Environment variable prefix for overrides.
pub const ENV_PREFIX: &str = "PIWO_";

#[derive(Debug)]
pub struct ManifestError {
    pub reason: String,
}

impl std::fmt::Display for ManifestError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "manifest error: {}", self.reason)
    }
}

impl std::error::Error for ManifestError {}

fn err(reason: impl Into<String>) -> ManifestError {
    ManifestError {
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestKind {
    /// Flavor x supervision-rate accuracy grid.
    Experiment,
    /// Exact tabular bound-vs-k sweep.
    BoundSweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self, ManifestError> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(err(format!("unknown preset {other:?} (desk|paper)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum DatasetRef {
    /// Synthetic generator (SYN-A defaults unless overridden).
    Synthetic(SyntheticSpec),
    /// Plain-text corpus files.
    Corpus {
        labeled: PathBuf,
        unlabeled: Option<PathBuf>,
        test: Option<PathBuf>,
        vocab_cap: usize,
        max_len: usize,
    },
    /// A previously written dataset cache.
    Cache(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ExperimentManifest {
    pub kind: ManifestKind,
    pub dataset: DatasetRef,
    pub flavors: Vec<Flavor>,
    pub rates: Vec<f64>,
    pub train: TrainConfig,
    pub preset: Preset,
    pub out: PathBuf,
    pub jobs: usize,
    /// Reuse dropped labeled examples as unlabeled data.
    pub demote_unselected: bool,
    /// Bound sweep: maximum k.
    pub sweep_k_max: usize,
    /// Bound sweep: observation index.
    pub sweep_x: usize,
    /// Bound sweep: fixture path (committed FIX-A when absent).
    pub fixture: Option<PathBuf>,
    /// Optional pretrained embedding matrix for the paper preset.
    pub embeddings: Option<PathBuf>,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        Self {
            kind: ManifestKind::Experiment,
            dataset: DatasetRef::Synthetic(SyntheticSpec::syn_a(0)),
            flavors: vec![Flavor::None, Flavor::Vae],
            rates: vec![1.0],
            train: TrainConfig::default(),
            preset: Preset::Desk,
            out: PathBuf::from("runs/out"),
            jobs: 1,
            demote_unselected: false,
            sweep_k_max: 6,
            sweep_x: 0,
            fixture: None,
            embeddings: None,
        }
    }
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ManifestError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("line {}: expected key = value", i + 1)))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_list<T, E>(value: &str, f: impl Fn(&str) -> Result<T, E>) -> Result<Vec<T>, ManifestError>
where
    E: std::fmt::Debug,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).map_err(|e| err(format!("bad list entry {s:?}: {e:?}"))))
        .collect()
}

impl ExperimentManifest {
    /// Parse manifest text, then apply `PIWO_*` environment overrides.
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut kv = parse_kv(text)?;
        for key in ["SEED", "JOBS", "OUT", "PRESET"] {
            if let Ok(v) = std::env::var(format!("{ENV_PREFIX}{key}")) {
                kv.insert(key.to_lowercase(), v);
            }
        }
        Self::from_kv(kv)
    }

    fn from_kv(kv: BTreeMap<String, String>) -> Result<Self, ManifestError> {
        let mut m = ExperimentManifest::default();
        let mut syn = SyntheticSpec::syn_a(0);
        let mut corpus_labeled: Option<PathBuf> = None;
        let mut corpus_unlabeled: Option<PathBuf> = None;
        let mut corpus_test: Option<PathBuf> = None;
        let mut vocab_cap = 10_000usize;
        let mut max_len = 64usize;
        let mut dataset_kind = String::from("synthetic");

        for (key, value) in &kv {
            let v = value.as_str();
            match key.as_str() {
                "kind" => {
                    m.kind = match v {
                        "experiment" => ManifestKind::Experiment,
                        "bound-sweep" => ManifestKind::BoundSweep,
                        other => return Err(err(format!("unknown kind {other:?}"))),
                    }
                }
                "dataset" => dataset_kind = v.to_string(),
                "flavors" => {
                    m.flavors = parse_list(v, |s| {
                        Flavor::parse(s).ok_or_else(|| format!("unknown flavor {s:?}"))
                    })?;
                }
                "rates" => m.rates = parse_list(v, str::parse::<f64>)?,
                "alpha_grid" => m.train.alpha_grid = parse_list(v, str::parse::<f64>)?,
                "seed" => m.train.seed = v.parse().map_err(|_| err("bad seed"))?,
                "jobs" => m.jobs = v.parse().map_err(|_| err("bad jobs"))?,
                "out" => m.out = PathBuf::from(v),
                "preset" => m.preset = Preset::parse(v)?,
                "batch_size" => m.train.batch_size = v.parse().map_err(|_| err("bad batch_size"))?,
                "learning_rate" => {
                    m.train.learning_rate = v.parse().map_err(|_| err("bad learning_rate"))?
                }
                "anneal_steps" => {
                    m.train.anneal_steps = v.parse().map_err(|_| err("bad anneal_steps"))?
                }
                "patience" => m.train.patience = v.parse().map_err(|_| err("bad patience"))?,
                "k" => m.train.k = v.parse().map_err(|_| err("bad k"))?,
                "max_epochs" => m.train.max_epochs = v.parse().map_err(|_| err("bad max_epochs"))?,
                "labeled_reused_unlabeled" => {
                    m.train.labeled_reused_unlabeled =
                        v.parse().map_err(|_| err("bad labeled_reused_unlabeled"))?
                }
                "demote_unselected" => {
                    m.demote_unselected = v.parse().map_err(|_| err("bad demote_unselected"))?
                }
                "labeled" => corpus_labeled = Some(PathBuf::from(v)),
                "unlabeled" => corpus_unlabeled = Some(PathBuf::from(v)),
                "test" => corpus_test = Some(PathBuf::from(v)),
                "vocab_cap" => vocab_cap = v.parse().map_err(|_| err("bad vocab_cap"))?,
                "max_len" => max_len = v.parse().map_err(|_| err("bad max_len"))?,
                "syn_classes" => syn.n_classes = v.parse().map_err(|_| err("bad syn_classes"))?,
                "syn_vocab" => syn.vocab_tokens = v.parse().map_err(|_| err("bad syn_vocab"))?,
                "syn_len_min" => syn.len_min = v.parse().map_err(|_| err("bad syn_len_min"))?,
                "syn_len_max" => syn.len_max = v.parse().map_err(|_| err("bad syn_len_max"))?,
                "syn_separation" => {
                    syn.separation = v.parse().map_err(|_| err("bad syn_separation"))?
                }
                "syn_label_noise" => {
                    syn.label_noise = v.parse().map_err(|_| err("bad syn_label_noise"))?
                }
                "syn_labeled" => syn.n_labeled = v.parse().map_err(|_| err("bad syn_labeled"))?,
                "syn_unlabeled" => {
                    syn.n_unlabeled = v.parse().map_err(|_| err("bad syn_unlabeled"))?
                }
                "syn_test" => syn.n_test = v.parse().map_err(|_| err("bad syn_test"))?,
                "syn_seed" => syn.seed = v.parse().map_err(|_| err("bad syn_seed"))?,
                "sweep_k_max" => m.sweep_k_max = v.parse().map_err(|_| err("bad sweep_k_max"))?,
                "sweep_x" => m.sweep_x = v.parse().map_err(|_| err("bad sweep_x"))?,
                "fixture" => m.fixture = Some(PathBuf::from(v)),
                "embeddings" => m.embeddings = Some(PathBuf::from(v)),
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }

        m.dataset = match dataset_kind.as_str() {
            "synthetic" | "syn-a" => DatasetRef::Synthetic(syn),
            "corpus" => DatasetRef::Corpus {
                labeled: corpus_labeled
                    .ok_or_else(|| err("dataset = corpus requires labeled = <path>"))?,
                unlabeled: corpus_unlabeled,
                test: corpus_test,
                vocab_cap,
                max_len,
            },
            other if other.ends_with(".cache") => DatasetRef::Cache(PathBuf::from(other)),
            other => return Err(err(format!("unknown dataset {other:?}"))),
        };

        if m.flavors.is_empty() {
            return Err(err("flavors must be non-empty"));
        }
        for &r in &m.rates {
            if !(r > 0.0 && r <= 1.0) {
                return Err(err(format!("rate {r} outside (0, 1]")));
            }
        }
        if m.train.alpha_grid.is_empty() {
            return Err(err("alpha_grid must be non-empty"));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_manifest() {
        let text = "
# comment line
kind = experiment
dataset = synthetic
flavors = none, vae, piwo    # trailing comment
rates = 0.005, 0.1, 1.0
alpha_grid = 1, 10
seed = 42
batch_size = 16
k = 5
out = runs/demo
syn_labeled = 500
";
        let m = ExperimentManifest::parse(text).unwrap();
        assert_eq!(m.kind, ManifestKind::Experiment);
        assert_eq!(m.flavors, vec![Flavor::None, Flavor::Vae, Flavor::Piwo]);
        assert_eq!(m.rates, vec![0.005, 0.1, 1.0]);
        assert_eq!(m.train.alpha_grid, vec![1.0, 10.0]);
        assert_eq!(m.train.seed, 42);
        assert_eq!(m.train.batch_size, 16);
        assert_eq!(m.out, PathBuf::from("runs/demo"));
        match m.dataset {
            DatasetRef::Synthetic(s) => assert_eq!(s.n_labeled, 500),
            other => panic!("wrong dataset ref {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentManifest::parse("zzz = 1").is_err());
        assert!(ExperimentManifest::parse("rates = 0").is_err());
        assert!(ExperimentManifest::parse("rates = 2.0").is_err());
        assert!(ExperimentManifest::parse("flavors = sparkle").is_err());
        assert!(ExperimentManifest::parse("no equals sign here").is_err());
        assert!(ExperimentManifest::parse("kind = magic").is_err());
    }

    #[test]
    fn corpus_dataset_requires_labeled_path() {
        assert!(ExperimentManifest::parse("dataset = corpus").is_err());
        let m =
            ExperimentManifest::parse("dataset = corpus\nlabeled = train.tsv\nmax_len = 32")
                .unwrap();
        match m.dataset {
            DatasetRef::Corpus {
                labeled, max_len, ..
            } => {
                assert_eq!(labeled, PathBuf::from("train.tsv"));
                assert_eq!(max_len, 32);
            }
            other => panic!("wrong dataset ref {other:?}"),
        }
    }

    #[test]
    fn env_overrides_apply() {
        std::env::set_var("PIWO_SEED", "777");
        let m = ExperimentManifest::parse("seed = 1").unwrap();
        std::env::remove_var("PIWO_SEED");
        assert_eq!(m.train.seed, 777);
    }
}
