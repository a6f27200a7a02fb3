//! Experiment manifests.
//!
//! One TOML file describes the dataset, the training hyperparameters, the
//! ablation grid and the seeds. Command-line flags only override `seeds`,
//! `workers` and `out`.

use std::fs;
use std::path::{Path, PathBuf};

use popgraph_core::baselines::DEFAULT_RIDGE;
use popgraph_core::dataio::{
    assign_classes, generate_synthetic, prepare, PopulationDataset, SyntheticConfig, DEFAULT_FRACTIONS,
};
use popgraph_core::gcn::Task;
use popgraph_core::graphgen::DistanceMetric;
use popgraph_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::csvio::{load_csv, CsvSchema, LoadReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Seeds the generator and the train/val/test split. Run seeds only
    /// change initialization and sampling.
    pub seed: u64,
    pub fractions: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSchema>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            fractions: DEFAULT_FRACTIONS,
            synthetic: None,
            csv: None,
        }
    }
}

impl DatasetConfig {
    pub fn synthetic(config: SyntheticConfig, seed: u64) -> Self {
        Self {
            seed,
            synthetic: Some(config),
            ..Self::default()
        }
    }

    /// The generator parameters, if this is (implicitly) a synthetic dataset.
    pub fn synthetic_config(&self) -> Option<SyntheticConfig> {
        match (&self.synthetic, &self.csv) {
            (Some(s), _) => Some(s.clone()),
            (None, None) => Some(SyntheticConfig::default()),
            (None, Some(_)) => None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.synthetic.is_some() && self.csv.is_some() {
            return Err(Error::Config("dataset has both a synthetic and a csv block".into()));
        }
        Ok(())
    }

    /// Raw dataset: generated or read, not yet split or normalized.
    pub fn raw(&self) -> Result<(PopulationDataset, Option<LoadReport>)> {
        self.validate()?;
        match &self.csv {
            Some(schema) => {
                let (ds, report) = load_csv(schema)?;
                Ok((ds, Some(report)))
            }
            None => {
                let cfg = self.synthetic_config().expect("no csv block");
                Ok((generate_synthetic(&cfg, self.seed)?, None))
            }
        }
    }

    /// Split, normalized and (for classification) binned dataset.
    pub fn load(&self, task: Task, n_classes: usize) -> Result<(PopulationDataset, Option<LoadReport>)> {
        let (mut ds, report) = self.raw()?;
        prepare(&mut ds, self.fractions, self.seed)?;
        if task == Task::Classification {
            assign_classes(&mut ds, n_classes)?;
        }
        Ok((ds, report))
    }
}

/// A phenotype subset: the first `non_imaging` / `imaging` columns of each
/// block (`None` keeps the whole block).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhenotypeSubset {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub non_imaging: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imaging: Option<usize>,
}

impl PhenotypeSubset {
    pub fn all() -> Self {
        Self {
            name: "all".into(),
            non_imaging: None,
            imaging: None,
        }
    }
}

/// Graph construction for an adaptive cell; `random` replaces the learned
/// kernel with uniformly random edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphChoice {
    Euclidean,
    Cosine,
    Hyperbolic,
    Random,
}

impl GraphChoice {
    pub fn metric(self) -> Option<DistanceMetric> {
        match self {
            Self::Euclidean => Some(DistanceMetric::Euclidean),
            Self::Cosine => Some(DistanceMetric::Cosine),
            Self::Hyperbolic => Some(DistanceMetric::Hyperbolic),
            Self::Random => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Euclidean => "euclidean",
            Self::Cosine => "cosine",
            Self::Hyperbolic => "hyperbolic",
            Self::Random => "random",
        }
    }
}

impl From<DistanceMetric> for GraphChoice {
    fn from(metric: DistanceMetric) -> Self {
        match metric {
            DistanceMetric::Euclidean => Self::Euclidean,
            DistanceMetric::Cosine => Self::Cosine,
            DistanceMetric::Hyperbolic => Self::Hyperbolic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    StaticPhenotypes,
    StaticNodeFeatures,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub subsets: Vec<PhenotypeSubset>,
    pub graphs: Vec<GraphChoice>,
    pub baselines: Vec<Baseline>,
    /// Neighbours per node in the static kNN baselines.
    pub static_k: usize,
    pub static_metric: DistanceMetric,
    pub ridge: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            subsets: vec![PhenotypeSubset::all()],
            graphs: vec![
                GraphChoice::Euclidean,
                GraphChoice::Cosine,
                GraphChoice::Hyperbolic,
                GraphChoice::Random,
            ],
            baselines: vec![
                Baseline::StaticPhenotypes,
                Baseline::StaticNodeFeatures,
                Baseline::Linear,
            ],
            static_k: 5,
            static_metric: DistanceMetric::Cosine,
            ridge: DEFAULT_RIDGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Parallel runs; `None` uses every core.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    /// `train.seed` is ignored: each run uses its entry of `seeds`.
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            workers: None,
            out: None,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// The part of a config that decides results, i.e. everything except
/// seeds, worker count and output location.
#[derive(Serialize)]
struct Hashed<'a> {
    dataset: &'a DatasetConfig,
    train: TrainConfig,
    ablation: &'a AblationConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML manifest; relative CSV paths are taken from its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::parse(path, msg),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(csv) = &mut cfg.dataset.csv {
            csv.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds is empty".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical JSON (sorted keys, no whitespace) of the result-deciding
    /// fields.
    pub fn canonical_json(&self) -> String {
        let hashed = Hashed {
            dataset: &self.dataset,
            train: TrainConfig {
                seed: 0,
                ..self.train.clone()
            },
            ablation: &self.ablation,
        };
        // serde_json's Map is ordered by key, so this sorts every level
        let value = serde_json::to_value(hashed).expect("config is plain data");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Training config for one run seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn load_dataset(&self) -> Result<(PopulationDataset, Option<LoadReport>)> {
        self.dataset.load(self.train.task, self.train.n_classes)
    }
}
