//! `generate` and `export`; `train` and `ablate` live in [`crate::runner`].

use std::fs;
use std::path::{Path, PathBuf};

use popgraph_core::attention::weight_phenotypes_plain;
use popgraph_core::baselines::{static_graph, FeatureSource};
use popgraph_core::dataio::generate_synthetic;
use popgraph_core::graphgen::{gumbel_topk_sample, homophily_score, log_prob_matrix, HomophilyMode};
use popgraph_core::rng::stream;
use popgraph_core::trainer::TrainingData;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::csvio::{write_csv, DatasetMetadata};
use crate::error::{Error, Result};
use crate::export::{write_attention, Checkpoint, GraphFile};

/// RNG stream of the exported learned-graph sample; distinct from the
/// initialization, training and inference streams of a run.
pub const EXPORT_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub csv: PathBuf,
    pub metadata: PathBuf,
    pub meta: DatasetMetadata,
}

/// Writes `dataset.csv` and `metadata.json` for the synthetic block.
pub fn generate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Generated> {
    let synth = cfg
        .dataset
        .synthetic_config()
        .ok_or_else(|| Error::Config("generate needs a synthetic dataset block".into()))?;
    let ds = generate_synthetic(&synth, cfg.dataset.seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let hash = cfg.hash();
    let csv = out_dir.join("dataset.csv");
    let metadata = out_dir.join("metadata.json");
    write_csv(&ds, &csv, Some(&hash))?;
    let meta = DatasetMetadata::of(&ds, Some(&hash));
    meta.write(&metadata)?;
    Ok(Generated { csv, metadata, meta })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportWhat {
    Attention,
    GraphStatic,
    GraphLearned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exported {
    pub files: Vec<PathBuf>,
    /// Regression homophily of an exported graph.
    pub homophily: Option<f64>,
    /// Phenotype count of an attention export.
    pub rows: Option<usize>,
}

/// Re-creates a run's dataset and model from its directory and writes the
/// requested artifact to `out_dir`.
pub fn export(run_dir: &Path, what: ExportWhat, out_dir: &Path) -> Result<Exported> {
    let ck_path = run_dir.join("checkpoint.json");
    if !ck_path.exists() {
        return Err(Error::Config(format!("{} has no checkpoint.json", run_dir.display())));
    }
    let ck = Checkpoint::read(&ck_path)?;
    let cfg = ExperimentConfig::read(&run_dir.join("config.toml"))?;
    let hash = cfg.hash();
    if ck.config_hash != hash {
        return Err(Error::Format(format!(
            "checkpoint config hash {} does not match config.toml ({hash})",
            ck.config_hash
        )));
    }
    let needs_attention = what != ExportWhat::GraphStatic;
    if needs_attention && ck.method != "adaptive" {
        return Err(Error::Config(format!(
            "a '{}' checkpoint has no learned attention",
            ck.method
        )));
    }
    let params = ck.params()?;
    let (ds, _) = cfg.load_dataset()?;
    let data = TrainingData::from_dataset(&ds)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let graph_out = |mut g: GraphFile, stem: &str| -> Result<Exported> {
        let h = homophily_score(&g.edge_pairs(), &data.labels, HomophilyMode::Regression)?;
        g.config_hash = Some(hash.clone());
        g.homophily = Some(h);
        let (json, dot) = (
            out_dir.join(format!("{stem}.json")),
            out_dir.join(format!("{stem}.dot")),
        );
        g.write_json(&json)?;
        g.write_dot(&dot, stem)?;
        Ok(Exported {
            files: vec![json, dot],
            homophily: Some(h),
            rows: None,
        })
    };

    match what {
        ExportWhat::Attention => {
            let att = params.attention_vector(&data)?;
            write_attention(&att, out_dir, Some(&hash))?;
            Ok(Exported {
                files: vec![out_dir.join("attention.csv"), out_dir.join("attention.json")],
                homophily: None,
                rows: Some(att.weights.len()),
            })
        }
        ExportWhat::GraphStatic => {
            let ab = &cfg.ablation;
            let edges = static_graph(&data, FeatureSource::Phenotypes, ab.static_k, ab.static_metric)?;
            graph_out(GraphFile::from_edges(&edges, &data.labels), "graph_static")
        }
        ExportWhat::GraphLearned => {
            let weights = params.attention.attention(&data.phenotypes)?;
            let f = weight_phenotypes_plain(&weights, &data.phenotypes)?;
            let log_p = log_prob_matrix(&f, cfg.train.metric, params.temperature())?;
            let sample = gumbel_topk_sample(&log_p, cfg.train.k, &mut stream(ck.seed, EXPORT_STREAM))?;
            graph_out(GraphFile::from_sample(&sample, &data.labels), "graph_learned")
        }
    }
}
