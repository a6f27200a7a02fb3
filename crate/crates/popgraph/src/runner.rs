//! Multi-seed runs and ablation grids.
//!
//! Every job owns its inputs and RNG streams, so jobs run in any order on
//! any number of threads and still produce the same files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use popgraph_core::baselines::{linear_experiment, static_gcn_experiment, FeatureSource};
use popgraph_core::dataio::PopulationDataset;
use popgraph_core::trainer::{run_experiment, GraphSource, MetricsRecord, RunResult, TrainingData};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Baseline, ExperimentConfig, GraphChoice, PhenotypeSubset};
use crate::error::{Error, Result};
use crate::export::{write_attention, write_history, write_json, Checkpoint, GraphFile};

/// One method of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Adaptive(GraphChoice),
    Baseline(Baseline),
}

impl Method {
    pub fn label(self) -> String {
        match self {
            Method::Adaptive(GraphChoice::Random) => "random".into(),
            Method::Adaptive(g) => format!("adaptive_{}", g.name()),
            Method::Baseline(Baseline::StaticPhenotypes) => "static_phenotypes".into(),
            Method::Baseline(Baseline::StaticNodeFeatures) => "static_node_features".into(),
            Method::Baseline(Baseline::Linear) => "linear".into(),
        }
    }
}

/// Record plus, for GCN methods, the trained run.
pub struct JobOutput {
    pub record: MetricsRecord,
    pub run: Option<RunResult>,
    pub seconds: f64,
}

/// Trains and evaluates one method for one seed.
pub fn run_method(data: &TrainingData, method: Method, cfg: &ExperimentConfig, seed: u64) -> Result<JobOutput> {
    let start = Instant::now();
    let mut train = cfg.train_config(seed);
    let ab = &cfg.ablation;
    let (mut record, run) = match method {
        Method::Adaptive(GraphChoice::Random) => {
            let run = run_experiment(data, &GraphSource::Random, &train)?;
            (run.record.clone(), Some(run))
        }
        Method::Adaptive(g) => {
            train.metric = g.metric().expect("not random");
            let run = run_experiment(data, &GraphSource::Adaptive, &train)?;
            (run.record.clone(), Some(run))
        }
        Method::Baseline(Baseline::Linear) => (linear_experiment(data, &train, ab.ridge)?.1, None),
        Method::Baseline(b) => {
            let source = match b {
                Baseline::StaticPhenotypes => FeatureSource::Phenotypes,
                _ => FeatureSource::NodeFeatures,
            };
            let run = static_gcn_experiment(data, source, ab.static_k, ab.static_metric, &train)?;
            (run.record.clone(), Some(run))
        }
    };
    record.config_hash = Some(cfg.hash());
    Ok(JobOutput {
        record,
        run,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs `f` over `jobs` on `workers` threads, keeping job order.
pub fn parallel_map<J, T, F>(jobs: &[J], workers: Option<usize>, f: F) -> Result<Vec<T>>
where
    J: Sync,
    T: Send,
    F: Fn(&J) -> T + Sync + Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(|| jobs.par_iter().map(&f).collect()))
}

/// Mean, sample standard deviation and median.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// `n - 1` denominator; 0 for a single value.
    pub std: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Some(Self { n, mean, std, median })
    }
}

/// Per-metric summaries over a group of runs; a metric missing from some
/// runs is summarized over the runs that have it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummaries {
    pub mae: Option<Summary>,
    pub r: Option<Summary>,
    pub accuracy: Option<Summary>,
    pub macro_auc: Option<Summary>,
    pub macro_f1: Option<Summary>,
    pub homophily: Option<Summary>,
    pub attention_precision: Option<Summary>,
}

impl MetricSummaries {
    pub fn of(records: &[&MetricsRecord]) -> Self {
        let pick = |f: fn(&MetricsRecord) -> Option<f64>| {
            Summary::of(&records.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
        };
        Self {
            mae: pick(|r| r.mae),
            r: pick(|r| r.r),
            accuracy: pick(|r| r.accuracy),
            macro_auc: pick(|r| r.macro_auc),
            macro_f1: pick(|r| r.macro_f1),
            homophily: pick(|r| r.homophily),
            attention_precision: pick(|r| r.attention_precision),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub subset: String,
    pub method: String,
    pub seed: u64,
    pub error: String,
}

/// A run record without its epoch history, for aggregate files.
fn compact(record: &MetricsRecord) -> MetricsRecord {
    MetricsRecord {
        history: Vec::new(),
        ..record.clone()
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_timing(path: &Path, seconds: f64) -> Result<()> {
    write_json(&serde_json::json!({ "seconds": seconds }), path)
}

fn prepared(subset: &PhenotypeSubset, base: &PopulationDataset) -> Result<TrainingData> {
    let ds = if subset.non_imaging.is_none() && subset.imaging.is_none() {
        base.clone()
    } else {
        base.select_phenotypes(subset.non_imaging, subset.imaging)?
    };
    Ok(TrainingData::from_dataset(&ds)?)
}

/// Aggregate file of `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainAggregate {
    pub config_hash: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<MetricsRecord>,
    pub summary: MetricSummaries,
    pub failures: Vec<Failure>,
}

/// Writes one seed's run directory.
pub fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, out: &JobOutput) -> Result<()> {
    create_dir(dir)?;
    let hash = cfg.hash();
    let seed = out.record.seed;
    fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(dir.join("config.toml"), e))?;
    write_json(&out.record, &dir.join("metrics.json"))?;
    write_timing(&dir.join("timing.json"), out.seconds)?;
    if let Some(run) = &out.run {
        write_history(&run.outcome.history, &dir.join("history.csv"), Some(&hash))?;
        Checkpoint::new(&run.outcome.params, &hash, seed, &out.record.method).write(&dir.join("checkpoint.json"))?;
        if let Some(att) = &run.attention {
            write_attention(att, dir, Some(&hash))?;
        }
    }
    Ok(())
}

/// The `train` command: the adaptive model under every seed. Partial results
/// are written even when some seeds fail.
pub fn train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainAggregate> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let (ds, _) = cfg.load_dataset()?;
    let data = TrainingData::from_dataset(&ds)?;
    let method = Method::Adaptive(GraphChoice::from(cfg.train.metric));
    let results = parallel_map(&cfg.seeds, cfg.workers, |&seed| run_method(&data, method, cfg, seed))?;
    let hash = cfg.hash();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (&seed, res) in cfg.seeds.iter().zip(results) {
        match res {
            Ok(job) => {
                let dir = out_dir.join(format!("seed-{seed}"));
                write_run_dir(&dir, cfg, &job)?;
                if let Some(run) = &job.run {
                    let mut g = GraphFile::from_edges(&run.evaluation.inference.graph, &data.labels);
                    g.config_hash = Some(hash.clone());
                    g.homophily = run.evaluation.homophily;
                    g.write_json(&dir.join("graph_inference.json"))?;
                    g.write_dot(&dir.join("graph_inference.dot"), "inference")?;
                }
                runs.push(compact(&job.record));
            }
            Err(e) => failures.push(Failure {
                subset: "all".into(),
                method: method.label(),
                seed,
                error: e.to_string(),
            }),
        }
    }
    let summary = MetricSummaries::of(&runs.iter().collect::<Vec<_>>());
    let agg = TrainAggregate {
        config_hash: hash,
        method: method.label(),
        seeds: cfg.seeds.clone(),
        runs,
        summary,
        failures,
    };
    write_json(&agg, &out_dir.join("aggregate.json"))?;
    Ok(agg)
}

/// One aggregated row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub subset: String,
    pub method: String,
    pub runs: usize,
    pub failed: usize,
    pub summary: MetricSummaries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub subset: String,
    pub method: String,
    pub record: MetricsRecord,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl AblationReport {
    /// One line per run.
    pub fn runs_csv(&self) -> String {
        let mut out = format!("# config_hash={}\n", self.config_hash);
        out.push_str("subset,method,seed,mae,r,accuracy,macro_auc,macro_f1,homophily,attention_precision\n");
        for run in &self.runs {
            let r = &run.record;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                run.subset,
                run.method,
                r.seed,
                opt(r.mae),
                opt(r.r),
                opt(r.accuracy),
                opt(r.macro_auc),
                opt(r.macro_f1),
                opt(r.homophily),
                opt(r.attention_precision)
            ));
        }
        out
    }

    /// One line per (subset, method): mean, std and median of the headline
    /// metrics, plus the rank by mean within the subset.
    pub fn table_csv(&self) -> String {
        let mut out = format!("# config_hash={}\n", self.config_hash);
        out.push_str(
            "subset,method,runs,failed,rank,mae_mean,mae_std,mae_median,r_mean,r_std,\
             accuracy_mean,accuracy_std,accuracy_median,homophily_mean\n",
        );
        let ranks = self.ranks();
        for (row, rank) in self.rows.iter().zip(ranks) {
            let s = &row.summary;
            let f = |x: Option<Summary>, g: fn(Summary) -> f64| opt(x.map(g));
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                row.subset,
                row.method,
                row.runs,
                row.failed,
                rank.map_or_else(String::new, |r| r.to_string()),
                f(s.mae, |x| x.mean),
                f(s.mae, |x| x.std),
                f(s.mae, |x| x.median),
                f(s.r, |x| x.mean),
                f(s.r, |x| x.std),
                f(s.accuracy, |x| x.mean),
                f(s.accuracy, |x| x.std),
                f(s.accuracy, |x| x.median),
                f(s.homophily, |x| x.mean),
            ));
        }
        out
    }

    /// 1 = best (lowest MAE or highest accuracy) within each subset.
    fn ranks(&self) -> Vec<Option<usize>> {
        let score = |row: &AblationRow| match (row.summary.mae, row.summary.accuracy) {
            (Some(m), _) => Some(m.mean),
            (None, Some(a)) => Some(-a.mean),
            _ => None,
        };
        self.rows
            .iter()
            .map(|row| {
                let mine = score(row)?;
                let better = self
                    .rows
                    .iter()
                    .filter(|o| o.subset == row.subset)
                    .filter_map(score)
                    .filter(|&s| s < mine)
                    .count();
                Some(better + 1)
            })
            .collect()
    }
}

/// The `ablate` command: subsets x (graph choices + baselines) x seeds.
pub fn ablate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    let ab = &cfg.ablation;
    let methods: Vec<Method> = ab
        .graphs
        .iter()
        .map(|&g| Method::Adaptive(g))
        .chain(ab.baselines.iter().map(|&b| Method::Baseline(b)))
        .collect();
    if ab.subsets.is_empty() || methods.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    create_dir(out_dir)?;
    let (ds, _) = cfg.load_dataset()?;
    let datasets: Vec<TrainingData> = ab.subsets.iter().map(|s| prepared(s, &ds)).collect::<Result<_>>()?;

    let jobs: Vec<(usize, Method, u64)> = (0..ab.subsets.len())
        .flat_map(|s| {
            methods
                .iter()
                .flat_map(move |&m| cfg.seeds.iter().map(move |&seed| (s, m, seed)))
        })
        .collect();
    let results = parallel_map(&jobs, cfg.workers, |&(s, m, seed)| {
        run_method(&datasets[s], m, cfg, seed)
    })?;

    let hash = cfg.hash();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (&(s, m, seed), res) in jobs.iter().zip(results) {
        let subset = ab.subsets[s].name.clone();
        match res {
            Ok(job) => {
                let dir: PathBuf = out_dir.join("runs").join(&subset).join(m.label());
                create_dir(&dir)?;
                write_json(&job.record, &dir.join(format!("seed-{seed}.json")))?;
                runs.push(AblationRun {
                    subset,
                    method: m.label(),
                    record: compact(&job.record),
                });
            }
            Err(e) => failures.push(Failure {
                subset,
                method: m.label(),
                seed,
                error: e.to_string(),
            }),
        }
    }
    let mut rows = Vec::new();
    for subset in &ab.subsets {
        for m in &methods {
            let label = m.label();
            let group: Vec<&MetricsRecord> = runs
                .iter()
                .filter(|r| r.subset == subset.name && r.method == label)
                .map(|r| &r.record)
                .collect();
            let failed = failures
                .iter()
                .filter(|f| f.subset == subset.name && f.method == label)
                .count();
            rows.push(AblationRow {
                subset: subset.name.clone(),
                method: label,
                runs: group.len(),
                failed,
                summary: MetricSummaries::of(&group),
            });
        }
    }
    let report = AblationReport {
        config_hash: hash,
        seeds: cfg.seeds.clone(),
        rows,
        runs,
        failures,
    };
    write_json(&report, &out_dir.join("ablation.json"))?;
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("ablation_runs.csv", report.runs_csv())?;
    write("ablation_table.csv", report.table_csv())?;
    Ok(report)
}
