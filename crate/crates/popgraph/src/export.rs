//! Files a run leaves behind.
//!
//! JSON goes through serde_json (shortest round-trip floats), so equal
//! values always serialize to equal bytes. CSV and dot files carry the
//! config hash in a leading comment line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use popgraph_core::attention::{AttentionVector, RankedPhenotype};
use popgraph_core::dataio::ColumnKind;
use popgraph_core::graphgen::{Edge, SampledGraph};
use popgraph_core::numerics::Tensor;
use popgraph_core::trainer::{EpochRecord, ModelParams, PARAM_NAMES};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

fn write_text(text: &str, path: &Path) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn hash_comment(prefix: &str, config_hash: Option<&str>) -> String {
    config_hash.map_or_else(String::new, |h| format!("{prefix} config_hash={h}\n"))
}

/// Blue at `lo`, red at `hi`, linear in between; `#rrggbb`.
pub fn age_color(age: f64, lo: f64, hi: f64) -> String {
    let u = if hi > lo {
        ((age - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.5
    };
    let red = (255.0 * u).round() as u8;
    format!("#{:02x}00{:02x}", red, 255 - red)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub age: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homophily: Option<f64>,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl GraphFile {
    pub fn from_edges(edges: &[Edge], labels: &[f64]) -> Self {
        Self {
            config_hash: None,
            homophily: None,
            nodes: nodes(labels),
            edges: edges
                .iter()
                .map(|&(src, dst)| GraphEdge { src, dst, logp: None })
                .collect(),
        }
    }

    /// Keeps each edge's log-probability.
    pub fn from_sample(graph: &SampledGraph, labels: &[f64]) -> Self {
        Self {
            config_hash: None,
            homophily: None,
            nodes: nodes(labels),
            edges: graph
                .edges
                .iter()
                .map(|e| GraphEdge {
                    src: e.src,
                    dst: e.dst,
                    logp: Some(e.log_p),
                })
                .collect(),
        }
    }

    pub fn edge_pairs(&self) -> Vec<Edge> {
        self.edges.iter().map(|e| (e.src, e.dst)).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    /// Directed graph; nodes filled on the age color ramp.
    pub fn to_dot(&self, name: &str) -> String {
        let (lo, hi) = self
            .nodes
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), n| {
                (lo.min(n.age), hi.max(n.age))
            });
        let mut out = hash_comment("//", self.config_hash.as_deref());
        if let Some(h) = self.homophily {
            let _ = writeln!(out, "// homophily={h}");
        }
        let _ = writeln!(out, "digraph {name} {{");
        out.push_str("  node [shape=circle, style=filled, fontcolor=white];\n");
        for n in &self.nodes {
            let _ = writeln!(
                out,
                "  {} [label=\"{}\", age=\"{}\", fillcolor=\"{}\"];",
                n.id,
                n.id,
                n.age,
                age_color(n.age, lo, hi)
            );
        }
        for e in &self.edges {
            let _ = writeln!(out, "  {} -> {};", e.src, e.dst);
        }
        out.push_str("}\n");
        out
    }

    pub fn write_dot(&self, path: &Path, name: &str) -> Result<()> {
        write_text(&self.to_dot(name), path)
    }
}

fn nodes(labels: &[f64]) -> Vec<GraphNode> {
    labels
        .iter()
        .enumerate()
        .map(|(id, &age)| GraphNode { id, age })
        .collect()
}

fn kind_name(kind: ColumnKind) -> &'static str {
    match kind {
        ColumnKind::NonImaging => "non_imaging",
        ColumnKind::Imaging => "imaging",
        ColumnKind::Feature => "feature",
    }
}

/// `rank,name,kind,weight`, best first.
pub fn attention_csv(attention: &AttentionVector, config_hash: Option<&str>) -> String {
    let mut out = hash_comment("#", config_hash);
    out.push_str("rank,name,kind,weight\n");
    for r in attention.rank() {
        let _ = writeln!(out, "{},{},{},{}", r.rank, r.name, kind_name(r.kind), r.weight);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision_at_relevant: Option<f64>,
    /// Column order, as fed to the model.
    pub vector: AttentionVector,
    pub ranking: Vec<RankedPhenotype>,
}

pub fn write_attention(attention: &AttentionVector, dir: &Path, config_hash: Option<&str>) -> Result<()> {
    write_text(&attention_csv(attention, config_hash), &dir.join("attention.csv"))?;
    let file = AttentionFile {
        config_hash: config_hash.map(str::to_owned),
        precision_at_relevant: attention.precision_at_relevant(),
        vector: attention.clone(),
        ranking: attention.rank(),
    };
    write_json(&file, &dir.join("attention.json"))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// `epoch,L_total,L_gcn,L_graph,val_metric`; an empty cell when there was
/// no validation split.
pub fn history_csv(history: &[EpochRecord], config_hash: Option<&str>) -> String {
    let mut out = hash_comment("#", config_hash);
    out.push_str("epoch,L_total,L_gcn,L_graph,val_metric\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            h.epoch,
            h.total,
            h.gcn,
            h.graph,
            opt(h.val_metric)
        );
    }
    out
}

pub fn write_history(history: &[EpochRecord], path: &Path, config_hash: Option<&str>) -> Result<()> {
    write_text(&history_csv(history, config_hash), path)
}

pub const CHECKPOINT_FORMAT: &str = "popgraph-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All model parameters by name, with the config hash and run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, config_hash: &str, seed: u64, method: &str) -> Self {
        let tensors = PARAM_NAMES
            .iter()
            .zip(params.flatten())
            .map(|(name, t)| NamedTensor {
                name: (*name).into(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            seed,
            method: method.into(),
            tensors,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        let mut flat = Vec::with_capacity(PARAM_NAMES.len());
        for name in PARAM_NAMES {
            let t = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{name}'")))?;
            flat.push(Tensor::new(t.shape.clone(), t.data.clone())?);
        }
        Ok(ModelParams::from_flat(flat)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let ck: Self = read_json(path)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::parse(path, format!("not a checkpoint (format '{}')", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                path,
                format!(
                    "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                    ck.version
                ),
            ));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }
}
