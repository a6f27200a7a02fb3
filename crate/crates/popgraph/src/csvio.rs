//! Subject tables as CSV: `id,<columns>,age`.
//!
//! Which columns are phenotypes or node features is not in the file; a kind
//! map (from the experiment config, or a metadata file written next to a
//! generated dataset) says so. Columns the map does not mention are ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use popgraph_core::dataio::{Column, ColumnKind, PopulationDataset};
use popgraph_core::numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How to read a subject table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub path: PathBuf,
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(default = "default_label")]
    pub label: String,
    /// Column name to kind. Either this or `metadata`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub kinds: BTreeMap<String, ColumnKind>,
    /// Columns with known ground-truth relevance (enables attention precision).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relevant: Vec<String>,
    /// A metadata JSON written by `generate`; supplies kinds and relevance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<PathBuf>,
}

fn default_id() -> String {
    "id".into()
}

fn default_label() -> String {
    "age".into()
}

/// Kind per column name, plus the relevant names when known.
type ColumnSpec = (BTreeMap<String, ColumnKind>, Option<BTreeSet<String>>);

impl CsvSchema {
    pub fn new(path: impl Into<PathBuf>, kinds: BTreeMap<String, ColumnKind>) -> Self {
        Self {
            path: path.into(),
            id: default_id(),
            label: default_label(),
            kinds,
            relevant: Vec::new(),
            metadata: None,
        }
    }

    /// Paths relative to `base` become absolute-ish joins; absolute paths stay.
    pub fn resolve_paths(&mut self, base: &Path) {
        if self.path.is_relative() {
            self.path = base.join(&self.path);
        }
        if let Some(m) = &mut self.metadata {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
    }

    /// Kind per column and the relevance flags, from whichever source is set.
    fn columns(&self) -> Result<ColumnSpec> {
        match &self.metadata {
            Some(path) => {
                if !self.kinds.is_empty() || !self.relevant.is_empty() {
                    return Err(Error::Config(
                        "give either a kind map or a metadata file, not both".into(),
                    ));
                }
                let meta = DatasetMetadata::read(path)?;
                let kinds = meta.columns.iter().map(|c| (c.name.clone(), c.kind)).collect();
                let relevant = meta.columns.iter().all(|c| c.relevant.is_some()).then(|| {
                    meta.columns
                        .iter()
                        .filter(|c| c.relevant == Some(true))
                        .map(|c| c.name.clone())
                        .collect()
                });
                Ok((kinds, relevant))
            }
            None => {
                if self.kinds.is_empty() {
                    return Err(Error::Config(format!("{}: kind map is empty", self.path.display())));
                }
                for name in &self.relevant {
                    if !self.kinds.contains_key(name) {
                        return Err(Error::Config(format!(
                            "relevant column '{name}' is not in the kind map"
                        )));
                    }
                }
                let relevant = (!self.relevant.is_empty()).then(|| self.relevant.iter().cloned().collect());
                Ok((self.kinds.clone(), relevant))
            }
        }
    }
}

/// What `load_csv` skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub rows_read: usize,
    /// 1-based data-row numbers of rows dropped for a missing cell.
    pub dropped: Vec<usize>,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "read {} rows, kept {}, dropped {}",
            self.rows_read,
            self.rows_read - self.dropped.len(),
            self.dropped.len()
        )
    }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

/// Reads a subject table. Rows with an empty cell in any mapped column or
/// the label are dropped and reported; anything else non-numeric is an error.
pub fn load_csv(schema: &CsvSchema) -> Result<(PopulationDataset, LoadReport)> {
    let path = schema.path.as_path();
    let (kinds, relevant) = schema.columns()?;
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let find = |name: &str| header.iter().position(|h| h == name);

    let label_at = find(&schema.label)
        .ok_or_else(|| Error::Config(format!("{}: no label column '{}'", path.display(), schema.label)))?;
    for name in kinds.keys() {
        if find(name).is_none() {
            return Err(Error::Config(format!(
                "{}: column '{name}' from the kind map is not in the header",
                path.display()
            )));
        }
        if *name == schema.label {
            return Err(Error::Config(format!(
                "label column '{name}' cannot also be a phenotype"
            )));
        }
    }
    // header order decides column order within each block
    let mapped: Vec<(usize, &str, ColumnKind)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| kinds.get(h).map(|&k| (i, h.as_str(), k)))
        .collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut report = LoadReport {
        rows_read: 0,
        dropped: Vec::new(),
    };
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e))?;
        let row_no = r + 1;
        report.rows_read += 1;
        let parse = |at: usize, column: &str| -> Result<Option<f64>> {
            let cell = record.get(at).unwrap_or("");
            if cell.is_empty() {
                return Ok(None);
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(Error::Cell {
                    path: path.to_path_buf(),
                    row: row_no,
                    column: column.to_owned(),
                    value: cell.to_owned(),
                }),
            }
        };
        let label = parse(label_at, &schema.label)?;
        let mut values = Vec::with_capacity(mapped.len());
        let mut missing = label.is_none();
        for &(at, name, _) in &mapped {
            match parse(at, name)? {
                Some(v) => values.push(v),
                None => missing = true,
            }
        }
        if missing {
            report.dropped.push(row_no);
        } else {
            rows.push(values);
            labels.extend(label);
        }
    }
    if rows.is_empty() {
        return Err(Error::parse(path, "no usable rows"));
    }

    let column = |name: &str, kind: ColumnKind| Column {
        name: name.to_owned(),
        kind,
        relevant: relevant.as_ref().map(|set| set.contains(name)),
    };
    let n = rows.len();
    let mut ni = Vec::new();
    let mut ni_info = Vec::new();
    let mut feat = Vec::new();
    let mut feat_info = Vec::new();
    for (j, &(_, name, kind)) in mapped.iter().enumerate() {
        let (block, info) = if kind == ColumnKind::NonImaging {
            (&mut ni, &mut ni_info)
        } else {
            (&mut feat, &mut feat_info)
        };
        block.push(j);
        info.push(column(name, kind));
    }
    let gather = |cols: &[usize]| {
        let mut data = Vec::with_capacity(n * cols.len());
        for row in &rows {
            data.extend(cols.iter().map(|&j| row[j]));
        }
        Tensor::matrix(n, cols.len(), data)
    };
    let ds = PopulationDataset::new(gather(&ni)?, ni_info, gather(&feat)?, feat_info, labels)?;
    Ok((ds, report))
}

/// Every column of a dataset: non-imaging block, then node features.
pub fn all_columns(ds: &PopulationDataset) -> Vec<Column> {
    let mut cols = ds.non_imaging_info().to_vec();
    cols.extend(ds.feature_info().iter().cloned());
    cols
}

/// Writes the table `load_csv` reads. Values use the shortest decimal form
/// that parses back to the same `f64`, so a reload is exact.
pub fn write_csv(ds: &PopulationDataset, path: &Path, config_hash: Option<&str>) -> Result<()> {
    let mut out = String::new();
    if let Some(h) = config_hash {
        out.push_str(&format!("# config_hash={h}\n"));
    }
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let names = all_columns(ds);
    let mut header = vec!["id".to_owned()];
    header.extend(names.iter().map(|c| c.name.clone()));
    header.push("age".into());
    w.write_record(&header).map_err(|e| Error::parse(path, e))?;
    for i in 0..ds.n() {
        let mut rec = vec![i.to_string()];
        rec.extend(ds.non_imaging().row_slice(i).iter().map(f64::to_string));
        rec.extend(ds.features().row_slice(i).iter().map(f64::to_string));
        rec.push(ds.labels()[i].to_string());
        w.write_record(&rec).map_err(|e| Error::parse(path, e))?;
    }
    let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    out.push_str(&String::from_utf8(body).expect("csv writer emits utf-8"));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Column kinds and planted relevance of a written dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub n: usize,
    pub columns: Vec<Column>,
}

impl DatasetMetadata {
    pub fn of(ds: &PopulationDataset, config_hash: Option<&str>) -> Self {
        Self {
            config_hash: config_hash.map(str::to_owned),
            seed: ds.seed(),
            n: ds.n(),
            columns: all_columns(ds),
        }
    }

    pub fn relevant_count(&self) -> usize {
        self.columns.iter().filter(|c| c.relevant == Some(true)).count()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::export::write_json(self, path)
    }
}
