//! Population datasets: synthetic generation, min-max normalization, splits
//! and age-bin class labels. File ingestion lives in the std companion crate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::rng::seeded;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    NonImaging,
    /// Imaging phenotype; always also a node-feature column.
    Imaging,
    /// Node feature that is not used as a phenotype.
    Feature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    /// Ground-truth relevance planted by the synthetic generator.
    pub relevant: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Subjects with node features, phenotypes and ages.
///
/// Imaging phenotypes are stored once, as node-feature columns, and referenced
/// by index; the phenotype matrix is assembled as non-imaging columns followed
/// by the referenced imaging columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationDataset {
    non_imaging: Tensor,
    non_imaging_info: Vec<Column>,
    features: Tensor,
    feature_info: Vec<Column>,
    imaging: Vec<usize>,
    labels: Vec<f64>,
    splits: Option<Vec<Split>>,
    classes: Option<Vec<usize>>,
    seed: Option<u64>,
}

impl PopulationDataset {
    pub fn new(
        non_imaging: Tensor,
        non_imaging_info: Vec<Column>,
        features: Tensor,
        feature_info: Vec<Column>,
        labels: Vec<f64>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        if !non_imaging.is_matrix() || non_imaging.rows() != n {
            return Err(Error::ShapeMismatch {
                op: "dataset non-imaging",
                left: non_imaging.shape().to_vec(),
                right: vec![n],
            });
        }
        if !features.is_matrix() || features.rows() != n {
            return Err(Error::ShapeMismatch {
                op: "dataset features",
                left: features.shape().to_vec(),
                right: vec![n],
            });
        }
        if non_imaging_info.len() != non_imaging.cols() || feature_info.len() != features.cols() {
            return Err(Error::InvalidConfig("column metadata count mismatch".into()));
        }
        if non_imaging_info.iter().any(|c| c.kind != ColumnKind::NonImaging)
            || feature_info.iter().any(|c| c.kind == ColumnKind::NonImaging)
        {
            return Err(Error::InvalidConfig("column kinds do not match their block".into()));
        }
        if labels.iter().any(|y| !y.is_finite()) {
            return Err(Error::NonFinite { op: "labels" });
        }
        let imaging = feature_info
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == ColumnKind::Imaging)
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            non_imaging,
            non_imaging_info,
            features,
            feature_info,
            imaging,
            labels,
            splits: None,
            classes: None,
            seed: None,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Number of non-imaging phenotypes (Q).
    pub fn q(&self) -> usize {
        self.non_imaging.cols()
    }

    /// Number of imaging phenotypes (S).
    pub fn s(&self) -> usize {
        self.imaging.len()
    }

    /// Number of node features (M).
    pub fn m(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_info(&self) -> &[Column] {
        &self.feature_info
    }

    pub fn non_imaging(&self) -> &Tensor {
        &self.non_imaging
    }

    pub fn non_imaging_info(&self) -> &[Column] {
        &self.non_imaging_info
    }

    /// Feature-column indices of the imaging phenotypes.
    pub fn imaging_columns(&self) -> &[usize] {
        &self.imaging
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// `N x (Q + S)` phenotype matrix, non-imaging columns first.
    pub fn phenotypes(&self) -> Tensor {
        let n = self.n();
        let width = self.q() + self.s();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(self.non_imaging.row_slice(i));
            let row = self.features.row_slice(i);
            data.extend(self.imaging.iter().map(|&c| row[c]));
        }
        Tensor::from_parts(vec![n, width], data)
    }

    /// Metadata in the column order of [`Self::phenotypes`].
    pub fn phenotype_info(&self) -> Vec<Column> {
        self.non_imaging_info
            .iter()
            .cloned()
            .chain(self.imaging.iter().map(|&c| self.feature_info[c].clone()))
            .collect()
    }

    pub fn splits(&self) -> Option<&[Split]> {
        self.splits.as_deref()
    }

    pub fn set_splits(&mut self, splits: Vec<Split>) -> Result<()> {
        if splits.len() != self.n() {
            return Err(Error::ShapeMismatch {
                op: "set_splits",
                left: vec![self.n()],
                right: vec![splits.len()],
            });
        }
        self.splits = Some(splits);
        Ok(())
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        match &self.splits {
            Some(s) => (0..s.len()).filter(|&i| s[i] == which).collect(),
            None => Vec::new(),
        }
    }

    pub fn mask(&self, which: Split) -> Vec<bool> {
        match &self.splits {
            Some(s) => s.iter().map(|&x| x == which).collect(),
            None => vec![false; self.n()],
        }
    }

    pub fn classes(&self) -> Option<&[usize]> {
        self.classes.as_deref()
    }

    pub fn set_classes(&mut self, classes: Vec<usize>) -> Result<()> {
        if classes.len() != self.n() {
            return Err(Error::ShapeMismatch {
                op: "set_classes",
                left: vec![self.n()],
                right: vec![classes.len()],
            });
        }
        self.classes = Some(classes);
        Ok(())
    }

    /// Keeps the first `non_imaging` non-imaging phenotypes and the first
    /// `imaging` imaging phenotypes (`None` keeps all). Node features are
    /// untouched; dropped imaging phenotypes stay as plain features.
    pub fn select_phenotypes(&self, non_imaging: Option<usize>, imaging: Option<usize>) -> Result<Self> {
        let q = non_imaging.unwrap_or(self.q());
        let s = imaging.unwrap_or(self.s());
        if q > self.q() || s > self.s() {
            return Err(Error::InvalidConfig(format!(
                "phenotype subset ({q}, {s}) exceeds available ({}, {})",
                self.q(),
                self.s()
            )));
        }
        if q + s == 0 {
            return Err(Error::InvalidConfig("phenotype subset is empty".into()));
        }
        let n = self.n();
        let mut data = Vec::with_capacity(n * q);
        for i in 0..n {
            data.extend_from_slice(&self.non_imaging.row_slice(i)[..q]);
        }
        let mut out = self.clone();
        out.non_imaging = Tensor::from_parts(vec![n, q], data);
        out.non_imaging_info.truncate(q);
        for &c in &self.imaging[s..] {
            out.feature_info[c].kind = ColumnKind::Feature;
        }
        out.imaging.truncate(s);
        Ok(out)
    }
}

/// Parameters of the synthetic population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    /// Non-imaging phenotypes (Q).
    pub non_imaging: usize,
    /// Imaging phenotypes (S); these are the first S node features.
    pub imaging: usize,
    /// Node features (M >= S); the extra M - S columns are pure noise.
    pub features: usize,
    pub relevant_non_imaging: usize,
    pub relevant_imaging: usize,
    pub noise_std: f64,
    pub age_min: f64,
    pub age_max: f64,
    /// Probability that a relevant column uses the saturating shape instead
    /// of the linear one.
    pub saturating_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 800,
            non_imaging: 20,
            imaging: 20,
            features: 30,
            relevant_non_imaging: 10,
            relevant_imaging: 10,
            noise_std: 0.3,
            age_min: 47.0,
            age_max: 81.0,
            saturating_fraction: 0.5,
        }
    }
}

/// Curvature of the saturating shape `(1 - e^{-c u}) / (1 - e^{-c})`.
const SATURATION: f64 = 3.0;
/// Standard deviation of age-independent columns.
const NOISE_COLUMN_STD: f64 = 0.3;

fn saturating(u: f64) -> f64 {
    (1.0 - libm::exp(-SATURATION * u)) / (1.0 - libm::exp(-SATURATION))
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n < 20 {
            return fail(format!("N must be at least 20 (got {})", self.n));
        }
        if self.relevant_non_imaging > self.non_imaging || self.relevant_imaging > self.imaging {
            return fail("relevant column counts exceed column counts".into());
        }
        if self.features < self.imaging {
            return fail("node features must include every imaging phenotype (M >= S)".into());
        }
        if self.non_imaging + self.imaging == 0 {
            return fail("at least one phenotype is required".into());
        }
        if self.relevant_non_imaging + self.relevant_imaging == 0 {
            return Err(Error::Degenerate(
                "no relevant phenotype columns: the label would carry no planted signal".into(),
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return fail("noise_std must be finite and non-negative".into());
        }
        if !(self.age_min < self.age_max) {
            return fail("age range must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.saturating_fraction) {
            return fail("saturating_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }
}

fn planted(rng: &mut impl Rng, count: usize, relevant: usize) -> Vec<bool> {
    let mut flags = vec![false; count];
    for i in index::sample(rng, count, relevant) {
        flags[i] = true;
    }
    flags
}

/// Synthetic population whose relevant phenotypes are noisy monotone
/// functions of age. Fully determined by `config` and `seed`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<PopulationDataset> {
    config.validate()?;
    let mut rng = seeded(seed);
    let n = config.n;
    let span = config.age_max - config.age_min;
    let ages: Vec<f64> = (0..n).map(|_| config.age_min + span * rng.random::<f64>()).collect();
    let signal_noise = Normal::new(0.0, config.noise_std).expect("validated noise_std");
    let column_noise = Normal::new(0.0, NOISE_COLUMN_STD).expect("constant std");

    let column = |rng: &mut rand_chacha::ChaCha8Rng, relevant: bool| -> Vec<f64> {
        if relevant {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let bend = rng.random::<f64>() < config.saturating_fraction;
            ages.iter()
                .map(|&a| {
                    let u = (a - config.age_min) / span;
                    let shape = if bend { saturating(u) } else { u };
                    sign * shape + signal_noise.sample(rng)
                })
                .collect()
        } else {
            (0..n).map(|_| column_noise.sample(rng)).collect()
        }
    };

    let ni_flags = planted(&mut rng, config.non_imaging, config.relevant_non_imaging);
    let img_flags = planted(&mut rng, config.imaging, config.relevant_imaging);

    let ni_cols: Vec<Vec<f64>> = ni_flags.iter().map(|&r| column(&mut rng, r)).collect();
    let mut feat_cols: Vec<Vec<f64>> = img_flags.iter().map(|&r| column(&mut rng, r)).collect();
    for _ in config.imaging..config.features {
        feat_cols.push(column(&mut rng, false));
    }

    let to_matrix = |cols: &[Vec<f64>]| {
        let c = cols.len();
        let mut data = vec![0.0; n * c];
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * c + j] = v;
            }
        }
        Tensor::from_parts(vec![n, c], data)
    };

    let ni_info = ni_flags
        .iter()
        .enumerate()
        .map(|(j, &r)| Column {
            name: format!("nonimg_{j:02}"),
            kind: ColumnKind::NonImaging,
            relevant: Some(r),
        })
        .collect();
    let feat_info = (0..config.features)
        .map(|j| {
            if j < config.imaging {
                Column {
                    name: format!("img_{j:02}"),
                    kind: ColumnKind::Imaging,
                    relevant: Some(img_flags[j]),
                }
            } else {
                Column {
                    name: format!("feat_{:02}", j - config.imaging),
                    kind: ColumnKind::Feature,
                    relevant: Some(false),
                }
            }
        })
        .collect();

    let mut ds = PopulationDataset::new(to_matrix(&ni_cols), ni_info, to_matrix(&feat_cols), feat_info, ages)?;
    ds.seed = Some(seed);
    Ok(ds)
}

fn minmax_columns(t: &mut Tensor, train: &[bool]) {
    let (n, c) = (t.rows(), t.cols());
    for j in 0..c {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in (0..n).filter(|&i| train[i]) {
            let v = t.get(i, j);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let data = t.data_mut();
        for i in 0..n {
            let v = &mut data[i * c + j];
            *v = if hi > lo {
                ((*v - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.5
            };
        }
    }
}

/// Per-column min-max scaling with training-split statistics. Constant
/// columns become 0.5; validation and test values are clamped to `[0, 1]`.
pub fn normalize_minmax(ds: &mut PopulationDataset) -> Result<()> {
    let train = ds.mask(Split::Train);
    if !train.iter().any(|&t| t) {
        return Err(Error::Empty("training split"));
    }
    minmax_columns(&mut ds.non_imaging, &train);
    minmax_columns(&mut ds.features, &train);
    Ok(())
}

/// Split sizes by largest remainder (ties to the earlier split). A split with
/// a positive fraction that rounds to zero takes one subject from the largest
/// split.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be non-negative and sum to 1 (got {fractions:?})"
        )));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = libm::floor(*e) as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - sizes[a] as f64, exact[b] - sizes[b] as f64);
        rb.partial_cmp(&ra)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    for i in 0..3 {
        if sizes[i] == 0 {
            let largest = (0..3).max_by_key(|&j| (sizes[j], core::cmp::Reverse(j))).unwrap_or(0);
            if fractions[i] == 0.0 || sizes[largest] <= 1 {
                return Err(Error::Empty(["train split", "validation split", "test split"][i]));
            }
            sizes[largest] -= 1;
            sizes[i] += 1;
        }
    }
    Ok(sizes)
}

/// Uniformly random train/val/test assignment of `n` subjects.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    let sizes = split_sizes(n, fractions)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeded(seed));
    let mut out = vec![Split::Train; n];
    for (rank, &i) in perm.iter().enumerate() {
        out[i] = if rank < sizes[0] {
            Split::Train
        } else if rank < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Age bins from training quantiles: bin edges sit midway between the order
/// statistics at `i * n_train / n_classes`. Returns (class per subject, edges).
pub fn make_class_labels(labels: &[f64], splits: &[Split], n_classes: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if n_classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    if labels.len() != splits.len() {
        return Err(Error::ShapeMismatch {
            op: "make_class_labels",
            left: vec![labels.len()],
            right: vec![splits.len()],
        });
    }
    let mut train: Vec<f64> = labels
        .iter()
        .zip(splits)
        .filter(|(_, s)| **s == Split::Train)
        .map(|(y, _)| *y)
        .collect();
    if train.len() < n_classes {
        return Err(Error::Degenerate(format!(
            "{} training labels cannot fill {n_classes} classes",
            train.len()
        )));
    }
    train.sort_by(|a, b| a.total_cmp(b));
    let nt = train.len();
    let edges: Vec<f64> = (1..n_classes)
        .map(|i| {
            let b = libm::round(i as f64 * nt as f64 / n_classes as f64) as usize;
            0.5 * (train[b - 1] + train[b])
        })
        .collect();
    let classify = |y: f64| edges.iter().filter(|&&e| y > e).count();
    let classes: Vec<usize> = labels.iter().map(|&y| classify(y)).collect();
    let mut counts = vec![0usize; n_classes];
    for (c, s) in classes.iter().zip(splits) {
        if *s == Split::Train {
            counts[*c] += 1;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Degenerate(format!(
            "tied training labels leave class {empty} empty; use fewer classes"
        )));
    }
    Ok((classes, edges))
}

/// Train/validation/test fractions used throughout.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.75, 0.05, 0.20];

/// Splits with `seed` and normalizes with training statistics.
pub fn prepare(ds: &mut PopulationDataset, fractions: [f64; 3], seed: u64) -> Result<()> {
    ds.set_splits(split(ds.n(), fractions, seed)?)?;
    normalize_minmax(ds)
}

/// Bins the ages into `n_classes` training-quantile classes and stores them.
/// Returns the bin edges.
pub fn assign_classes(ds: &mut PopulationDataset, n_classes: usize) -> Result<Vec<f64>> {
    let splits = ds
        .splits()
        .ok_or_else(|| Error::InvalidConfig("split the dataset before binning".into()))?
        .to_vec();
    let (classes, edges) = make_class_labels(ds.labels(), &splits, n_classes)?;
    ds.set_classes(classes)?;
    Ok(edges)
}

/// A generated, split and normalized synthetic population.
pub fn synthetic_population(config: &SyntheticConfig, seed: u64) -> Result<PopulationDataset> {
    let mut ds = generate_synthetic(config, seed)?;
    prepare(&mut ds, DEFAULT_FRACTIONS, seed)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n: 200,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small(), 7).unwrap();
        let b = generate_synthetic(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(), 8).unwrap();
        assert_ne!(a.labels(), c.labels());
    }

    #[test]
    fn generated_layout() {
        let ds = generate_synthetic(&small(), 1).unwrap();
        assert_eq!((ds.n(), ds.q(), ds.s(), ds.m()), (200, 20, 20, 30));
        assert_eq!(ds.imaging_columns(), (0..20).collect::<Vec<_>>().as_slice());
        let info = ds.phenotype_info();
        assert_eq!(info.len(), 40);
        assert_eq!(info.iter().filter(|c| c.relevant == Some(true)).count(), 20);
        assert!(ds.labels().iter().all(|&y| (47.0..81.0).contains(&y)));
        // imaging phenotypes are literally node-feature columns
        let p = ds.phenotypes();
        for i in 0..ds.n() {
            for s in 0..ds.s() {
                assert_eq!(p.get(i, ds.q() + s), ds.features().get(i, s));
            }
        }
    }

    #[test]
    fn noiseless_linear_column_is_monotone_in_age() {
        let cfg = SyntheticConfig {
            n: 50,
            non_imaging: 1,
            imaging: 0,
            features: 2,
            relevant_non_imaging: 1,
            relevant_imaging: 0,
            noise_std: 0.0,
            saturating_fraction: 0.0,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg, 3).unwrap();
        let mut pairs: Vec<(f64, f64)> = ds
            .labels()
            .iter()
            .zip(ds.non_imaging().data())
            .map(|(&a, &v)| (a, v))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let inc = pairs.windows(2).all(|w| w[1].1 > w[0].1);
        let dec = pairs.windows(2).all(|w| w[1].1 < w[0].1);
        assert!(inc || dec);
    }

    #[test]
    fn degenerate_configs_rejected() {
        let mut cfg = small();
        cfg.relevant_non_imaging = 0;
        cfg.relevant_imaging = 0;
        assert!(matches!(generate_synthetic(&cfg, 0), Err(Error::Degenerate(_))));
        let mut cfg = small();
        cfg.relevant_imaging = 21;
        assert!(generate_synthetic(&cfg, 0).is_err());
        let mut cfg = small();
        cfg.n = 19;
        assert!(generate_synthetic(&cfg, 0).is_err());
    }

    fn with_train_rows(values: &[f64], splits: Vec<Split>) -> PopulationDataset {
        let n = values.len();
        let mut ds = PopulationDataset::new(
            Tensor::matrix(n, 1, values.to_vec()).unwrap(),
            vec![Column {
                name: "q".into(),
                kind: ColumnKind::NonImaging,
                relevant: None,
            }],
            Tensor::matrix(n, 1, vec![3.0; n]).unwrap(),
            vec![Column {
                name: "x".into(),
                kind: ColumnKind::Imaging,
                relevant: None,
            }],
            vec![50.0; n],
        )
        .unwrap();
        ds.set_splits(splits).unwrap();
        ds
    }

    #[test]
    fn minmax_examples() {
        use Split::*;
        let mut ds = with_train_rows(&[2.0, 4.0, 6.0, 8.0, -1.0], vec![Train, Train, Train, Test, Val]);
        normalize_minmax(&mut ds).unwrap();
        assert_eq!(ds.non_imaging().data(), &[0.0, 0.5, 1.0, 1.0, 0.0]);
        assert_eq!(ds.features().data(), &[0.5; 5]);
        let once = ds.clone();
        normalize_minmax(&mut ds).unwrap();
        assert_eq!(ds, once);
    }

    #[test]
    fn minmax_needs_train_rows() {
        let mut ds = with_train_rows(&[1.0, 2.0], vec![Split::Val, Split::Test]);
        assert_eq!(normalize_minmax(&mut ds), Err(Error::Empty("training split")));
    }

    #[test]
    fn split_sizes_paper_ratios() {
        assert_eq!(split_sizes(100, [0.75, 0.05, 0.20]).unwrap(), [75, 5, 20]);
        assert_eq!(split_sizes(800, [0.75, 0.05, 0.20]).unwrap(), [600, 40, 160]);
    }

    /// Independent restatement of the rounding rule, by enumeration over all
    /// ways to hand out the leftover subjects.
    fn brute_force_sizes(n: usize, f: [f64; 3]) -> Option<[usize; 3]> {
        let exact: Vec<f64> = f.iter().map(|x| x * n as f64).collect();
        let floors: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let left = n - floors.iter().sum::<usize>();
        // the leftover goes to the `left` largest remainders (earlier split on ties)
        let mut best: Option<([usize; 3], f64)> = None;
        for mask in 0u8..8 {
            if mask.count_ones() as usize != left {
                continue;
            }
            let got: f64 = (0..3)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| (exact[i] - floors[i] as f64) * 1000.0 - i as f64 * 1e-6)
                .sum();
            if best.is_none_or(|(_, b)| got > b) {
                let mut s = [floors[0], floors[1], floors[2]];
                for i in 0..3 {
                    if mask & (1 << i) != 0 {
                        s[i] += 1;
                    }
                }
                best = Some((s, got));
            }
        }
        let mut s = best?.0;
        for i in 0..3 {
            if s[i] == 0 {
                let mut largest = 0;
                for j in 1..3 {
                    if s[j] > s[largest] {
                        largest = j;
                    }
                }
                if s[largest] <= 1 {
                    return None;
                }
                s[largest] -= 1;
                s[i] += 1;
            }
        }
        Some(s)
    }

    #[test]
    fn split_sizes_match_enumeration_for_small_n() {
        for n in 3..60 {
            let got = split_sizes(n, [0.75, 0.05, 0.20]).ok();
            assert_eq!(got, brute_force_sizes(n, [0.75, 0.05, 0.20]), "n = {n}");
            if let Some(s) = got {
                assert!(s.iter().all(|&x| x >= 1));
                assert_eq!(s.iter().sum::<usize>(), n);
            }
        }
        // N = 10: floor rounding would leave validation empty
        assert_eq!(split_sizes(10, [0.75, 0.05, 0.20]).unwrap(), [7, 1, 2]);
        assert!(split_sizes(2, [0.75, 0.05, 0.20]).is_err());
        assert!(split_sizes(10, [0.8, 0.0, 0.2]).is_err());
        assert!(split_sizes(10, [0.8, 0.1, 0.2]).is_err());
    }

    #[test]
    fn split_is_deterministic_partition() {
        let a = split(100, [0.75, 0.05, 0.20], 9).unwrap();
        assert_eq!(a, split(100, [0.75, 0.05, 0.20], 9).unwrap());
        assert_ne!(a, split(100, [0.75, 0.05, 0.20], 10).unwrap());
        let count = |s: Split| a.iter().filter(|&&x| x == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (75, 5, 20)
        );
    }

    #[test]
    fn class_label_examples() {
        use Split::*;
        let (c, e) = make_class_labels(&[1.0, 2.0, 3.0, 4.0, 0.5], &[Train, Train, Train, Train, Test], 2).unwrap();
        assert_eq!(c, vec![0, 0, 1, 1, 0]);
        assert_eq!(e, vec![2.5]);
        let tied = [5.0, 5.0, 5.0, 5.0, 6.0];
        assert!(matches!(
            make_class_labels(&tied, &[Train; 5], 4),
            Err(Error::Degenerate(_))
        ));
        assert!(make_class_labels(&[1.0, 2.0], &[Train, Train], 1).is_err());
    }

    #[test]
    fn four_bins_on_uniform_ages() {
        let ds = generate_synthetic(&SyntheticConfig::default(), 2).unwrap();
        let splits = split(ds.n(), [0.75, 0.05, 0.20], 2).unwrap();
        let (classes, edges) = make_class_labels(ds.labels(), &splits, 4).unwrap();
        let mut train: Vec<f64> = ds
            .labels()
            .iter()
            .zip(&splits)
            .filter(|(_, s)| **s == Split::Train)
            .map(|(y, _)| *y)
            .collect();
        train.sort_by(|a, b| a.total_cmp(b));
        // the sample quartiles, and the population quartiles of U(47, 81)
        for (i, (&e, pop)) in edges.iter().zip([55.5, 64.0, 72.5]).enumerate() {
            let q = train[(i + 1) * train.len() / 4];
            assert!((e - q).abs() < 0.5, "edge {e} vs sample quantile {q}");
            assert!((e - pop).abs() < 2.0, "edge {e} vs {pop}");
        }
        let mut counts = [0usize; 4];
        for (c, s) in classes.iter().zip(&splits) {
            if *s == Split::Train {
                counts[*c] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c.abs_diff(150) <= 1), "{counts:?}");
    }

    #[test]
    fn phenotype_subset_keeps_imaging_inside_features() {
        let ds = generate_synthetic(&small(), 4).unwrap();
        let sub = ds.select_phenotypes(Some(5), Some(3)).unwrap();
        assert_eq!((sub.q(), sub.s(), sub.m()), (5, 3, 30));
        assert_eq!(sub.phenotypes().cols(), 8);
        let only_img = ds.select_phenotypes(Some(0), None).unwrap();
        assert_eq!(only_img.phenotypes().cols(), 20);
        assert!(ds.select_phenotypes(Some(0), Some(0)).is_err());
    }
}
