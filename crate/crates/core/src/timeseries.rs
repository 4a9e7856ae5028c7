//! Data model, CSV ingestion, min-max scaling, chronological splits and the
//! lagged supervised matrix that feeds the soft sensor.
//!
//! Time labels are 1-based throughout: label `l` refers to `values()[l - 1]`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Read;
use std::ops::RangeInclusive;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, finite-valued series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    name: String,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.is_empty() {
            return Err(Error::Data(format!("series {name:?} is empty")));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "series {name:?} has a non-finite value at time {}",
                pos + 1
            )));
        }
        Ok(Self { name, values })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at 1-based time label `l`.
    pub fn at(&self, l: usize) -> f64 {
        self.values[l - 1]
    }

    /// True when every value equals the first one.
    pub fn is_constant(&self) -> bool {
        let first = self.values[0];
        self.values.iter().all(|&v| v == first)
    }

    fn slice(&self, labels: RangeInclusive<usize>) -> TimeSeries {
        TimeSeries {
            name: self.name.clone(),
            values: self.values[labels.start() - 1..*labels.end()].to_vec(),
        }
    }
}

/// Equal-length columns, one of which is the KPI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    columns: Vec<TimeSeries>,
    kpi_index: usize,
}

impl Dataset {
    pub fn new(columns: Vec<TimeSeries>, kpi_index: usize) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Data("dataset has no columns".into()));
        }
        if kpi_index >= columns.len() {
            return Err(Error::Data(format!(
                "KPI index {kpi_index} out of range for {} columns",
                columns.len()
            )));
        }
        let len = columns[0].len();
        if let Some(bad) = columns.iter().find(|c| c.len() != len) {
            return Err(Error::Data(format!(
                "column {:?} has length {}, expected {len}",
                bad.name(),
                bad.len()
            )));
        }
        let mut names = BTreeSet::new();
        for c in &columns {
            if !names.insert(c.name()) {
                return Err(Error::Data(format!("duplicate column name {:?}", c.name())));
            }
        }
        Ok(Self { columns, kpi_index })
    }

    /// Builds a dataset from named columns, resolving the KPI by name.
    pub fn from_columns(columns: Vec<TimeSeries>, kpi_name: &str) -> Result<Self> {
        let kpi_index = columns
            .iter()
            .position(|c| c.name() == kpi_name)
            .ok_or_else(|| Error::MissingKpi(kpi_name.to_string()))?;
        Self::new(columns, kpi_index)
    }

    /// Number of time points L.
    pub fn len(&self) -> usize {
        self.columns[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn columns(&self) -> &[TimeSeries] {
        &self.columns
    }

    pub fn column(&self, index: usize) -> &TimeSeries {
        &self.columns[index]
    }

    pub fn kpi_index(&self) -> usize {
        self.kpi_index
    }

    pub fn kpi(&self) -> &TimeSeries {
        &self.columns[self.kpi_index]
    }

    /// Number of auxiliary variables M.
    pub fn aux_count(&self) -> usize {
        self.columns.len() - 1
    }

    /// Column indices of the auxiliary variables, in file order.
    pub fn aux_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.columns.len()).filter(move |&i| i != self.kpi_index)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name() == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name()).collect()
    }

    /// Rows with 1-based labels in `labels`, relabelled from 1.
    pub fn slice_rows(&self, labels: RangeInclusive<usize>) -> Result<Dataset> {
        if *labels.start() < 1 || labels.end() > &self.len() || labels.start() > labels.end() {
            return Err(Error::Config(format!(
                "row range {}..={} outside 1..={}",
                labels.start(),
                labels.end(),
                self.len()
            )));
        }
        Ok(Dataset {
            columns: self.columns.iter().map(|c| c.slice(labels.clone())).collect(),
            kpi_index: self.kpi_index,
        })
    }
}

/// Reads a dataset from a CSV file with a header row.
pub fn load_csv(path: impl AsRef<Path>, kpi_name: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, kpi_name)
}

/// Reads a dataset from any CSV source. Row numbers in errors count data rows
/// from 1 (the header is not counted), matching time labels.
pub fn read_csv<R: Read>(reader: R, kpi_name: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if !header.iter().any(|h| h == kpi_name) {
        return Err(Error::MissingKpi(kpi_name.to_string()));
    }
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::RaggedRow {
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::BadCell {
                    row,
                    column: header[j].clone(),
                    value: cell.to_string(),
                })?;
            cols[j].push(v);
        }
    }
    if cols[0].is_empty() {
        return Err(Error::Data("CSV has a header but no data rows".into()));
    }
    let columns = header
        .into_iter()
        .zip(cols)
        .map(|(name, values)| TimeSeries::new(name, values))
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_columns(columns, kpi_name)
}

/// Writes a dataset as CSV in column order.
pub fn write_csv<W: std::io::Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ds.names())?;
    for t in 0..ds.len() {
        w.write_record(ds.columns().iter().map(|c| c.values()[t].to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Min and max of one column as seen at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub constant: bool,
}

impl ColumnScale {
    pub fn apply(&self, v: f64) -> f64 {
        if self.constant {
            0.0
        } else {
            (v - self.min) / (self.max - self.min)
        }
    }

    pub fn invert(&self, v: f64) -> f64 {
        if self.constant {
            self.min
        } else {
            v * (self.max - self.min) + self.min
        }
    }
}

/// Per-column min-max parameters, serialised next to trained models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub columns: Vec<ColumnScale>,
}

impl NormalizationParams {
    pub fn fit(ds: &Dataset) -> Self {
        let columns = ds
            .columns()
            .iter()
            .map(|c| {
                let (min, max) = c
                    .values()
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    });
                ColumnScale {
                    name: c.name().to_string(),
                    min,
                    max,
                    constant: max == min,
                }
            })
            .collect();
        Self { columns }
    }

    pub fn constant_columns(&self) -> Vec<&str> {
        self.columns
            .iter()
            .filter(|c| c.constant)
            .map(|c| c.name.as_str())
            .collect()
    }

    /// Scales every column of `ds` with the fitted parameters.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        self.map(ds, ColumnScale::apply)
    }

    /// Undoes [`apply`](Self::apply).
    pub fn invert(&self, ds: &Dataset) -> Result<Dataset> {
        self.map(ds, ColumnScale::invert)
    }

    fn map(&self, ds: &Dataset, f: fn(&ColumnScale, f64) -> f64) -> Result<Dataset> {
        if ds.names() != self.columns.iter().map(|c| c.name.as_str()).collect::<Vec<_>>() {
            return Err(Error::Data(
                "normalization parameters do not match dataset columns".into(),
            ));
        }
        let columns = ds
            .columns()
            .iter()
            .zip(&self.columns)
            .map(|(c, s)| TimeSeries {
                name: c.name().to_string(),
                values: c.values().iter().map(|&v| f(s, v)).collect(),
            })
            .collect();
        Ok(Dataset {
            columns,
            kpi_index: ds.kpi_index(),
        })
    }
}

/// Scales each column to [0, 1]. Constant columns map to 0 and are flagged in
/// the returned parameters.
pub fn normalize_minmax(ds: &Dataset) -> (Dataset, NormalizationParams) {
    let params = NormalizationParams::fit(ds);
    for name in params.constant_columns() {
        log::warn!("column {name:?} is constant; scaled to 0");
    }
    let scaled = params.apply(ds).expect("params fitted on this dataset");
    (scaled, params)
}

/// Chronological cut points, as 1-based inclusive end labels. Training covers
/// `1..=train_end`, validation `train_end+1..=validation_end`, and the test
/// segment whatever remains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: usize,
    pub validation_end: usize,
}

impl SplitSpec {
    pub fn new(train_end: usize, validation_end: usize) -> Self {
        Self {
            train_end,
            validation_end,
        }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if self.train_end == 0 || self.train_end >= self.validation_end || self.validation_end > len
        {
            return Err(Error::Config(format!(
                "split requires 0 < train_end < validation_end <= {len}, got train_end={} validation_end={}",
                self.train_end, self.validation_end
            )));
        }
        Ok(())
    }

    pub fn train(&self) -> RangeInclusive<usize> {
        1..=self.train_end
    }

    pub fn validation(&self) -> RangeInclusive<usize> {
        self.train_end + 1..=self.validation_end
    }

    /// Test labels, or `None` when validation runs to the end.
    pub fn test(&self, len: usize) -> Option<RangeInclusive<usize>> {
        (self.validation_end < len).then(|| self.validation_end + 1..=len)
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Option<Dataset>,
}

pub fn chronological_split(ds: &Dataset, spec: SplitSpec) -> Result<DatasetSplit> {
    spec.validate(ds.len())?;
    Ok(DatasetSplit {
        train: ds.slice_rows(spec.train())?,
        validation: ds.slice_rows(spec.validation())?,
        test: spec.test(ds.len()).map(|r| ds.slice_rows(r)).transpose()?,
    })
}

/// One candidate input: auxiliary column `var` observed `lag` steps before
/// the KPI time point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureId {
    pub var: usize,
    pub lag: usize,
}

impl FeatureId {
    pub fn new(var: usize, lag: usize) -> Self {
        Self { var, lag }
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}(t-{})", self.var, self.lag)
    }
}

/// Ordered set of features; iteration is by (variable, lag).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureSet(BTreeSet<FeatureId>);

impl FeatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, f: FeatureId) -> bool {
        self.0.insert(f)
    }

    pub fn contains(&self, f: &FeatureId) -> bool {
        self.0.contains(f)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureId> {
        self.0.iter()
    }

    pub fn is_subset(&self, other: &FeatureSet) -> bool {
        self.0.is_subset(&other.0)
    }

    /// Lags selected for one variable, ascending.
    pub fn lags_of(&self, var: usize) -> Vec<usize> {
        self.0.iter().filter(|f| f.var == var).map(|f| f.lag).collect()
    }

    /// Every lag `1..=max_delay` of every auxiliary column (no selection).
    pub fn all_lags(ds: &Dataset, max_delay: usize) -> Self {
        ds.aux_indices()
            .flat_map(|var| (1..=max_delay).map(move |lag| FeatureId { var, lag }))
            .collect()
    }
}

impl FromIterator<FeatureId> for FeatureSet {
    fn from_iter<I: IntoIterator<Item = FeatureId>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a FeatureSet {
    type Item = &'a FeatureId;
    type IntoIter = std::collections::btree_set::Iter<'a, FeatureId>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Lagged design matrix: one row per KPI time label `l` in `d+1..=L`.
#[derive(Debug, Clone)]
pub struct SupervisedMatrix {
    pub features: Vec<FeatureId>,
    pub inputs: DMatrix<f64>,
    pub target: DVector<f64>,
    /// KPI time label of each row.
    pub labels: Vec<usize>,
    pub max_delay: usize,
}

impl SupervisedMatrix {
    pub fn n_rows(&self) -> usize {
        self.target.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    /// Rows `start..start+count` (0-based row positions).
    pub fn rows(&self, start: usize, count: usize) -> SupervisedMatrix {
        SupervisedMatrix {
            features: self.features.clone(),
            inputs: self.inputs.rows(start, count).clone_owned(),
            target: self.target.rows(start, count).clone_owned(),
            labels: self.labels[start..start + count].to_vec(),
            max_delay: self.max_delay,
        }
    }
}

pub fn build_supervised(ds: &Dataset, features: &FeatureSet, d: usize) -> Result<SupervisedMatrix> {
    if features.is_empty() {
        return Err(Error::Config("feature set is empty".into()));
    }
    for f in features {
        if f.lag < 1 || f.lag > d {
            return Err(Error::Config(format!(
                "feature {f} has lag outside 1..={d}"
            )));
        }
        if f.var >= ds.columns().len() || f.var == ds.kpi_index() {
            return Err(Error::Config(format!(
                "feature {f} does not refer to an auxiliary column"
            )));
        }
    }
    let len = ds.len();
    if len <= d {
        return Err(Error::TooShort {
            name: ds.kpi().name().to_string(),
            len,
            reason: format!("need more than max delay {d} points"),
        });
    }
    let feats: Vec<FeatureId> = features.iter().copied().collect();
    let labels: Vec<usize> = (d + 1..=len).collect();
    let inputs = DMatrix::from_fn(labels.len(), feats.len(), |r, c| {
        let f = feats[c];
        ds.column(f.var).at(labels[r] - f.lag)
    });
    let kpi = ds.kpi();
    let target = DVector::from_iterator(labels.len(), labels.iter().map(|&l| kpi.at(l)));
    Ok(SupervisedMatrix {
        features: feats,
        inputs,
        target,
        labels,
        max_delay: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(cols: &[(&str, Vec<f64>)], kpi: &str) -> Dataset {
        Dataset::from_columns(
            cols.iter()
                .map(|(n, v)| TimeSeries::new(*n, v.clone()).unwrap())
                .collect(),
            kpi,
        )
        .unwrap()
    }

    #[test]
    fn missing_kpi_is_named() {
        let csv = "A,B,C\n1,2,3\n4,5,6\n";
        let err = read_csv(csv.as_bytes(), "U8").unwrap_err();
        assert!(err.to_string().contains("U8"), "{err}");
    }

    #[test]
    fn bad_cell_reports_row() {
        let mut csv = String::from("A,B\n");
        for i in 1..=6 {
            if i == 5 {
                csv.push_str("1.0,abc\n");
            } else {
                csv.push_str(&format!("{i},{i}\n"));
            }
        }
        match read_csv(csv.as_bytes(), "B").unwrap_err() {
            Error::BadCell { row, column, .. } => {
                assert_eq!(row, 5);
                assert_eq!(column, "B");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_cell_is_an_error() {
        let csv = "A,B\n1,2\n3,\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), "A"),
            Err(Error::BadCell { row: 2, .. })
        ));
    }

    #[test]
    fn ragged_row() {
        let csv = "A,B\n1,2\n3\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), "A"),
            Err(Error::RaggedRow { row: 2, .. })
        ));
    }

    #[test]
    fn eight_column_file() {
        let mut csv = (1..=8).map(|i| format!("U{i}")).collect::<Vec<_>>().join(",");
        csv.push('\n');
        for t in 0..2194 {
            let row: Vec<String> = (0..8).map(|j| format!("{}", (t * (j + 1)) as f64 * 0.5)).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        let d = read_csv(csv.as_bytes(), "U8").unwrap();
        assert_eq!(d.aux_count(), 7);
        assert_eq!(d.len(), 2194);
        assert_eq!(d.kpi().name(), "U8");
        assert_eq!(d.kpi_index(), 7);
    }

    #[test]
    fn minmax_examples() {
        let d = ds(&[("a", vec![2.0, 4.0, 6.0]), ("b", vec![5.0, 5.0, 5.0])], "a");
        let (n, p) = normalize_minmax(&d);
        assert_eq!(n.column(0).values(), &[0.0, 0.5, 1.0]);
        assert_eq!(n.column(1).values(), &[0.0, 0.0, 0.0]);
        assert!(p.columns[1].constant);
        assert!(!p.columns[0].constant);
        assert_eq!(p.constant_columns(), vec!["b"]);
    }

    #[test]
    fn minmax_round_trip_and_idempotence() {
        let d = ds(
            &[
                ("a", vec![3.3, -1.7, 8.25, 0.001, 4.0]),
                ("b", vec![1e3, 2e3, -5e2, 7.5e2, 0.0]),
            ],
            "b",
        );
        let (n, p) = normalize_minmax(&d);
        let back = p.invert(&n).unwrap();
        for (c0, c1) in d.columns().iter().zip(back.columns()) {
            for (a, b) in c0.values().iter().zip(c1.values()) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
        let (n2, _) = normalize_minmax(&n);
        assert_eq!(n, n2);
    }

    #[test]
    fn split_reference_sizes() {
        let d = ds(&[("x", (0..1496).map(f64::from).collect())], "x");
        let s = chronological_split(&d, SplitSpec::new(1350, 1496)).unwrap();
        assert_eq!(s.train.len(), 1350);
        assert_eq!(s.validation.len(), 146);
        assert!(s.test.is_none());
        assert!(chronological_split(&d, SplitSpec::new(1496, 1496)).is_err());
        assert!(chronological_split(&d, SplitSpec::new(0, 10)).is_err());
        assert!(chronological_split(&d, SplitSpec::new(10, 1497)).is_err());
    }

    #[test]
    fn split_reassembles() {
        let vals: Vec<f64> = (0..40).map(|v| (v as f64).sin()).collect();
        let d = ds(&[("x", vals.clone())], "x");
        let s = chronological_split(&d, SplitSpec::new(20, 31)).unwrap();
        let mut joined = s.train.kpi().values().to_vec();
        joined.extend_from_slice(s.validation.kpi().values());
        joined.extend_from_slice(s.test.unwrap().kpi().values());
        assert_eq!(joined, vals);
    }

    #[test]
    fn supervised_tiny_indexing() {
        let d = ds(&[("Y", vec![10.0, 20.0, 30.0]), ("X", vec![1.0, 2.0, 3.0])], "X");
        let fs: FeatureSet = [FeatureId::new(0, 1)].into_iter().collect();
        let m = build_supervised(&d, &fs, 1).unwrap();
        assert_eq!(m.n_rows(), 2);
        assert_eq!(m.inputs[(0, 0)], 10.0);
        assert_eq!(m.target[0], 2.0);
        assert_eq!(m.inputs[(1, 0)], 20.0);
        assert_eq!(m.target[1], 3.0);
        assert_eq!(m.labels, vec![2, 3]);
    }

    #[test]
    fn supervised_reference_shapes() {
        let d = ds(
            &[
                ("U1", (0..1596).map(|v| v as f64).collect()),
                ("U8", (0..1596).map(|v| (v as f64) * 2.0).collect()),
            ],
            "U8",
        );
        let fs: FeatureSet = (7..=42).map(|g| FeatureId::new(0, g)).collect();
        let m = build_supervised(&d, &fs, 100).unwrap();
        assert_eq!(m.n_features(), 36);
        assert_eq!(m.n_rows(), 1496);
        assert_eq!(m.labels[0], 101);
        // U1 at lag 7 for label 101 is U1(94), value 93.
        assert_eq!(m.inputs[(0, 0)], 93.0);
    }

    #[test]
    fn supervised_rejects_bad_features() {
        let d = ds(&[("Y", vec![1.0; 5]), ("X", vec![1.0; 5])], "X");
        assert!(build_supervised(&d, &FeatureSet::new(), 2).is_err());
        let kpi_feature: FeatureSet = [FeatureId::new(1, 1)].into_iter().collect();
        assert!(build_supervised(&d, &kpi_feature, 2).is_err());
        let too_far: FeatureSet = [FeatureId::new(0, 3)].into_iter().collect();
        assert!(build_supervised(&d, &too_far, 2).is_err());
    }
}
