//! Estimation inputs: the data model, CSV ingestion and structural checks.
//!
//! A [`DataSet`] holds the outcome `y`, the endogenous regressors, the included
//! exogenous regressors and the excluded instruments, all sharing the same row
//! count. Regressor order is always endogenous first, then exogenous.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column name used for a constant term added through [`DatasetSchema::intercept`].
pub const INTERCEPT_COLUMN: &str = "const";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: column `{0}` not found in header")]
    MissingColumn(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: `{value}` is not a finite number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("invalid data: {}", join_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
}

fn join_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// One violated structural invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    Empty,
    RowMismatch {
        block: &'static str,
        rows: usize,
        expected: usize,
    },
    NoEndogenous,
    TooFewObservations {
        n: usize,
        regressors: usize,
    },
    OrderCondition {
        instruments: usize,
        endogenous: usize,
    },
    NonFinite {
        block: &'static str,
        row: usize,
        column: usize,
    },
    ClusterLength {
        labels: usize,
        expected: usize,
    },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::Empty => write!(f, "dimension: data set has no rows"),
            Diagnostic::RowMismatch {
                block,
                rows,
                expected,
            } => write!(f, "dimension: {block} has {rows} rows, expected {expected}"),
            Diagnostic::NoEndogenous => write!(f, "dimension: no endogenous regressor"),
            Diagnostic::TooFewObservations { n, regressors } => write!(
                f,
                "dimension: {n} observations do not exceed {regressors} regressors"
            ),
            Diagnostic::OrderCondition {
                instruments,
                endogenous,
            } => write!(
                f,
                "order condition: {instruments} instruments for {endogenous} endogenous regressors"
            ),
            Diagnostic::NonFinite { block, row, column } => {
                write!(
                    f,
                    "non-finite value in {block} at row {row}, column {column}"
                )
            }
            Diagnostic::ClusterLength { labels, expected } => {
                write!(f, "dimension: {labels} cluster labels for {expected} rows")
            }
        }
    }
}

/// Role of a CSV column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnRole {
    Outcome,
    Endogenous,
    Exogenous,
    Instrument,
    Cluster,
}

/// Maps CSV header names onto estimation roles. Instrument and regressor
/// order follows the order of the lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub outcome: String,
    pub endogenous: Vec<String>,
    #[serde(default)]
    pub exogenous: Vec<String>,
    pub instruments: Vec<String>,
    #[serde(default)]
    pub cluster: Option<String>,
    /// Append a constant column to the exogenous regressors.
    #[serde(default)]
    pub intercept: bool,
}

impl DatasetSchema {
    /// Builds a schema from `(header, role)` pairs, keeping pair order within each role.
    pub fn from_roles<I, S>(roles: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = (S, ColumnRole)>,
        S: Into<String>,
    {
        let mut outcome = Vec::new();
        let mut endogenous = Vec::new();
        let mut exogenous = Vec::new();
        let mut instruments = Vec::new();
        let mut cluster = Vec::new();
        for (name, role) in roles {
            let name = name.into();
            match role {
                ColumnRole::Outcome => outcome.push(name),
                ColumnRole::Endogenous => endogenous.push(name),
                ColumnRole::Exogenous => exogenous.push(name),
                ColumnRole::Instrument => instruments.push(name),
                ColumnRole::Cluster => cluster.push(name),
            }
        }
        if outcome.len() != 1 {
            return Err(DataError::Schema(format!(
                "expected exactly one outcome column, found {}",
                outcome.len()
            )));
        }
        if cluster.len() > 1 {
            return Err(DataError::Schema("at most one cluster column".into()));
        }
        let schema = DatasetSchema {
            outcome: outcome.remove(0),
            endogenous,
            exogenous,
            instruments,
            cluster: cluster.pop(),
            intercept: false,
        };
        schema.check()?;
        Ok(schema)
    }

    /// Role of a header name, if the schema assigns one.
    pub fn role_of(&self, name: &str) -> Option<ColumnRole> {
        if self.outcome == name {
            Some(ColumnRole::Outcome)
        } else if self.endogenous.iter().any(|c| c == name) {
            Some(ColumnRole::Endogenous)
        } else if self.exogenous.iter().any(|c| c == name) {
            Some(ColumnRole::Exogenous)
        } else if self.instruments.iter().any(|c| c == name) {
            Some(ColumnRole::Instrument)
        } else if self.cluster.as_deref() == Some(name) {
            Some(ColumnRole::Cluster)
        } else {
            None
        }
    }

    /// Structural checks on the role assignment itself.
    pub fn check(&self) -> Result<(), DataError> {
        if self.endogenous.is_empty() {
            return Err(DataError::Schema(
                "at least one endogenous column required".into(),
            ));
        }
        if self.instruments.len() < self.endogenous.len() {
            return Err(DataError::Schema(format!(
                "{} instruments for {} endogenous columns",
                self.instruments.len(),
                self.endogenous.len()
            )));
        }
        let mut seen = HashSet::new();
        let all = std::iter::once(&self.outcome)
            .chain(&self.endogenous)
            .chain(&self.exogenous)
            .chain(&self.instruments)
            .chain(self.cluster.iter());
        for name in all {
            if !seen.insert(name.as_str()) {
                return Err(DataError::Schema(format!("column `{name}` assigned twice")));
            }
        }
        if self.intercept && self.exogenous.iter().any(|c| c == INTERCEPT_COLUMN) {
            return Err(DataError::Schema(format!(
                "intercept requested but `{INTERCEPT_COLUMN}` is already an exogenous column"
            )));
        }
        Ok(())
    }
}

/// Header names carried alongside the numeric blocks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ColumnNames {
    pub outcome: String,
    pub endogenous: Vec<String>,
    pub exogenous: Vec<String>,
    pub instruments: Vec<String>,
}

impl ColumnNames {
    fn generic(d1: usize, d2: usize, k: usize) -> Self {
        ColumnNames {
            outcome: "y".into(),
            endogenous: (1..=d1).map(|j| format!("Y{j}")).collect(),
            exogenous: (1..=d2).map(|j| format!("x{j}")).collect(),
            instruments: (1..=k).map(|j| format!("z{j}")).collect(),
        }
    }

    /// Regressor names, endogenous first.
    pub fn regressors(&self) -> Vec<String> {
        self.endogenous
            .iter()
            .chain(&self.exogenous)
            .cloned()
            .collect()
    }
}

/// Cluster membership: group ids `0..G` in first-appearance order of the labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLabels {
    pub ids: Vec<usize>,
    pub labels: Vec<String>,
}

impl ClusterLabels {
    pub fn from_labels<S: AsRef<str>>(raw: &[S]) -> Self {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut labels = Vec::new();
        let ids = raw
            .iter()
            .map(|s| {
                let s = s.as_ref();
                *index.entry(s).or_insert_with(|| {
                    labels.push(s.to_string());
                    labels.len() - 1
                })
            })
            .collect();
        ClusterLabels { ids, labels }
    }

    pub fn group_count(&self) -> usize {
        self.labels.len()
    }
}

/// Validated estimation data. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    y: DVector<f64>,
    endogenous: DMatrix<f64>,
    exogenous: DMatrix<f64>,
    instruments: DMatrix<f64>,
    regressors: DMatrix<f64>,
    clusters: Option<ClusterLabels>,
    names: ColumnNames,
}

impl DataSet {
    /// Builds and validates a data set; every violated invariant is reported.
    pub fn new(
        y: DVector<f64>,
        endogenous: DMatrix<f64>,
        exogenous: DMatrix<f64>,
        instruments: DMatrix<f64>,
    ) -> Result<Self, DataError> {
        let ds = Self::from_parts(y, endogenous, exogenous, instruments);
        ds.validated()
    }

    /// Assembles a data set without checking it. Use [`DataSet::validate`]
    /// to obtain the diagnostics.
    pub fn from_parts(
        y: DVector<f64>,
        endogenous: DMatrix<f64>,
        exogenous: DMatrix<f64>,
        instruments: DMatrix<f64>,
    ) -> Self {
        let names =
            ColumnNames::generic(endogenous.ncols(), exogenous.ncols(), instruments.ncols());
        let regressors = if endogenous.nrows() == exogenous.nrows() {
            let n = endogenous.nrows();
            let mut x = DMatrix::zeros(n, endogenous.ncols() + exogenous.ncols());
            x.columns_mut(0, endogenous.ncols()).copy_from(&endogenous);
            x.columns_mut(endogenous.ncols(), exogenous.ncols())
                .copy_from(&exogenous);
            x
        } else {
            DMatrix::zeros(0, 0)
        };
        DataSet {
            y,
            endogenous,
            exogenous,
            instruments,
            regressors,
            clusters: None,
            names,
        }
    }

    pub fn with_names(mut self, names: ColumnNames) -> Result<Self, DataError> {
        if names.endogenous.len() != self.d1()
            || names.exogenous.len() != self.d2()
            || names.instruments.len() != self.instrument_count()
        {
            return Err(DataError::Schema(
                "column names do not match block widths".into(),
            ));
        }
        self.names = names;
        Ok(self)
    }

    pub fn with_clusters(mut self, clusters: ClusterLabels) -> Result<Self, DataError> {
        self.clusters = Some(clusters);
        self.validated()
    }

    fn validated(self) -> Result<Self, DataError> {
        let diags = self.validate();
        if diags.is_empty() {
            Ok(self)
        } else {
            Err(DataError::Invalid(diags))
        }
    }

    /// All structural invariant violations; empty when the data set is usable.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let n = self.y.len();
        if n == 0 {
            out.push(Diagnostic::Empty);
        }
        for (block, rows) in [
            ("endogenous", self.endogenous.nrows()),
            ("exogenous", self.exogenous.nrows()),
            ("instruments", self.instruments.nrows()),
        ] {
            if rows != n {
                out.push(Diagnostic::RowMismatch {
                    block,
                    rows,
                    expected: n,
                });
            }
        }
        if self.d1() == 0 {
            out.push(Diagnostic::NoEndogenous);
        }
        if n > 0 && n <= self.d() {
            out.push(Diagnostic::TooFewObservations {
                n,
                regressors: self.d(),
            });
        }
        if self.instrument_count() < self.d1() {
            out.push(Diagnostic::OrderCondition {
                instruments: self.instrument_count(),
                endogenous: self.d1(),
            });
        }
        let y_block = DMatrix::from_column_slice(n, 1, self.y.as_slice());
        for (block, m) in [
            ("outcome", &y_block),
            ("endogenous", &self.endogenous),
            ("exogenous", &self.exogenous),
            ("instruments", &self.instruments),
        ] {
            if let Some((row, column)) = first_non_finite(m) {
                out.push(Diagnostic::NonFinite { block, row, column });
            }
        }
        if let Some(c) = &self.clusters {
            if c.ids.len() != n {
                out.push(Diagnostic::ClusterLength {
                    labels: c.ids.len(),
                    expected: n,
                });
            }
        }
        out
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of endogenous regressors.
    pub fn d1(&self) -> usize {
        self.endogenous.ncols()
    }

    /// Number of included exogenous regressors.
    pub fn d2(&self) -> usize {
        self.exogenous.ncols()
    }

    pub fn d(&self) -> usize {
        self.d1() + self.d2()
    }

    /// Number of excluded instruments `K`.
    pub fn instrument_count(&self) -> usize {
        self.instruments.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn endogenous(&self) -> &DMatrix<f64> {
        &self.endogenous
    }

    pub fn exogenous(&self) -> &DMatrix<f64> {
        &self.exogenous
    }

    pub fn instruments(&self) -> &DMatrix<f64> {
        &self.instruments
    }

    /// `X = [Y_endog, X_exog]`.
    pub fn regressors(&self) -> &DMatrix<f64> {
        &self.regressors
    }

    pub fn clusters(&self) -> Option<&ClusterLabels> {
        self.clusters.as_ref()
    }

    pub fn names(&self) -> &ColumnNames {
        &self.names
    }

    /// Copy with every outcome value multiplied by `c`.
    pub fn scale_outcome(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.y *= c;
        out
    }

    /// Copy with instrument columns reordered so that new column `j` is old
    /// column `order[j]`.
    pub fn permute_instruments(&self, order: &[usize]) -> Self {
        let mut out = self.clone();
        out.instruments = self.instruments.select_columns(order);
        out.names.instruments = order
            .iter()
            .map(|&j| self.names.instruments[j].clone())
            .collect();
        out
    }

    /// Copy restricted to the first `k` instruments, in order.
    pub fn leading_instruments(&self, k: usize) -> Self {
        let mut out = self.clone();
        out.instruments = self.instruments.columns(0, k).into_owned();
        out.names.instruments.truncate(k);
        out
    }

    /// Schema matching the layout produced by [`write_csv`].
    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            outcome: self.names.outcome.clone(),
            endogenous: self.names.endogenous.clone(),
            exogenous: self.names.exogenous.clone(),
            instruments: self.names.instruments.clone(),
            cluster: self.clusters.as_ref().map(|_| "cluster".to_string()),
            intercept: false,
        }
    }
}

fn first_non_finite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Some((i, j));
            }
        }
    }
    None
}

/// Reads a header-first CSV file into a validated [`DataSet`].
pub fn load_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<DataSet, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, schema)
}

/// Same as [`load_csv`] for any reader.
pub fn read_csv<R: std::io::Read>(reader: R, schema: &DatasetSchema) -> Result<DataSet, DataError> {
    schema.check()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let locate = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let outcome_col = locate(&schema.outcome)?;
    let endog_cols = schema
        .endogenous
        .iter()
        .map(|c| locate(c))
        .collect::<Result<Vec<_>, _>>()?;
    let exog_cols = schema
        .exogenous
        .iter()
        .map(|c| locate(c))
        .collect::<Result<Vec<_>, _>>()?;
    let inst_cols = schema
        .instruments
        .iter()
        .map(|c| locate(c))
        .collect::<Result<Vec<_>, _>>()?;
    let cluster_col = schema.cluster.as_deref().map(locate).transpose()?;

    let mut y = Vec::new();
    let mut endog = Vec::new();
    let mut exog = Vec::new();
    let mut inst = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let cell = |col: usize| -> Result<f64, DataError> {
            let raw = record.get(col).unwrap_or("").trim();
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(DataError::Parse {
                    row: row + 1,
                    column: headers.get(col).unwrap_or("").to_string(),
                    value: raw.to_string(),
                }),
            }
        };
        y.push(cell(outcome_col)?);
        for &c in &endog_cols {
            endog.push(cell(c)?);
        }
        for &c in &exog_cols {
            exog.push(cell(c)?);
        }
        if schema.intercept {
            exog.push(1.0);
        }
        for &c in &inst_cols {
            inst.push(cell(c)?);
        }
        if let Some(c) = cluster_col {
            labels.push(record.get(c).unwrap_or("").trim().to_string());
        }
    }
    let n = y.len();
    let d2 = exog_cols.len() + usize::from(schema.intercept);
    let mut exog_names = schema.exogenous.clone();
    if schema.intercept {
        exog_names.push(INTERCEPT_COLUMN.to_string());
    }
    let ds = DataSet::from_parts(
        DVector::from_vec(y),
        DMatrix::from_row_slice(n, endog_cols.len(), &endog),
        DMatrix::from_row_slice(n, d2, &exog),
        DMatrix::from_row_slice(n, inst_cols.len(), &inst),
    )
    .with_names(ColumnNames {
        outcome: schema.outcome.clone(),
        endogenous: schema.endogenous.clone(),
        exogenous: exog_names,
        instruments: schema.instruments.clone(),
    })?;
    let ds = ds.validated()?;
    if cluster_col.is_some() {
        ds.with_clusters(ClusterLabels::from_labels(&labels))
    } else {
        Ok(ds)
    }
}

/// Writes `ds` in the layout described by [`DataSet::schema`]. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv(ds: &DataSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_csv_to(ds, file)
}

pub fn write_csv_to<W: std::io::Write>(ds: &DataSet, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let schema = ds.schema();
    let mut header: Vec<String> = vec![schema.outcome.clone()];
    header.extend(schema.endogenous.iter().cloned());
    header.extend(schema.exogenous.iter().cloned());
    header.extend(schema.instruments.iter().cloned());
    if let Some(c) = &schema.cluster {
        header.push(c.clone());
    }
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        rec.push(ds.y[i].to_string());
        for m in [&ds.endogenous, &ds.exogenous, &ds.instruments] {
            rec.extend(m.row(i).iter().map(|v| v.to_string()));
        }
        if let Some(c) = &ds.clusters {
            rec.push(c.labels[c.ids[i]].clone());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: "<csv writer>".into(),
        source,
    })?;
    Ok(())
}
