//! CSV ingestion: column roles, the `positive(col)` outcome transform and
//! covariate scaling.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::ValueEnum;
use dpwate::CausalDataset;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path} has no header row or no data rows")]
    EmptyFile { path: PathBuf },
    #[error("column '{column}' is not in the header")]
    MissingColumn { column: String },
    #[error("row {row}, column '{column}': cannot parse '{value}' as a number")]
    NonNumericCell { row: usize, column: String, value: String },
    #[error("row {row}, column '{column}': treatment must be 0 or 1, got '{value}'")]
    InvalidTreatment { row: usize, column: String, value: String },
    #[error("row {row}, column '{column}': outcome {value} is outside [0, 1]; use positive({column}) for a binary transform")]
    OutcomeOutOfRange { row: usize, column: String, value: f64 },
    #[error("column '{column}' is constant, so min-max scaling is undefined")]
    ConstantColumn { column: String },
    #[error("invalid column spec '{0}'")]
    BadColumnSpec(String),
    #[error(transparent)]
    Dataset(#[from] dpwate::Error),
}

impl IngestError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "Io",
            Self::Csv(_) => "Csv",
            Self::EmptyFile { .. } => "EmptyFile",
            Self::MissingColumn { .. } => "MissingColumn",
            Self::NonNumericCell { .. } => "NonNumericCell",
            Self::InvalidTreatment { .. } => "InvalidTreatment",
            Self::OutcomeOutOfRange { .. } => "OutcomeOutOfRange",
            Self::ConstantColumn { .. } => "ConstantColumn",
            Self::BadColumnSpec(_) => "BadColumnSpec",
            Self::Dataset(_) => "InvalidDataset",
        }
    }
}

/// A column reference, optionally wrapped in `positive(...)`, which maps a
/// value to `1{value > 0}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnSpec {
    Plain(String),
    Positive(String),
}

impl ColumnSpec {
    pub fn name(&self) -> &str {
        match self {
            Self::Plain(n) | Self::Positive(n) => n,
        }
    }

    pub fn apply(&self, value: f64) -> f64 {
        match self {
            Self::Plain(_) => value,
            Self::Positive(_) => f64::from(u8::from(value > 0.0)),
        }
    }
}

impl FromStr for ColumnSpec {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let inner = s.strip_prefix("positive(").and_then(|r| r.strip_suffix(')'));
        let (name, positive) = match inner {
            Some(n) => (n.trim(), true),
            None => (s, false),
        };
        if name.is_empty() || name.contains(['(', ')']) {
            return Err(IngestError::BadColumnSpec(s.to_string()));
        }
        Ok(if positive { Self::Positive(name.to_string()) } else { Self::Plain(name.to_string()) })
    }
}

impl fmt::Display for ColumnSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Plain(n) => write!(f, "{n}"),
            Self::Positive(n) => write!(f, "positive({n})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roles {
    pub treatment: String,
    pub outcome: ColumnSpec,
    pub covariates: Vec<String>,
}

/// How covariates are brought into the unit ball.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Rescale {
    /// Rows must already lie in the unit ball.
    #[default]
    None,
    /// Each row is divided by `max(1, ||x||)`.
    Norm,
    /// Each column is mapped affinely onto `[0, 1/sqrt(d)]` using its sample
    /// range.
    MinMax,
}

/// Observed range of a covariate before min-max scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ColumnRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: CausalDataset,
    pub covariate_names: Vec<String>,
    /// Covariates in their original units.
    pub raw_covariates: DMatrix<f64>,
    /// Per-column ranges, present for [`Rescale::MinMax`].
    pub ranges: Option<Vec<ColumnRange>>,
}

pub fn ingest_csv(path: &Path, roles: &Roles, rescale: Rescale) -> Result<Ingested, IngestError> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io { path: path.to_path_buf(), source })?;
    ingest_reader(file, path, roles, rescale)
}

/// As [`ingest_csv`], reading from any source; `path` is used in messages.
pub fn ingest_reader<R: std::io::Read>(
    source: R,
    path: &Path,
    roles: &Roles,
    rescale: Rescale,
) -> Result<Ingested, IngestError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header = reader.headers()?.clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(IngestError::EmptyFile { path: path.to_path_buf() });
    }
    let locate = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn { column: name.to_string() })
    };
    let t_col = locate(&roles.treatment)?;
    let y_col = locate(roles.outcome.name())?;
    let x_cols = roles.covariates.iter().map(|c| locate(c)).collect::<Result<Vec<_>, _>>()?;

    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    let mut covariates = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |col: usize, name: &str| -> Result<f64, IngestError> {
            let text = record.get(col).unwrap_or("");
            text.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| IngestError::NonNumericCell { row, column: name.to_string(), value: text.to_string() })
        };
        let z = cell(t_col, &roles.treatment)?;
        if z != 0.0 && z != 1.0 {
            return Err(IngestError::InvalidTreatment {
                row,
                column: roles.treatment.clone(),
                value: record.get(t_col).unwrap_or("").to_string(),
            });
        }
        let y = roles.outcome.apply(cell(y_col, roles.outcome.name())?);
        if !(0.0..=1.0).contains(&y) {
            return Err(IngestError::OutcomeOutOfRange { row, column: roles.outcome.name().to_string(), value: y });
        }
        treatment.push(z);
        outcome.push(y);
        for (&col, name) in x_cols.iter().zip(&roles.covariates) {
            covariates.push(cell(col, name)?);
        }
    }
    if treatment.is_empty() {
        return Err(IngestError::EmptyFile { path: path.to_path_buf() });
    }

    let raw = DMatrix::from_row_slice(treatment.len(), x_cols.len(), &covariates);
    let (scaled, ranges) = match rescale {
        Rescale::MinMax => {
            let (m, r) = min_max(&raw, &roles.covariates)?;
            (m, Some(r))
        }
        _ => (raw.clone(), None),
    };
    let dataset = CausalDataset::validate(scaled, &treatment, &outcome, rescale == Rescale::Norm)?;
    Ok(Ingested { dataset, covariate_names: roles.covariates.clone(), raw_covariates: raw, ranges })
}

fn min_max(raw: &DMatrix<f64>, names: &[String]) -> Result<(DMatrix<f64>, Vec<ColumnRange>), IngestError> {
    let top = 1.0 / (raw.ncols().max(1) as f64).sqrt();
    let mut out = raw.clone();
    let mut ranges = Vec::with_capacity(raw.ncols());
    for (j, name) in names.iter().enumerate() {
        let col = raw.column(j);
        let (min, max) = (col.min(), col.max());
        if !(max > min) {
            return Err(IngestError::ConstantColumn { column: name.clone() });
        }
        // Clamping guards the last ulp so rows stay inside the unit ball.
        out.column_mut(j).apply(|v| *v = ((*v - min) / (max - min)).clamp(0.0, 1.0) * top);
        ranges.push(ColumnRange { min, max });
    }
    Ok((out, ranges))
}
