//! Typed in-memory tables: schemas, rows, CSV ingestion and dataset splits.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Significant digits used whenever a number is rendered as text.
pub const DEFAULT_SIG_DIGITS: u32 = 6;

/// Default ceiling on the fraction of missing cells a table may carry.
pub const DEFAULT_MAX_MISSING_FRACTION: f64 = 0.4;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("table has no header or no rows")]
    EmptyTable,
    #[error("target column `{0}` not found in header")]
    TargetNotFound(String),
    #[error("column `{0}` has no non-missing cells")]
    AllMissingColumn(String),
    #[error("row {row} has {found} cells, expected {expected}")]
    RaggedRow { row: usize, found: usize, expected: usize },
    #[error("invalid column name `{0}`: names must be nonempty and may not contain \" is \", \", \" or line breaks")]
    InvalidColumnName(String),
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("row {row}, column `{column}`: {reason}")]
    TypeMismatch { row: usize, column: String, reason: String },
    #[error("need at least 2 rows to split, got {0}")]
    TooFewRows(usize),
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("schemas differ: {0}")]
    SchemaMismatch(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnDomain {
    Numeric { min: f64, max: f64, sig_digits: u32 },
    /// Sorted, deduplicated category strings.
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub domain: ColumnDomain,
}

impl ColumnSpec {
    pub fn kind(&self) -> ColumnKind {
        match self.domain {
            ColumnDomain::Numeric { .. } => ColumnKind::Numeric,
            ColumnDomain::Categorical { .. } => ColumnKind::Categorical,
        }
    }

    pub fn categories(&self) -> &[String] {
        match &self.domain {
            ColumnDomain::Categorical { categories } => categories,
            ColumnDomain::Numeric { .. } => &[],
        }
    }

    pub fn sig_digits(&self) -> u32 {
        match self.domain {
            ColumnDomain::Numeric { sig_digits, .. } => sig_digits,
            ColumnDomain::Categorical { .. } => DEFAULT_SIG_DIGITS,
        }
    }

    pub fn contains_category(&self, value: &str) -> bool {
        self.categories()
            .binary_search_by(|c| c.as_str().cmp(value))
            .is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    BinClass,
    MultiClass,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    columns: Vec<ColumnSpec>,
    target_index: usize,
    task: TaskKind,
}

/// Rejects names that would make the "<name> is <value>" grammar ambiguous.
pub fn validate_column_name(name: &str) -> Result<(), TableError> {
    let bad = name.trim().is_empty()
        || name != name.trim()
        || name.contains(" is ")
        || name.ends_with(" is")
        || name.contains(',')
        || name.contains('\n')
        || name.contains('\r');
    if bad {
        return Err(TableError::InvalidColumnName(name.to_string()));
    }
    Ok(())
}

impl Schema {
    pub fn new(
        columns: Vec<ColumnSpec>,
        target_index: usize,
        task: TaskKind,
    ) -> Result<Self, TableError> {
        let mut seen = BTreeSet::new();
        for c in &columns {
            validate_column_name(&c.name)?;
            if !seen.insert(c.name.as_str()) {
                return Err(TableError::DuplicateColumn(c.name.clone()));
            }
            match &c.domain {
                ColumnDomain::Numeric { min, max, .. } => {
                    if !(min <= max) {
                        return Err(TableError::InvalidSchema(format!(
                            "column `{}` has min {min} > max {max}",
                            c.name
                        )));
                    }
                }
                ColumnDomain::Categorical { categories } => {
                    if categories.is_empty() {
                        return Err(TableError::InvalidSchema(format!(
                            "categorical column `{}` has an empty domain",
                            c.name
                        )));
                    }
                    if categories.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(TableError::InvalidSchema(format!(
                            "categories of `{}` must be sorted and distinct",
                            c.name
                        )));
                    }
                }
            }
        }
        let target = columns.get(target_index).ok_or_else(|| {
            TableError::InvalidSchema(format!("target index {target_index} out of range"))
        })?;
        let ok = match task {
            TaskKind::Regression => target.kind() == ColumnKind::Numeric,
            TaskKind::BinClass => target.categories().len() == 2,
            TaskKind::MultiClass => target.kind() == ColumnKind::Categorical,
        };
        if !ok {
            return Err(TableError::InvalidSchema(format!(
                "task {task:?} incompatible with target `{}`",
                target.name
            )));
        }
        Ok(Self {
            columns,
            target_index,
            task,
        })
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn target(&self) -> &ColumnSpec {
        &self.columns[self.target_index]
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    /// Indices of every non-target column in schema order.
    pub fn feature_indices(&self) -> Vec<usize> {
        (0..self.columns.len())
            .filter(|&i| i != self.target_index)
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Text form of a cell, `None` for missing values.
    pub fn render(&self, column: usize, value: &Value) -> Option<String> {
        match value {
            Value::Missing => None,
            Value::Num(v) => Some(format_number(*v, self.columns[column].sig_digits())),
            Value::Cat(s) => Some(s.clone()),
        }
    }

    /// Same column names and kinds in the same order, same target.
    pub fn compatible_with(&self, other: &Schema) -> Result<(), TableError> {
        if self.columns.len() != other.columns.len() {
            return Err(TableError::SchemaMismatch(format!(
                "{} columns vs {}",
                self.columns.len(),
                other.columns.len()
            )));
        }
        for (a, b) in self.columns.iter().zip(&other.columns) {
            if a.name != b.name || a.kind() != b.kind() {
                return Err(TableError::SchemaMismatch(format!(
                    "column `{}` ({:?}) vs `{}` ({:?})",
                    a.name,
                    a.kind(),
                    b.name,
                    b.kind()
                )));
            }
        }
        if self.target_index != other.target_index {
            return Err(TableError::SchemaMismatch("different target column".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Num(f64),
    Cat(String),
    Missing,
}

impl Value {
    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            Value::Cat(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(v) => write!(f, "{}", format_number(*v, DEFAULT_SIG_DIGITS)),
            Value::Cat(s) => f.write_str(s),
            Value::Missing => Ok(()),
        }
    }
}

pub type Row = Vec<Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    schema: Schema,
    rows: Vec<Row>,
}

impl Table {
    pub fn new(schema: Schema, rows: Vec<Row>) -> Result<Self, TableError> {
        for (i, row) in rows.iter().enumerate() {
            check_row(&schema, row, i)?;
        }
        Ok(Self { schema, rows })
    }

    pub fn empty(schema: Schema) -> Self {
        Self {
            schema,
            rows: Vec::new(),
        }
    }

    /// Converts raw string cells under a known schema.
    pub fn from_raw(schema: Schema, raw_rows: &[Vec<String>]) -> Result<Self, TableError> {
        let mut rows = Vec::with_capacity(raw_rows.len());
        for (i, raw) in raw_rows.iter().enumerate() {
            if raw.len() != schema.len() {
                return Err(TableError::RaggedRow {
                    row: i,
                    found: raw.len(),
                    expected: schema.len(),
                });
            }
            let mut row = Vec::with_capacity(raw.len());
            for (spec, cell) in schema.columns.iter().zip(raw) {
                row.push(if is_missing_cell(cell) {
                    Value::Missing
                } else {
                    match spec.kind() {
                        ColumnKind::Numeric => match parse_decimal(cell.trim()) {
                            Some(v) => Value::Num(v),
                            None => {
                                return Err(TableError::TypeMismatch {
                                    row: i,
                                    column: spec.name.clone(),
                                    reason: format!("`{cell}` is not numeric"),
                                })
                            }
                        },
                        ColumnKind::Categorical => Value::Cat(canonical_category(cell)),
                    }
                });
            }
            rows.push(row);
        }
        Ok(Self { schema, rows })
    }

    /// Infers the schema from raw cells and converts them.
    pub fn from_raw_inferred(
        header: &[String],
        raw_rows: &[Vec<String>],
        target_name: &str,
    ) -> Result<Self, TableError> {
        let schema = infer_schema(raw_rows, header, target_name)?;
        Self::from_raw(schema, raw_rows)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: Row) -> Result<(), TableError> {
        check_row(&self.schema, &row, self.rows.len())?;
        self.rows.push(row);
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> Table {
        Table {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Rows of `self` followed by rows of `other`; schemas must be compatible.
    pub fn concat(&self, other: &Table) -> Result<Table, TableError> {
        self.schema.compatible_with(&other.schema)?;
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().cloned());
        Ok(Table {
            schema: self.schema.clone(),
            rows,
        })
    }

    /// Replaces the schema by a compatible one (e.g. the training schema).
    pub fn with_schema(self, schema: Schema) -> Result<Table, TableError> {
        self.schema.compatible_with(&schema)?;
        Ok(Table {
            schema,
            rows: self.rows,
        })
    }

    pub fn column(&self, index: usize) -> impl Iterator<Item = &Value> + '_ {
        self.rows.iter().map(move |r| &r[index])
    }

    pub fn into_rows(self) -> Vec<Row> {
        self.rows
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TableError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.schema.columns.iter().map(|c| c.name.as_str()))?;
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, v)| self.schema.render(j, v).unwrap_or_default())
                .collect();
            w.write_record(&cells)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<(), TableError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn check_row(schema: &Schema, row: &Row, index: usize) -> Result<(), TableError> {
    if row.len() != schema.len() {
        return Err(TableError::RaggedRow {
            row: index,
            found: row.len(),
            expected: schema.len(),
        });
    }
    for (spec, v) in schema.columns.iter().zip(row) {
        let ok = match (spec.kind(), v) {
            (_, Value::Missing) => true,
            (ColumnKind::Numeric, Value::Num(x)) => x.is_finite(),
            (ColumnKind::Categorical, Value::Cat(_)) => true,
            _ => false,
        };
        if !ok {
            return Err(TableError::TypeMismatch {
                row: index,
                column: spec.name.clone(),
                reason: format!("value {v:?} does not match kind {:?}", spec.kind()),
            });
        }
    }
    Ok(())
}

/// Empty, `?`, `NA` and `nan` (any case) denote a missing cell.
pub fn is_missing_cell(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "?" || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

/// Parses a finite decimal literal; rejects `inf`, `nan` and friends.
pub fn parse_decimal(s: &str) -> Option<f64> {
    let first = s.chars().next()?;
    if !(first.is_ascii_digit() || first == '-' || first == '+' || first == '.') {
        return None;
    }
    if !s
        .chars()
        .all(|c| c.is_ascii_digit() || matches!(c, '-' | '+' | '.' | 'e' | 'E'))
    {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Canonical category text: trimmed, commas and line breaks replaced so the
/// clause grammar stays unambiguous.
pub fn canonical_category(cell: &str) -> String {
    cell.trim()
        .chars()
        .map(|c| match c {
            ',' => ';',
            '\n' | '\r' | '\t' => ' ',
            c => c,
        })
        .collect()
}

/// Renders `v` rounded to `sig` significant digits, never in exponent form.
pub fn format_number(v: f64, sig: u32) -> String {
    if v == 0.0 || !v.is_finite() {
        return "0".to_string();
    }
    let sig = sig.max(1) as usize;
    let rounded: f64 = format!("{:.*e}", sig - 1, v)
        .parse()
        .expect("formatted float parses");
    if rounded == 0.0 {
        return "0".to_string();
    }
    format!("{rounded}")
}

/// Value equality at display precision.
pub fn values_equal_at_precision(a: &Value, b: &Value, sig: u32) -> bool {
    match (a, b) {
        (Value::Num(x), Value::Num(y)) => format_number(*x, sig) == format_number(*y, sig),
        _ => a == b,
    }
}

pub fn infer_schema(
    raw_rows: &[Vec<String>],
    header: &[String],
    target_name: &str,
) -> Result<Schema, TableError> {
    if header.is_empty() || raw_rows.is_empty() {
        return Err(TableError::EmptyTable);
    }
    let target_index = header
        .iter()
        .position(|h| h.trim() == target_name)
        .ok_or_else(|| TableError::TargetNotFound(target_name.to_string()))?;
    for (i, r) in raw_rows.iter().enumerate() {
        if r.len() != header.len() {
            return Err(TableError::RaggedRow {
                row: i,
                found: r.len(),
                expected: header.len(),
            });
        }
    }
    let mut columns = Vec::with_capacity(header.len());
    for (j, name) in header.iter().enumerate() {
        let name = name.trim().to_string();
        let cells: Vec<&str> = raw_rows
            .iter()
            .map(|r| r[j].as_str())
            .filter(|c| !is_missing_cell(c))
            .collect();
        if cells.is_empty() {
            return Err(TableError::AllMissingColumn(name));
        }
        let numeric: Option<Vec<f64>> = cells.iter().map(|c| parse_decimal(c.trim())).collect();
        let domain = match numeric {
            Some(vals) => {
                let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                ColumnDomain::Numeric {
                    min,
                    max,
                    sig_digits: DEFAULT_SIG_DIGITS,
                }
            }
            None => {
                let set: BTreeSet<String> = cells.iter().map(|c| canonical_category(c)).collect();
                ColumnDomain::Categorical {
                    categories: set.into_iter().collect(),
                }
            }
        };
        columns.push(ColumnSpec { name, domain });
    }
    let target = &columns[target_index];
    let task = match target.kind() {
        ColumnKind::Numeric => TaskKind::Regression,
        ColumnKind::Categorical if target.categories().len() == 2 => TaskKind::BinClass,
        ColumnKind::Categorical => TaskKind::MultiClass,
    };
    Schema::new(columns, target_index, task)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Table,
    pub test: Table,
    pub seed: u64,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

pub fn split_dataset(
    table: &Table,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, TableError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(TableError::BadFraction(train_fraction));
    }
    let n = table.len();
    if n < 2 {
        return Err(TableError::TooFewRows(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * train_fraction).floor() as usize;
    let (tr, te) = order.split_at(n_train);
    Ok(DatasetSplit {
        train: table.select(tr),
        test: table.select(te),
        seed,
        train_indices: tr.to_vec(),
        test_indices: te.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissingCheck {
    pub accept: bool,
    pub fraction: f64,
}

/// Rejects a table whose missing-cell fraction strictly exceeds the threshold.
pub fn filter_missing(table: &Table, max_missing_fraction: f64) -> MissingCheck {
    let total = table.len() * table.schema().len();
    let missing = table
        .rows()
        .iter()
        .flatten()
        .filter(|v| v.is_missing())
        .count();
    let fraction = if total == 0 {
        0.0
    } else {
        missing as f64 / total as f64
    };
    MissingCheck {
        accept: fraction <= max_missing_fraction,
        fraction,
    }
}

/// Header plus raw string cells from RFC 4180 CSV.
pub fn read_csv<R: Read>(input: R) -> Result<(Vec<String>, Vec<Vec<String>>), TableError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

pub fn read_csv_file(
    path: impl AsRef<Path>,
) -> Result<(Vec<String>, Vec<Vec<String>>), TableError> {
    let f = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(f))
}
