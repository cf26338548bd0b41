//! Gradient-boosted trees and the scores built on them.

pub mod gbdt;
pub mod metrics;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{ColumnKind, Schema, Table, TaskKind, Value};

pub use gbdt::{GbdtModel, GbdtParams, Labels};
pub use metrics::{accuracy, auc, macro_auc, r2};

/// Most categories one-hot encoded per column; the rest share one slot.
pub const CATEGORY_CAP: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum PredictorError {
    #[error("need at least 2 labeled rows, got {0}")]
    TooFewRows(usize),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("only one class present")]
    SingleClass,
    #[error("targets have zero variance")]
    ZeroVariance,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum EncodedColumn {
    Numeric { name: String, kind: ColumnKind },
    OneHot { name: String, categories: Vec<String>, other: bool },
}

/// Maps selected table columns to a dense numeric matrix. Missing numbers
/// become NaN; a missing category sets no slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    columns: Vec<(usize, EncodedColumn)>,
    width: usize,
}

impl Encoder {
    pub fn fit(table: &Table, columns: &[usize]) -> Self {
        let schema = table.schema();
        let mut out = Vec::with_capacity(columns.len());
        let mut width = 0;
        for &c in columns {
            let spec = &schema.columns()[c];
            let enc = match spec.kind() {
                ColumnKind::Numeric => {
                    width += 1;
                    EncodedColumn::Numeric {
                        name: spec.name.clone(),
                        kind: ColumnKind::Numeric,
                    }
                }
                ColumnKind::Categorical => {
                    let mut freq: BTreeMap<&str, usize> = spec.categories().iter().map(|s| (s.as_str(), 0)).collect();
                    for v in table.column(c) {
                        if let Value::Cat(s) = v {
                            *freq.entry(s.as_str()).or_default() += 1;
                        }
                    }
                    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
                    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
                    let other = ranked.len() > CATEGORY_CAP;
                    let mut categories: Vec<String> =
                        ranked.into_iter().take(CATEGORY_CAP).map(|(s, _)| s.to_string()).collect();
                    categories.sort();
                    width += categories.len() + usize::from(other);
                    EncodedColumn::OneHot {
                        name: spec.name.clone(),
                        categories,
                        other,
                    }
                }
            };
            out.push((c, enc));
        }
        Self { columns: out, width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn check(&self, schema: &Schema) -> Result<(), PredictorError> {
        for (c, enc) in &self.columns {
            let spec = schema
                .columns()
                .get(*c)
                .ok_or_else(|| PredictorError::SchemaMismatch(format!("no column {c}")))?;
            let (name, kind) = match enc {
                EncodedColumn::Numeric { name, kind } => (name, *kind),
                EncodedColumn::OneHot { name, .. } => (name, ColumnKind::Categorical),
            };
            if &spec.name != name || spec.kind() != kind {
                return Err(PredictorError::SchemaMismatch(format!("column {c} is `{}`", spec.name)));
            }
        }
        Ok(())
    }

    /// Row-major `rows × width` matrix.
    pub fn transform(&self, table: &Table) -> Result<Vec<f64>, PredictorError> {
        self.check(table.schema())?;
        let mut x = Vec::with_capacity(table.len() * self.width);
        for row in table.rows() {
            for (c, enc) in &self.columns {
                match enc {
                    EncodedColumn::Numeric { .. } => x.push(row[*c].as_num().unwrap_or(f64::NAN)),
                    EncodedColumn::OneHot { categories, other, .. } => {
                        let start = x.len();
                        x.resize(start + categories.len() + usize::from(*other), 0.0);
                        if let Value::Cat(s) = &row[*c] {
                            match categories.binary_search(s) {
                                Ok(k) => x[start + k] = 1.0,
                                Err(_) if *other => x[start + categories.len()] = 1.0,
                                Err(_) => {}
                            }
                        }
                    }
                }
            }
        }
        Ok(x)
    }
}

/// Target column of `table` as training labels; rows with a missing target
/// are reported as `None`.
pub fn table_labels(table: &Table) -> (Labels, Vec<bool>) {
    let schema = table.schema();
    let t = schema.target_index();
    let present: Vec<bool> = table.column(t).map(|v| !v.is_missing()).collect();
    let labels = match schema.task() {
        TaskKind::Regression => Labels::Real(table.column(t).filter_map(Value::as_num).collect()),
        TaskKind::BinClass => {
            let cats = schema.target().categories();
            Labels::Binary {
                y: table
                    .column(t)
                    .filter_map(Value::as_cat)
                    .map(|s| if s == cats[1] { 1.0 } else { 0.0 })
                    .collect(),
                classes: [cats[0].clone(), cats[1].clone()],
            }
        }
        TaskKind::MultiClass => {
            let cats = schema.target().categories();
            Labels::Multi {
                y: table
                    .column(t)
                    .filter_map(Value::as_cat)
                    .map(|s| cats.binary_search_by(|c| c.as_str().cmp(s)).unwrap_or(0))
                    .collect(),
                classes: cats.to_vec(),
            }
        }
    };
    (labels, present)
}

/// Fits a predictor of the schema target from every other column.
pub fn fit_table(table: &Table, params: &GbdtParams) -> Result<GbdtModel, PredictorError> {
    let labeled: Vec<usize> = (0..table.len())
        .filter(|&i| !table.rows()[i][table.schema().target_index()].is_missing())
        .collect();
    let table = if labeled.len() == table.len() {
        table.clone()
    } else {
        table.select(&labeled)
    };
    let (labels, _) = table_labels(&table);
    GbdtModel::fit(&table, &table.schema().feature_indices(), labels, params)
}

/// Replaces the target of every synthetic row with the prediction of a model
/// fit on `real_train`. Feature cells are untouched.
pub fn relabel(syn: &Table, real_train: &Table, params: &GbdtParams) -> Result<Table, PredictorError> {
    syn.schema()
        .compatible_with(real_train.schema())
        .map_err(|e| PredictorError::SchemaMismatch(e.to_string()))?;
    if syn.is_empty() {
        return Ok(syn.clone());
    }
    let model = fit_table(real_train, params)?;
    let predicted = model.predict_values(syn)?;
    let t = syn.schema().target_index();
    let rows = syn
        .rows()
        .iter()
        .zip(predicted)
        .map(|(row, v)| {
            let mut r = row.clone();
            r[t] = v;
            r
        })
        .collect();
    Ok(Table::new(syn.schema().clone(), rows).expect("relabeled rows keep the schema"))
}
