//! Quality and privacy measures for synthetic tables.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{self, auc, macro_auc, r2, GbdtModel, GbdtParams, Labels, PredictorError};
use crate::sampler::GenStats;
use crate::scalar::Scalar;
use crate::table::{ColumnKind, Schema, Table, TableError, TaskKind, Value};

pub const DCR_BINS: usize = 50;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("reference table is empty")]
    EmptyTrain,
    #[error("synthetic table is empty")]
    EmptySynthetic,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// AUC (binary), macro one-vs-rest AUC (multiclass) or R² (regression) of
/// `model` on the labeled rows of `test`.
pub fn task_score(model: &GbdtModel, test: &Table) -> Result<f64, EvalError> {
    let t = test.schema().target_index();
    let labeled: Vec<usize> = (0..test.len()).filter(|&i| !test.rows()[i][t].is_missing()).collect();
    let test = test.select(&labeled);
    let scores = model.predict_scores(&test)?;
    let (labels, _) = predictor::table_labels(&test);
    Ok(match labels {
        Labels::Binary { y, .. } => {
            let s: Vec<f64> = scores.iter().map(|s| s[0]).collect();
            let l: Vec<bool> = y.iter().map(|&v| v == 1.0).collect();
            auc(&s, &l)?
        }
        Labels::Multi { y, .. } => macro_auc(&scores, &y)?,
        Labels::Real(y) => {
            let p: Vec<f64> = scores.iter().map(|s| s[0]).collect();
            r2(&p, &y)?
        }
    })
}

/// Train on `syn_train`, score on `real_test`.
pub fn mle_score(syn_train: &Table, real_test: &Table, params: &GbdtParams) -> Result<f64, EvalError> {
    syn_train.schema().compatible_with(real_test.schema())?;
    if syn_train.is_empty() {
        return Err(EvalError::EmptySynthetic);
    }
    let model = predictor::fit_table(syn_train, params)?;
    task_score(&model, real_test)
}

/// Train on `real_train` followed by `syn`, score on `real_test`.
pub fn augment_score(real_train: &Table, syn: &Table, real_test: &Table, params: &GbdtParams) -> Result<f64, EvalError> {
    let joined = real_train.concat(syn)?;
    mle_score(&joined, real_test, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcrOptions {
    /// Divide numeric differences by the reference column's range.
    pub normalize: bool,
    pub include_target: bool,
}

impl Default for DcrOptions {
    fn default() -> Self {
        Self {
            normalize: false,
            include_target: true,
        }
    }
}

/// Mixed L1 / mismatch distance between two rows over `columns`.
/// `scale[c]` divides numeric differences.
pub fn record_distance(schema: &Schema, a: &[Value], b: &[Value], columns: &[usize], scale: &[f64]) -> f64 {
    let mut d = 0.0;
    for &c in columns {
        d += match (&a[c], &b[c]) {
            (Value::Missing, Value::Missing) => 0.0,
            (Value::Missing, _) | (_, Value::Missing) => 1.0,
            (Value::Num(x), Value::Num(y)) => (x - y).abs() / scale[c],
            (Value::Cat(x), Value::Cat(y)) => f64::from(u8::from(x != y)),
            _ => {
                debug_assert!(false, "kind mismatch in column {}", schema.columns()[c].name);
                1.0
            }
        };
    }
    d
}

/// Distance from every synthetic row to its closest reference row.
pub fn dcr(syn: &Table, real_train: &Table, opts: DcrOptions) -> Result<Vec<f64>, EvalError> {
    syn.schema().compatible_with(real_train.schema())?;
    if real_train.is_empty() {
        return Err(EvalError::EmptyTrain);
    }
    let schema = real_train.schema();
    let columns: Vec<usize> = if opts.include_target {
        (0..schema.len()).collect()
    } else {
        schema.feature_indices()
    };
    let mut scale = vec![1.0; schema.len()];
    if opts.normalize {
        for (c, spec) in schema.columns().iter().enumerate() {
            if spec.kind() == ColumnKind::Numeric {
                let (lo, hi) = real_train
                    .column(c)
                    .filter_map(Value::as_num)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                if hi > lo {
                    scale[c] = hi - lo;
                }
            }
        }
    }
    Ok(syn
        .rows()
        .par_iter()
        .map(|s| {
            real_train
                .rows()
                .iter()
                .map(|r| record_distance(schema, s, r, &columns, &scale))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

/// Equal-width histogram over `[min, max]` of `values`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistBin> {
    let bins = bins.max(1);
    if values.is_empty() {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistBin> = (0..bins)
        .map(|k| HistBin {
            start: lo + k as f64 * width,
            end: if k + 1 == bins { hi } else { lo + (k + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &v in values {
        let k = (((v - lo) / width).floor() as usize).min(bins - 1);
        out[k].count += 1;
    }
    out
}

pub fn write_histogram_csv<W: Write>(bins: &[HistBin], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_start", "bin_end", "count"])
        .map_err(|e| EvalError::Io(e.into()))?;
    for b in bins {
        w.write_record([b.start.to_string(), b.end.to_string(), b.count.to_string()])
            .map_err(|e| EvalError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_histogram_csv_file(bins: &[HistBin], path: impl AsRef<Path>) -> Result<(), EvalError> {
    write_histogram_csv(bins, std::fs::File::create(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discrimination {
    pub accuracy: f64,
    /// Rows taken from each side of the test set.
    pub test_rows_per_side: usize,
}

/// Accuracy of a real-vs-synthetic classifier trained on every column.
/// The larger test side is truncated to the size of the smaller one.
pub fn discriminator_score(
    real_train: &Table,
    syn_train: &Table,
    real_test: &Table,
    syn_test: &Table,
    params: &GbdtParams,
) -> Result<Discrimination, EvalError> {
    let train = real_train.concat(syn_train)?;
    let y: Vec<f64> = std::iter::repeat(1.0)
        .take(real_train.len())
        .chain(std::iter::repeat(0.0).take(syn_train.len()))
        .collect();
    let labels = Labels::Binary {
        y,
        classes: ["synthetic".into(), "real".into()],
    };
    let columns: Vec<usize> = (0..train.schema().len()).collect();
    let model = GbdtModel::fit(&train, &columns, labels, params)?;
    let m = real_test.len().min(syn_test.len());
    if m == 0 {
        return Err(EvalError::EmptySynthetic);
    }
    let idx: Vec<usize> = (0..m).collect();
    let test = real_test.select(&idx).concat(&syn_test.select(&idx))?;
    let p = model.predict_proba(&test)?;
    let correct = p
        .iter()
        .enumerate()
        .filter(|&(i, &p)| (p >= 0.5) == (i < m))
        .count();
    Ok(Discrimination {
        accuracy: correct as f64 / (2 * m) as f64,
        test_rows_per_side: m,
    })
}

/// Pearson correlation with population moments; 0 when either side is
/// constant.
pub fn pearson<F: Scalar>(x: &[F], y: &[F]) -> Result<F, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Ok(F::zero());
    }
    let n = F::lit(x.len() as f64);
    let mx = x.iter().copied().sum::<F>() / n;
    let my = y.iter().copied().sum::<F>() / n;
    let mut sxy = F::zero();
    let mut sxx = F::zero();
    let mut syy = F::zero();
    for (&a, &b) in x.iter().zip(y) {
        sxy = sxy + (a - mx) * (b - my);
        sxx = sxx + (a - mx) * (a - mx);
        syy = syy + (b - my) * (b - my);
    }
    if sxx == F::zero() || syy == F::zero() {
        return Ok(F::zero());
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(r.max(-F::one()).min(F::one()))
}

fn entropy<F: Scalar>(counts: impl Iterator<Item = usize>, n: usize) -> F {
    let n = F::lit(n as f64);
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = F::lit(c as f64) / n;
            -p * p.ln()
        })
        .sum()
}

/// Uncertainty coefficient U(x|y): the share of x's entropy explained by y.
/// 1 when x is constant.
pub fn theil_u<T: Ord, F: Scalar>(x: &[T], y: &[T]) -> Result<F, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    let mut cx: BTreeMap<&T, usize> = BTreeMap::new();
    let mut cy: BTreeMap<&T, usize> = BTreeMap::new();
    let mut cxy: BTreeMap<(&T, &T), usize> = BTreeMap::new();
    for (a, b) in x.iter().zip(y) {
        *cx.entry(a).or_default() += 1;
        *cy.entry(b).or_default() += 1;
        *cxy.entry((a, b)).or_default() += 1;
    }
    let hx: F = entropy(cx.values().copied(), n);
    if hx == F::zero() {
        return Ok(F::one());
    }
    let nf = F::lit(n as f64);
    let mut hxy = F::zero();
    for (&(_, b), &c) in &cxy {
        let pxy = F::lit(c as f64) / nf;
        let py = F::lit(cy[b] as f64) / nf;
        hxy = hxy - pxy * (pxy / py).ln();
    }
    let u = (hx - hxy) / hx;
    Ok(u.max(F::zero()).min(F::one()))
}

/// Correlation ratio η of a numeric variable given a categorical one;
/// 0 when the numbers are constant.
pub fn correlation_ratio<T: Ord, F: Scalar>(cat: &[T], num: &[F]) -> Result<F, EvalError> {
    if cat.len() != num.len() {
        return Err(EvalError::LengthMismatch(cat.len(), num.len()));
    }
    if num.is_empty() {
        return Ok(F::zero());
    }
    let n = F::lit(num.len() as f64);
    let mean = num.iter().copied().sum::<F>() / n;
    let mut groups: BTreeMap<&T, (F, usize)> = BTreeMap::new();
    for (c, &v) in cat.iter().zip(num) {
        let g = groups.entry(c).or_insert((F::zero(), 0));
        g.0 = g.0 + v;
        g.1 += 1;
    }
    let between: F = groups
        .values()
        .map(|&(s, k)| {
            let kf = F::lit(k as f64);
            let d = s / kf - mean;
            kf * d * d
        })
        .sum();
    let total: F = num.iter().map(|&v| (v - mean) * (v - mean)).sum();
    if total == F::zero() {
        return Ok(F::zero());
    }
    Ok((between / total).sqrt().min(F::one()))
}

fn pair_nums(table: &Table, a: usize, b: usize) -> (Vec<f64>, Vec<f64>) {
    table
        .rows()
        .iter()
        .filter_map(|r| Some((r[a].as_num()?, r[b].as_num()?)))
        .unzip()
}

fn pair_cats(table: &Table, a: usize, b: usize) -> (Vec<&str>, Vec<&str>) {
    table
        .rows()
        .iter()
        .filter_map(|r| Some((r[a].as_cat()?, r[b].as_cat()?)))
        .unzip()
}

fn cat_num(table: &Table, c: usize, v: usize) -> (Vec<&str>, Vec<f64>) {
    table
        .rows()
        .iter()
        .filter_map(|r| Some((r[c].as_cat()?, r[v].as_num()?)))
        .unzip()
}

/// Pairwise association over all columns (rows where both cells are present):
/// Pearson between numbers, U(row|col) between categories, η between a
/// category and a number (both cells). Diagonal 1.
pub fn association_matrix(table: &Table) -> Vec<Vec<f64>> {
    let schema = table.schema();
    let k = schema.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        m[i][i] = 1.0;
        for j in 0..k {
            if i == j {
                continue;
            }
            let ki = schema.columns()[i].kind();
            let kj = schema.columns()[j].kind();
            m[i][j] = match (ki, kj) {
                (ColumnKind::Numeric, ColumnKind::Numeric) => {
                    let (x, y) = pair_nums(table, i, j);
                    pearson(&x, &y).unwrap_or(0.0)
                }
                (ColumnKind::Categorical, ColumnKind::Categorical) => {
                    let (x, y) = pair_cats(table, i, j);
                    theil_u(&x, &y).unwrap_or(0.0)
                }
                (ColumnKind::Categorical, ColumnKind::Numeric) => {
                    let (c, v) = cat_num(table, i, j);
                    correlation_ratio(&c, &v).unwrap_or(0.0)
                }
                (ColumnKind::Numeric, ColumnKind::Categorical) => {
                    let (c, v) = cat_num(table, j, i);
                    correlation_ratio(&c, &v).unwrap_or(0.0)
                }
            };
        }
    }
    m
}

/// Frobenius norm of the difference of the two association matrices.
pub fn correlation_distance(real: &Table, syn: &Table) -> Result<f64, EvalError> {
    real.schema().compatible_with(syn.schema())?;
    let a = association_matrix(real);
    let b = association_matrix(syn);
    Ok(a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcrSummary {
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
    /// Share of synthetic rows that copy a training row exactly.
    pub exact_copy_fraction: f64,
}

impl DcrSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        Some(Self {
            min: v[0],
            median,
            mean: v.iter().sum::<f64>() / n as f64,
            max: v[n - 1],
            exact_copy_fraction: v.iter().filter(|&&d| d == 0.0).count() as f64 / n as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    /// Score of a model trained on the real training rows.
    pub baseline: f64,
    pub mle: f64,
    pub augmentation: f64,
    pub dcr: DcrSummary,
    pub dcr_options: DcrOptions,
    pub dcr_histogram: Vec<HistBin>,
    pub discriminator: Discrimination,
    pub correlation_distance: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generation: Option<GenStats>,
}
