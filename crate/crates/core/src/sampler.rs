//! Temperature sampling of rows from a trained model.
//!
//! Every attempt `k` draws from its own generator derived from the master
//! seed, so attempts can run in parallel and are consumed in index order:
//! the output never depends on thread count.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{clause, parse_sentence, prompt_joiner, ParseOptions, CLAUSE_SEPARATOR};
use crate::lm::{is_banned, LanguageModel, LmError};
use crate::partition::{PartitionError, PartitionPlan};
use crate::rng;
use crate::scalar::Scalar;
use crate::table::{canonical_category, format_number, parse_decimal, ColumnKind, Row, Schema, Table, Value};
use crate::tokenizer::{decode, Vocab, EOS};

pub const DEFAULT_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("max_attempt_factor must be at least 1")]
    InvalidAttemptFactor,
    #[error("non-finite logit at index {0}")]
    NonFiniteLogit(usize),
    #[error("no token has positive probability")]
    DegenerateDistribution,
    #[error("bad condition: {0}")]
    BadCondition(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Plan(#[from] PartitionError),
    #[error("only {} of {} rows generated after {} attempts", .0.table.len(), .0.stats.rows_requested, .0.stats.attempts)]
    YieldTooLow(Box<Generated>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub temperature: f64,
    /// Tokens sampled per sentence after the prefix.
    pub max_tokens: usize,
    pub max_attempt_factor: usize,
    pub seed: u64,
    /// Pinned `(column, value)` pairs placed in the prefix.
    pub condition: Vec<(String, String)>,
    /// Restrict clause starts to unseen column names of the active partition.
    pub guard: bool,
    pub closed_world: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: 256,
            max_attempt_factor: 10,
            seed: 0,
            condition: Vec::new(),
            guard: true,
            closed_world: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub rows_requested: usize,
    pub rows_delivered: usize,
    pub attempts: usize,
    /// Rejected attempts by reason.
    pub rejects: BTreeMap<String, usize>,
    pub mean_tokens_per_row: f64,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub table: Table,
    pub stats: GenStats,
}

/// Everything about the fine-tuned table the sampler needs.
#[derive(Debug, Clone, Copy)]
pub struct GenContext<'a> {
    pub schema: &'a Schema,
    pub vocab: &'a Vocab,
    pub prompt: &'a str,
    /// Training label frequencies, keyed by rendered value.
    pub label_counts: &'a [(String, u64)],
    /// Columns never missing in training.
    pub required: &'a [bool],
    pub label_first: bool,
}

/// `exp(z/T) / Σ exp(z'/T)`, evaluated after subtracting the maximum.
pub fn temperature_softmax<F: Scalar>(logits: &[F], temperature: F) -> Result<Vec<F>, SamplerError> {
    if !(temperature > F::zero() && temperature.is_finite()) {
        return Err(SamplerError::InvalidTemperature(temperature.as_f64()));
    }
    if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
        return Err(SamplerError::NonFiniteLogit(i));
    }
    if logits.is_empty() {
        return Err(SamplerError::DegenerateDistribution);
    }
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let s: F = e.iter().copied().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// Like [`temperature_softmax`] but `-inf` entries get probability zero.
pub fn masked_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>, SamplerError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(SamplerError::InvalidTemperature(temperature));
    }
    if let Some(i) = logits.iter().position(|z| z.is_nan() || *z == f64::INFINITY) {
        return Err(SamplerError::NonFiniteLogit(i));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(SamplerError::DegenerateDistribution);
    }
    let e: Vec<f64> = logits
        .iter()
        .map(|&z| if z.is_finite() { ((z - max) / temperature).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// Inverse-CDF draw from `probs` (which need not be normalized).
pub fn sample_next<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<u32, SamplerError> {
    let total: f64 = probs.iter().filter(|&&p| p > 0.0).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(SamplerError::DegenerateDistribution);
    }
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return Ok(i as u32);
            }
        }
    }
    Ok(last as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClausePos {
    Start,
    AfterName,
    AfterIs,
    InValue,
}

/// Token-level structure check for the clause body.
///
/// At a clause start only names of active, not yet emitted columns may
/// follow; a name must be followed by "is"; EOS waits for every required
/// active column; no new clause opens once every active column is present.
#[derive(Debug, Clone)]
pub struct ClauseGuard {
    body_start: usize,
    /// `(token id, column)` for every column name in the vocabulary.
    names: Vec<(u32, usize)>,
    active: Vec<bool>,
    required: Vec<bool>,
    is_id: Option<u32>,
    comma_id: Option<u32>,
}

impl ClauseGuard {
    /// `body_start` is the index of the first body token (after BOS and the
    /// prompt).
    pub fn new(schema: &Schema, vocab: &Vocab, active: &[usize], required: &[bool], body_start: usize) -> Self {
        let names = schema
            .columns()
            .iter()
            .enumerate()
            .filter_map(|(c, spec)| vocab.word_id(&spec.name).map(|id| (id, c)))
            .collect();
        let mut act = vec![false; schema.len()];
        for &c in active {
            act[c] = true;
        }
        Self {
            body_start,
            names,
            active: act,
            required: required.to_vec(),
            is_id: vocab.word_id(crate::tokenizer::IS_WORD),
            comma_id: vocab.comma_id(),
        }
    }

    fn column_of(&self, id: u32) -> Option<usize> {
        self.names.iter().find(|(t, _)| *t == id).map(|&(_, c)| c)
    }

    fn scan(&self, ids: &[u32]) -> (ClausePos, Vec<bool>) {
        let mut emitted = vec![false; self.active.len()];
        let mut pos = ClausePos::Start;
        for &id in ids.get(self.body_start..).unwrap_or(&[]) {
            pos = match pos {
                ClausePos::Start => {
                    if let Some(c) = self.column_of(id) {
                        emitted[c] = true;
                        ClausePos::AfterName
                    } else {
                        ClausePos::InValue
                    }
                }
                ClausePos::AfterName if Some(id) == self.is_id => ClausePos::AfterIs,
                ClausePos::AfterName | ClausePos::AfterIs => ClausePos::InValue,
                ClausePos::InValue if Some(id) == self.comma_id => ClausePos::Start,
                ClausePos::InValue => ClausePos::InValue,
            };
        }
        (pos, emitted)
    }

    /// Sets the logits of disallowed continuations of `ids` to `-inf`.
    pub fn apply(&self, ids: &[u32], logits: &mut [f64]) {
        let (pos, emitted) = self.scan(ids);
        let ban = |logits: &mut [f64], id: Option<u32>| {
            if let Some(z) = id.and_then(|i| logits.get_mut(i as usize)) {
                *z = f64::NEG_INFINITY;
            }
        };
        match pos {
            ClausePos::Start => {
                let mut allowed = vec![false; logits.len()];
                for &(id, c) in &self.names {
                    if self.active[c] && !emitted[c] {
                        if let Some(a) = allowed.get_mut(id as usize) {
                            *a = true;
                        }
                    }
                }
                for (z, ok) in logits.iter_mut().zip(allowed) {
                    if !ok {
                        *z = f64::NEG_INFINITY;
                    }
                }
            }
            ClausePos::AfterName => {
                for (i, z) in logits.iter_mut().enumerate() {
                    if Some(i as u32) != self.is_id {
                        *z = f64::NEG_INFINITY;
                    }
                }
            }
            ClausePos::AfterIs => {
                ban(logits, Some(EOS));
                ban(logits, self.comma_id);
            }
            ClausePos::InValue => {
                let pending = |need: &dyn Fn(usize) -> bool| {
                    (0..self.active.len()).any(|c| self.active[c] && !emitted[c] && need(c))
                };
                if pending(&|c| self.required.get(c).copied().unwrap_or(false)) {
                    ban(logits, Some(EOS));
                }
                if !pending(&|_| true) {
                    ban(logits, self.comma_id);
                }
            }
        }
    }
}

/// Samples tokens after `prefix` until EOS or `max_tokens` new tokens.
pub fn generate_sentence<M: LanguageModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    prefix: &[u32],
    cfg: &GenConfig,
    rng: &mut R,
    guard: Option<&ClauseGuard>,
) -> Result<Vec<u32>, SamplerError> {
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(SamplerError::InvalidTemperature(cfg.temperature));
    }
    let mut ids = prefix.to_vec();
    for _ in 0..cfg.max_tokens {
        let mut logits = model.next_logits(&ids)?;
        for (i, z) in logits.iter_mut().enumerate() {
            if is_banned(i as u32) {
                *z = f64::NEG_INFINITY;
            }
        }
        if let Some(g) = guard {
            g.apply(&ids, &mut logits);
        }
        let probs = masked_softmax(&logits, cfg.temperature)?;
        let tok = sample_next(&probs, rng)?;
        ids.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(ids)
}

/// Generates `n` rows, each prefixed by the prompt and a label clause.
pub fn generate_rows<M: LanguageModel + Sync>(
    model: &M,
    ctx: &GenContext<'_>,
    n: usize,
    cfg: &GenConfig,
) -> Result<Generated, SamplerError> {
    generate_with_plan(model, ctx, &PartitionPlan::single(ctx.schema), n, cfg)
}

fn resolve_conditions(schema: &Schema, cfg: &GenConfig) -> Result<Vec<(usize, String)>, SamplerError> {
    let mut out: Vec<(usize, String)> = Vec::new();
    for (name, raw) in &cfg.condition {
        let c = schema
            .index_of(name)
            .ok_or_else(|| SamplerError::BadCondition(format!("unknown column `{name}`")))?;
        if out.iter().any(|(k, _)| *k == c) {
            return Err(SamplerError::BadCondition(format!("column `{name}` pinned twice")));
        }
        let spec = &schema.columns()[c];
        let text = match spec.kind() {
            ColumnKind::Numeric => {
                let v = parse_decimal(raw.trim())
                    .ok_or_else(|| SamplerError::BadCondition(format!("`{raw}` is not a number")))?;
                format_number(v, spec.sig_digits())
            }
            ColumnKind::Categorical => {
                let v = canonical_category(raw);
                if cfg.closed_world && !spec.contains_category(&v) {
                    return Err(SamplerError::BadCondition(format!("`{v}` is not a category of `{name}`")));
                }
                v
            }
        };
        out.push((c, text));
    }
    Ok(out)
}

fn draw_label<R: Rng + ?Sized>(counts: &[(String, u64)], rng: &mut R) -> Option<String> {
    let total: u64 = counts.iter().map(|(_, k)| k).sum();
    if total == 0 {
        return None;
    }
    let mut u = rng.gen_range(0..total);
    for (v, k) in counts {
        if u < *k {
            return Some(v.clone());
        }
        u -= k;
    }
    None
}

type Attempt = Result<(Row, usize), String>;

struct Engine<'a, M> {
    model: &'a M,
    ctx: &'a GenContext<'a>,
    plan: &'a PartitionPlan,
    cfg: &'a GenConfig,
    conditions: Vec<(usize, String)>,
    opts: ParseOptions,
}

impl<M: LanguageModel + Sync> Engine<'_, M> {
    fn prefix(&self, clauses: &[String]) -> (Vec<u32>, usize) {
        let prompt = self.ctx.prompt;
        let mut text = String::from(prompt);
        if !clauses.is_empty() {
            text.push_str(prompt_joiner(prompt));
            text.push_str(&clauses.join(CLAUSE_SEPARATOR));
        }
        let (ids, n_prompt) = self.ctx.vocab.prefix_ids(&text, prompt.len(), !clauses.is_empty());
        (ids, 1 + n_prompt)
    }

    fn attempt(&self, k: u64) -> Result<Attempt, SamplerError> {
        let schema = self.ctx.schema;
        let target = schema.target_index();
        let target_name = &schema.target().name;
        let mut rng = rng::stream(self.cfg.seed, "row", k);
        let pinned_label = self.conditions.iter().find(|(c, _)| *c == target).map(|(_, v)| v.clone());
        let label = match pinned_label {
            Some(v) => Some(v),
            None if self.ctx.label_first => draw_label(self.ctx.label_counts, &mut rng),
            None => None,
        };
        let mut merged: Row = vec![Value::Missing; schema.len()];
        let mut filled = vec![false; schema.len()];
        let mut tokens = 0;
        for (p, cols) in self.plan.partitions.iter().enumerate() {
            let mut part_rng;
            let rng_p: &mut rand_chacha::ChaCha8Rng = if p == 0 {
                &mut rng
            } else {
                part_rng = rng::stream(rng::derive_seed(self.cfg.seed, "row", k), "partition", p as u64);
                &mut part_rng
            };
            let mut clauses = Vec::new();
            let mut fixed: Vec<usize> = Vec::new();
            if p == 0 {
                if let Some(l) = &label {
                    clauses.push(clause(target_name, l));
                    fixed.push(target);
                }
            } else {
                let covers = self.plan.covers(p);
                for c in std::iter::once(target).chain(covers) {
                    if let Some(v) = schema.render(c, &merged[c]) {
                        clauses.push(clause(&schema.columns()[c].name, &v));
                    }
                    fixed.push(c);
                }
            }
            for (c, v) in &self.conditions {
                if cols.contains(c) && !fixed.contains(c) {
                    clauses.push(clause(&schema.columns()[*c].name, v));
                }
            }
            let (prefix, body_start) = self.prefix(&clauses);
            let guard = self
                .cfg
                .guard
                .then(|| ClauseGuard::new(schema, self.ctx.vocab, cols, self.ctx.required, body_start));
            let ids = match generate_sentence(self.model, &prefix, self.cfg, rng_p, guard.as_ref()) {
                Ok(ids) => ids,
                Err(SamplerError::DegenerateDistribution) => return Ok(Err("Degenerate".into())),
                Err(SamplerError::Lm(LmError::ContextOverflow { .. })) => return Ok(Err("ContextOverflow".into())),
                Err(e) => return Err(e),
            };
            tokens += ids.len() - prefix.len();
            if ids.last() != Some(&EOS) {
                return Ok(Err("Truncated".into()));
            }
            let text = match decode(&ids[body_start..], self.ctx.vocab) {
                Ok(t) => t,
                Err(_) => return Ok(Err("Decode".into())),
            };
            let row = match parse_sentence(&text, schema, 0, self.opts) {
                Ok(r) => r,
                Err(e) => return Ok(Err(e.kind.to_string())),
            };
            if (0..schema.len()).any(|c| !row[c].is_missing() && !cols.contains(&c)) {
                return Ok(Err("ForeignColumn".into()));
            }
            for &c in cols {
                if !filled[c] {
                    merged[c] = row[c].clone();
                    filled[c] = true;
                }
            }
        }
        Ok(Ok((merged, tokens)))
    }
}

/// Shared generation loop; partition 0 of a one-partition plan is exactly
/// [`generate_rows`].
pub(crate) fn generate_with_plan<M: LanguageModel + Sync>(
    model: &M,
    ctx: &GenContext<'_>,
    plan: &PartitionPlan,
    n: usize,
    cfg: &GenConfig,
) -> Result<Generated, SamplerError> {
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(SamplerError::InvalidTemperature(cfg.temperature));
    }
    if cfg.max_attempt_factor == 0 {
        return Err(SamplerError::InvalidAttemptFactor);
    }
    let engine = Engine {
        model,
        ctx,
        plan,
        cfg,
        conditions: resolve_conditions(ctx.schema, cfg)?,
        opts: ParseOptions {
            closed_world: cfg.closed_world,
        },
    };
    let cap = n.saturating_mul(cfg.max_attempt_factor);
    let mut stats = GenStats {
        rows_requested: n,
        ..GenStats::default()
    };
    let mut rows = Vec::with_capacity(n);
    let mut tokens = 0usize;
    let mut next = 0usize;
    while rows.len() < n && next < cap {
        let batch = (n - rows.len()).max(32).min(cap - next);
        let results: Vec<Result<Attempt, SamplerError>> = (next..next + batch)
            .into_par_iter()
            .map(|k| engine.attempt(k as u64))
            .collect();
        for r in results {
            if rows.len() == n {
                break;
            }
            stats.attempts += 1;
            match r? {
                Ok((row, t)) => {
                    rows.push(row);
                    tokens += t;
                }
                Err(kind) => *stats.rejects.entry(kind).or_default() += 1,
            }
        }
        next += batch;
    }
    stats.rows_delivered = rows.len();
    stats.mean_tokens_per_row = if rows.is_empty() {
        0.0
    } else {
        tokens as f64 / rows.len() as f64
    };
    let table = Table::new(ctx.schema.clone(), rows).expect("parser only yields conformant rows");
    let out = Generated { table, stats };
    if out.stats.rows_delivered < n {
        return Err(SamplerError::YieldTooLow(Box::new(out)));
    }
    Ok(out)
}

/// Label frequencies of `table`, sorted by rendered value.
pub fn label_counts(table: &Table) -> Vec<(String, u64)> {
    let schema = table.schema();
    let t = schema.target_index();
    let mut m: BTreeMap<String, u64> = BTreeMap::new();
    for row in table.rows() {
        if let Some(v) = schema.render(t, &row[t]) {
            *m.entry(v).or_default() += 1;
        }
    }
    m.into_iter().collect()
}

/// Per column: true when no training row is missing it.
pub fn required_columns(table: &Table) -> Vec<bool> {
    (0..table.schema().len())
        .map(|c| table.column(c).all(|v| !v.is_missing()))
        .collect()
}
