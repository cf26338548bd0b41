//! Row ⇄ sentence mapping: "<prompt> <label> is <v>, <feature> is <v>, ...".

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{parse_decimal, ColumnKind, Row, Schema, Value};

pub const CLAUSE_SEPARATOR: &str = ", ";
pub const PAIR_SEPARATOR: &str = " is ";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("permutation {perm:?} is not a bijection on {expected} positions")]
    PermutationMismatch { perm: Vec<usize>, expected: usize },
    #[error("column index {0} out of range")]
    BadColumn(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedExample {
    pub text: String,
    /// Byte offset where the prompt prefix ends.
    pub prompt_char_len: usize,
    /// Column indices in emission order (label first when prioritized).
    pub permutation: Vec<usize>,
}

impl SerializedExample {
    pub fn prompt(&self) -> &str {
        &self.text[..self.prompt_char_len]
    }

    pub fn body(&self) -> &str {
        self.text[self.prompt_char_len..].trim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParseErrorKind {
    UnknownFeature,
    DuplicateFeature,
    BadClause,
    BadNumeric,
    OutOfDomainCategory,
    EmptyParse,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{kind} in clause `{clause}`")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    /// The offending clause (or the feature name for duplicates).
    pub clause: String,
}

impl ParseError {
    fn new(kind: ParseErrorKind, clause: &str) -> Self {
        Self {
            kind,
            clause: clause.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseOptions {
    /// Reject categorical values outside the training domain.
    pub closed_world: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { closed_world: true }
    }
}

/// Uniform Fisher–Yates permutation of `0..m`.
pub fn sample_permutation<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        let j = rng.gen_range(0..=i);
        p.swap(i, j);
    }
    p
}

fn is_bijection(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    perm.iter()
        .all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

/// Serializes `row`. With `label_first`, `perm` permutes the non-target
/// features and the label clause leads; otherwise `perm` permutes all
/// columns.
pub fn serialize_row(
    row: &Row,
    schema: &Schema,
    prompt: &str,
    perm: &[usize],
    label_first: bool,
) -> Result<SerializedExample, CodecError> {
    let order: Vec<usize> = if label_first {
        let features = schema.feature_indices();
        if !is_bijection(perm, features.len()) {
            return Err(CodecError::PermutationMismatch {
                perm: perm.to_vec(),
                expected: features.len(),
            });
        }
        std::iter::once(schema.target_index())
            .chain(perm.iter().map(|&k| features[k]))
            .collect()
    } else {
        if !is_bijection(perm, schema.len()) {
            return Err(CodecError::PermutationMismatch {
                perm: perm.to_vec(),
                expected: schema.len(),
            });
        }
        perm.to_vec()
    };
    serialize_columns(row, schema, prompt, &order)
}

/// Serializes the given columns of `row` in order; missing values are skipped.
pub fn serialize_columns(
    row: &Row,
    schema: &Schema,
    prompt: &str,
    order: &[usize],
) -> Result<SerializedExample, CodecError> {
    let mut clauses = Vec::with_capacity(order.len());
    for &c in order {
        let spec = schema.columns().get(c).ok_or(CodecError::BadColumn(c))?;
        if let Some(v) = schema.render(c, &row[c]) {
            clauses.push(format!("{}{PAIR_SEPARATOR}{v}", spec.name));
        }
    }
    let mut text = String::with_capacity(prompt.len() + 16 * clauses.len());
    text.push_str(prompt);
    text.push_str(prompt_joiner(prompt));
    text.push_str(&clauses.join(CLAUSE_SEPARATOR));
    text.push('\n');
    Ok(SerializedExample {
        text,
        prompt_char_len: prompt.len(),
        permutation: order.to_vec(),
    })
}

/// Separator inserted between a prompt and the first clause.
pub fn prompt_joiner(prompt: &str) -> &'static str {
    if prompt.is_empty() || prompt.ends_with(char::is_whitespace) {
        ""
    } else {
        " "
    }
}

/// One rendered "<name> is <value>" clause.
pub fn clause(name: &str, value: &str) -> String {
    format!("{name}{PAIR_SEPARATOR}{value}")
}

/// Parses generated text back into a row. Absent columns become missing.
pub fn parse_sentence(
    text: &str,
    schema: &Schema,
    prompt_char_len: usize,
    opts: ParseOptions,
) -> Result<Row, ParseError> {
    let body = text.get(prompt_char_len..).unwrap_or(text).trim();
    if body.is_empty() {
        return Err(ParseError::new(ParseErrorKind::EmptyParse, ""));
    }
    // Longest names first so "capital gain" wins over "capital".
    let mut by_len: Vec<(usize, &str)> = schema
        .columns()
        .iter()
        .enumerate()
        .map(|(i, c)| (i, c.name.as_str()))
        .collect();
    by_len.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

    let mut row: Row = vec![Value::Missing; schema.len()];
    let mut seen = vec![false; schema.len()];
    for part in body.split(CLAUSE_SEPARATOR) {
        let found = by_len.iter().find_map(|&(i, name)| {
            part.strip_prefix(name)
                .and_then(|rest| rest.strip_prefix(PAIR_SEPARATOR))
                .map(|value| (i, value))
        });
        let (col, raw) = match found {
            Some(x) => x,
            None if part.contains(PAIR_SEPARATOR) => {
                return Err(ParseError::new(ParseErrorKind::UnknownFeature, part))
            }
            None => return Err(ParseError::new(ParseErrorKind::BadClause, part)),
        };
        let spec = &schema.columns()[col];
        if std::mem::replace(&mut seen[col], true) {
            return Err(ParseError::new(ParseErrorKind::DuplicateFeature, &spec.name));
        }
        row[col] = match spec.kind() {
            ColumnKind::Numeric => match parse_decimal(raw) {
                Some(v) => Value::Num(v),
                None => return Err(ParseError::new(ParseErrorKind::BadNumeric, part)),
            },
            ColumnKind::Categorical => {
                if raw.is_empty() || (opts.closed_world && !spec.contains_category(raw)) {
                    return Err(ParseError::new(ParseErrorKind::OutOfDomainCategory, part));
                }
                Value::Cat(raw.to_string())
            }
        };
    }
    Ok(row)
}
