//! Column partitioning for wide tables.
//!
//! Non-label columns are cut into contiguous blocks. Each partition after the
//! first also carries the last `overlap` columns of the previous block (the
//! cover columns), and every partition carries the label. One model is
//! trained on the pooled examples of all partitions; generation walks the
//! partitions in plan order, conditioning each one on the label and on the
//! cover values already produced.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{sample_permutation, serialize_columns, CodecError, SerializedExample};
use crate::lm::LanguageModel;
use crate::rng;
use crate::sampler::{self, GenConfig, GenContext, Generated, SamplerError};
use crate::table::{Schema, Table};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("cannot split {features} feature columns into {partitions} partitions with overlap {overlap}")]
    InfeasiblePlan {
        features: usize,
        partitions: usize,
        overlap: usize,
    },
    #[error("plan does not fit the schema: {0}")]
    PlanMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    /// Column indices per partition, label first.
    pub partitions: Vec<Vec<usize>>,
    pub overlap: usize,
    pub label: usize,
}

impl PartitionPlan {
    /// One partition holding every column.
    pub fn single(schema: &Schema) -> Self {
        let mut cols = vec![schema.target_index()];
        cols.extend(schema.feature_indices());
        Self {
            partitions: vec![cols],
            overlap: 0,
            label: schema.target_index(),
        }
    }

    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }

    /// Non-label columns of partition `i` that an earlier partition already
    /// produces.
    pub fn covers(&self, i: usize) -> Vec<usize> {
        self.partitions[i]
            .iter()
            .copied()
            .filter(|&c| c != self.label && self.partitions[..i].iter().any(|p| p.contains(&c)))
            .collect()
    }

    /// Same partitions generated last-to-first.
    pub fn reversed(&self) -> Self {
        let mut p = self.clone();
        p.partitions.reverse();
        p
    }

    pub fn column_names(&self, schema: &Schema) -> Vec<Vec<String>> {
        self.partitions
            .iter()
            .map(|p| p.iter().map(|&c| schema.columns()[c].name.clone()).collect())
            .collect()
    }

    /// Checks coverage, label placement and index ranges against `schema`.
    pub fn validate(&self, schema: &Schema) -> Result<(), PartitionError> {
        let bad = |m: &str| Err(PartitionError::PlanMismatch(m.to_string()));
        if self.partitions.is_empty() {
            return bad("no partitions");
        }
        if self.label != schema.target_index() {
            return bad("label is not the schema target");
        }
        let mut seen = vec![false; schema.len()];
        for p in &self.partitions {
            if p.first() != Some(&self.label) {
                return bad("partition does not start with the label");
            }
            for &c in p {
                if c >= schema.len() {
                    return bad("column index out of range");
                }
                seen[c] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("some column belongs to no partition");
        }
        Ok(())
    }
}

/// Splits the non-label columns of `schema` into `n_partitions` contiguous,
/// near-even blocks (earlier blocks take the remainder) and prefixes every
/// block after the first with the last `overlap` columns of its predecessor.
pub fn make_partition_plan(
    schema: &Schema,
    n_partitions: usize,
    overlap: usize,
) -> Result<PartitionPlan, PartitionError> {
    let features = schema.feature_indices();
    let infeasible = PartitionError::InfeasiblePlan {
        features: features.len(),
        partitions: n_partitions,
        overlap,
    };
    if n_partitions == 0 || n_partitions > features.len().max(1) {
        return Err(infeasible);
    }
    if n_partitions == 1 {
        return Ok(PartitionPlan {
            overlap,
            ..PartitionPlan::single(schema)
        });
    }
    let base = features.len() / n_partitions;
    let extra = features.len() % n_partitions;
    let mut blocks = Vec::with_capacity(n_partitions);
    let mut start = 0;
    for i in 0..n_partitions {
        let size = base + usize::from(i < extra);
        blocks.push(&features[start..start + size]);
        start += size;
    }
    let label = schema.target_index();
    let mut partitions = Vec::with_capacity(n_partitions);
    for (i, block) in blocks.iter().enumerate() {
        let mut cols = vec![label];
        if i > 0 {
            let prev = blocks[i - 1];
            if overlap > prev.len() {
                return Err(infeasible);
            }
            cols.extend_from_slice(&prev[prev.len() - overlap..]);
        }
        cols.extend_from_slice(block);
        partitions.push(cols);
    }
    Ok(PartitionPlan {
        partitions,
        overlap,
        label,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionedExample {
    pub partition: usize,
    pub example: SerializedExample,
}

/// Serializes every row once per partition, restricted to that partition's
/// columns, and shuffles the pooled examples.
pub fn build_partition_corpus(
    table: &Table,
    plan: &PartitionPlan,
    prompt: &str,
    label_first: bool,
    seed: u64,
) -> Result<Vec<PartitionedExample>, CodecError> {
    let mut out = Vec::with_capacity(table.len() * plan.len());
    for (r, row) in table.rows().iter().enumerate() {
        let mut rng = rng::stream(seed, "corpus/perm", r as u64);
        for (p, cols) in plan.partitions.iter().enumerate() {
            let order: Vec<usize> = if label_first {
                let rest = &cols[1..];
                std::iter::once(cols[0])
                    .chain(sample_permutation(rest.len(), &mut rng).into_iter().map(|k| rest[k]))
                    .collect()
            } else {
                sample_permutation(cols.len(), &mut rng)
                    .into_iter()
                    .map(|k| cols[k])
                    .collect()
            };
            out.push(PartitionedExample {
                partition: p,
                example: serialize_columns(row, table.schema(), prompt, &order)?,
            });
        }
    }
    out.shuffle(&mut rng::stream(seed, "corpus/shuffle", 0));
    Ok(out)
}

/// Generates `n` rows partition by partition and merges them.
pub fn generate_partitioned<M: LanguageModel + Sync>(
    model: &M,
    ctx: &GenContext<'_>,
    plan: &PartitionPlan,
    n: usize,
    cfg: &GenConfig,
) -> Result<Generated, SamplerError> {
    plan.validate(ctx.schema)?;
    sampler::generate_with_plan(model, ctx, plan, n, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{ColumnDomain, ColumnSpec, TaskKind};

    fn wide(n_features: usize) -> Schema {
        let mut cols: Vec<ColumnSpec> = (1..=n_features)
            .map(|i| ColumnSpec {
                name: format!("f{i}"),
                domain: ColumnDomain::Numeric {
                    min: 0.0,
                    max: 1.0,
                    sig_digits: 6,
                },
            })
            .collect();
        cols.push(ColumnSpec {
            name: "y".into(),
            domain: ColumnDomain::Categorical {
                categories: vec!["no".into(), "yes".into()],
            },
        });
        Schema::new(cols, n_features, TaskKind::BinClass).unwrap()
    }

    #[test]
    fn seven_features_two_partitions() {
        let s = wide(7);
        let plan = make_partition_plan(&s, 2, 1).unwrap();
        assert_eq!(plan.column_names(&s), vec![
            vec!["y", "f1", "f2", "f3", "f4"],
            vec!["y", "f4", "f5", "f6", "f7"],
        ]);
        assert_eq!(plan.covers(1), vec![3]);
        assert!(plan.covers(0).is_empty());
    }

    #[test]
    fn single_partition_is_everything() {
        let s = wide(3);
        let plan = make_partition_plan(&s, 1, 1).unwrap();
        assert_eq!(plan.partitions, vec![vec![3, 0, 1, 2]]);
        plan.validate(&s).unwrap();
    }

    #[test]
    fn infeasible_plans() {
        let s = wide(2);
        assert!(matches!(make_partition_plan(&s, 4, 1), Err(PartitionError::InfeasiblePlan { .. })));
        assert!(matches!(make_partition_plan(&s, 0, 1), Err(PartitionError::InfeasiblePlan { .. })));
        // Blocks of one column cannot lend two cover columns.
        assert!(matches!(make_partition_plan(&s, 2, 2), Err(PartitionError::InfeasiblePlan { .. })));
    }

    #[test]
    fn non_label_columns_appear_at_most_twice() {
        let s = wide(8);
        for n in 1..=4 {
            let plan = make_partition_plan(&s, n, 1).unwrap();
            plan.validate(&s).unwrap();
            for c in s.feature_indices() {
                let k = plan.partitions.iter().filter(|p| p.contains(&c)).count();
                assert!((1..=2).contains(&k));
            }
            for i in 1..plan.len() {
                assert_eq!(plan.covers(i).len(), 1);
            }
        }
    }

    #[test]
    fn reversed_plan_covers_point_backwards() {
        let s = wide(7);
        let plan = make_partition_plan(&s, 2, 1).unwrap().reversed();
        assert_eq!(plan.covers(1), vec![3]);
    }
}
