//! Small gradient-boosted regression trees.
//!
//! Each tree fits the negative gradient with squared error and exact splits;
//! leaves hold the learning-rate-scaled mean residual. Classification uses
//! logistic loss, one booster per class for more than two classes. Rows
//! with a missing value follow whichever branch gave the larger gain.

use std::cmp::Ordering;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{Encoder, PredictorError};
use crate::rng;
use crate::table::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// Fraction of rows drawn (without replacement) per tree.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 3,
            learning_rate: 0.1,
            min_samples_leaf: 2,
            subsample: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// 1.0 marks `classes[1]`.
    Binary { y: Vec<f64>, classes: [String; 2] },
    Multi { y: Vec<usize>, classes: Vec<String> },
    Real(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Binary { y, .. } | Labels::Real(y) => y.len(),
            Labels::Multi { y, .. } => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn key(&self, i: usize) -> f64 {
        match self {
            Labels::Binary { y, .. } | Labels::Real(y) => y[i],
            Labels::Multi { y, .. } => y[i] as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Logistic,
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        missing_left: bool,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    missing_left,
                    left,
                    right,
                } => {
                    let v = x[*feature];
                    let go_left = if v.is_nan() { *missing_left } else { v <= *threshold };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    objective: Objective,
    classes: Vec<String>,
    encoder: Encoder,
    base: Vec<f64>,
    /// One boosted sequence per output.
    trees: Vec<Vec<Tree>>,
    degenerate: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

struct Grower<'a> {
    x: &'a [f64],
    width: usize,
    /// Per feature, row indices with a present value sorted by that value.
    sorted: &'a [Vec<usize>],
    params: &'a GbdtParams,
}

struct Split {
    gain: f64,
    feature: usize,
    threshold: f64,
    missing_left: bool,
}

impl Grower<'_> {
    fn value(&self, row: usize, f: usize) -> f64 {
        self.x[row * self.width + f]
    }

    fn best_split(&self, rows: &[usize], in_node: &[bool], r: &[f64]) -> Option<Split> {
        let min_leaf = self.params.min_samples_leaf.max(1);
        let n = rows.len();
        let g: f64 = rows.iter().map(|&i| r[i]).sum();
        let parent = g * g / n as f64;
        let mut best: Option<Split> = None;
        let mut consider = |gl: f64, nl: usize, feature: usize, threshold: f64, missing_left: bool| {
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                return;
            }
            let gr = g - gl;
            let gain = gl * gl / nl as f64 + gr * gr / nr as f64 - parent;
            // Zero-gain splits are allowed: interactions such as XOR show no
            // gain at the first level.
            if gain > -1e-12 && best.as_ref().map_or(true, |b| gain > b.gain) {
                best = Some(Split {
                    gain,
                    feature,
                    threshold,
                    missing_left,
                });
            }
        };
        for f in 0..self.width {
            let present: Vec<usize> = self.sorted[f].iter().copied().filter(|&i| in_node[i]).collect();
            if present.is_empty() {
                continue;
            }
            let n_missing = n - present.len();
            let g_missing = g - present.iter().map(|&i| r[i]).sum::<f64>();
            let mut gl = 0.0;
            for k in 0..present.len() {
                gl += r[present[k]];
                let v = self.value(present[k], f);
                if k + 1 < present.len() {
                    let next = self.value(present[k + 1], f);
                    if next == v {
                        continue;
                    }
                    let thr = v + (next - v) / 2.0;
                    consider(gl + g_missing, k + 1 + n_missing, f, thr, true);
                    if n_missing > 0 {
                        consider(gl, k + 1, f, thr, false);
                    }
                } else if n_missing > 0 {
                    consider(gl, k + 1, f, v, false);
                }
            }
        }
        best
    }

    fn grow(&self, rows: Vec<usize>, r: &[f64], depth: usize, in_node: &mut [bool], nodes: &mut Vec<Node>) -> usize {
        let id = nodes.len();
        let leaf = self.params.learning_rate * rows.iter().map(|&i| r[i]).sum::<f64>() / rows.len() as f64;
        nodes.push(Node::Leaf(leaf));
        if depth >= self.params.max_depth || rows.len() < 2 * self.params.min_samples_leaf.max(1) {
            return id;
        }
        let (lo, hi) = rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(r[i]), hi.max(r[i])));
        if hi - lo <= 1e-12 {
            return id;
        }
        for &i in &rows {
            in_node[i] = true;
        }
        let split = self.best_split(&rows, in_node, r);
        for &i in &rows {
            in_node[i] = false;
        }
        let Some(s) = split else { return id };
        let (left, right): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| {
            let v = self.value(i, s.feature);
            if v.is_nan() {
                s.missing_left
            } else {
                v <= s.threshold
            }
        });
        let l = self.grow(left, r, depth + 1, in_node, nodes);
        let rt = self.grow(right, r, depth + 1, in_node, nodes);
        nodes[id] = Node::Split {
            feature: s.feature,
            threshold: s.threshold,
            missing_left: s.missing_left,
            left: l,
            right: rt,
        };
        id
    }
}

fn cmp_rows(x: &[f64], width: usize, a: usize, b: usize) -> Ordering {
    x[a * width..(a + 1) * width]
        .iter()
        .zip(&x[b * width..(b + 1) * width])
        .map(|(p, q)| p.total_cmp(q))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

impl GbdtModel {
    /// Fits on the given feature columns of `table`. Rows are put in a
    /// canonical order first, so the fit does not depend on row order.
    ///
    /// A single-class or constant target yields a constant model (see
    /// [`GbdtModel::is_degenerate`]).
    pub fn fit(table: &Table, features: &[usize], labels: Labels, params: &GbdtParams) -> Result<Self, PredictorError> {
        if labels.len() != table.len() {
            return Err(PredictorError::LengthMismatch(labels.len(), table.len()));
        }
        if table.len() < 2 {
            return Err(PredictorError::TooFewRows(table.len()));
        }
        let encoder = Encoder::fit(table, features);
        let width = encoder.width();
        let raw = encoder.transform(table)?;
        let n = table.len();

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            cmp_rows(&raw, width, a, b).then(labels.key(a).total_cmp(&labels.key(b)))
        });
        let mut x = Vec::with_capacity(raw.len());
        for &i in &order {
            x.extend_from_slice(&raw[i * width..(i + 1) * width]);
        }

        let (objective, classes, targets): (Objective, Vec<String>, Vec<Vec<f64>>) = match &labels {
            Labels::Binary { y, classes } => (
                Objective::Logistic,
                classes.to_vec(),
                vec![order.iter().map(|&i| y[i]).collect()],
            ),
            Labels::Multi { y, classes } => (
                Objective::Logistic,
                classes.clone(),
                (0..classes.len())
                    .map(|k| order.iter().map(|&i| f64::from(u8::from(y[i] == k))).collect())
                    .collect(),
            ),
            Labels::Real(y) => (Objective::Squared, Vec::new(), vec![order.iter().map(|&i| y[i]).collect()]),
        };

        let degenerate = match &labels {
            Labels::Binary { y, .. } | Labels::Real(y) => y.iter().all(|&v| v == y[0]),
            Labels::Multi { y, .. } => y.iter().all(|&v| v == y[0]),
        };
        let base: Vec<f64> = targets
            .iter()
            .map(|t| {
                let mean = t.iter().sum::<f64>() / n as f64;
                match objective {
                    Objective::Logistic => logit(mean),
                    Objective::Squared => mean,
                }
            })
            .collect();
        let mut model = GbdtModel {
            objective,
            classes,
            encoder,
            trees: vec![Vec::new(); targets.len()],
            base,
            degenerate,
        };
        if degenerate {
            return Ok(model);
        }

        let sorted: Vec<Vec<usize>> = (0..width)
            .map(|f| {
                let mut idx: Vec<usize> = (0..n).filter(|&i| !x[i * width + f].is_nan()).collect();
                idx.sort_by(|&a, &b| x[a * width + f].total_cmp(&x[b * width + f]).then(a.cmp(&b)));
                idx
            })
            .collect();
        let grower = Grower {
            x: &x,
            width,
            sorted: &sorted,
            params,
        };
        let n_sub = ((n as f64 * params.subsample).floor() as usize).clamp(1, n);
        let mut in_node = vec![false; n];
        for (k, target) in targets.iter().enumerate() {
            let mut f = vec![model.base[k]; n];
            let mut r = vec![0.0; n];
            for t in 0..params.n_trees {
                for i in 0..n {
                    r[i] = match objective {
                        Objective::Logistic => target[i] - sigmoid(f[i]),
                        Objective::Squared => target[i] - f[i],
                    };
                }
                let rows: Vec<usize> = if n_sub < n {
                    let mut rng = rng::stream(params.seed, "gbdt/subsample", (k * params.n_trees + t) as u64);
                    let mut s = sample(&mut rng, n, n_sub).into_vec();
                    s.sort_unstable();
                    s
                } else {
                    (0..n).collect()
                };
                let mut nodes = Vec::new();
                grower.grow(rows, &r, 0, &mut in_node, &mut nodes);
                let tree = Tree { nodes };
                for i in 0..n {
                    f[i] += tree.predict(&x[i * width..(i + 1) * width]);
                }
                model.trees[k].push(tree);
            }
        }
        Ok(model)
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn trees(&self) -> &[Vec<Tree>] {
        &self.trees
    }

    /// Raw additive scores, one vector per row.
    pub fn predict_raw(&self, table: &Table) -> Result<Vec<Vec<f64>>, PredictorError> {
        let x = self.encoder.transform(table)?;
        let width = self.encoder.width();
        Ok((0..table.len())
            .map(|i| {
                let xi = &x[i * width..(i + 1) * width];
                self.base
                    .iter()
                    .zip(&self.trees)
                    .map(|(b, trees)| b + trees.iter().map(|t| t.predict(xi)).sum::<f64>())
                    .collect()
            })
            .collect())
    }

    /// Class probabilities (independent sigmoids) or regression values.
    pub fn predict_scores(&self, table: &Table) -> Result<Vec<Vec<f64>>, PredictorError> {
        let raw = self.predict_raw(table)?;
        Ok(match self.objective {
            Objective::Logistic => raw.into_iter().map(|r| r.into_iter().map(sigmoid).collect()).collect(),
            Objective::Squared => raw,
        })
    }

    /// Probability of the second class of a binary model.
    pub fn predict_proba(&self, table: &Table) -> Result<Vec<f64>, PredictorError> {
        Ok(self.predict_scores(table)?.into_iter().map(|s| s[0]).collect())
    }

    /// Predicted target cells: class label or number.
    pub fn predict_values(&self, table: &Table) -> Result<Vec<Value>, PredictorError> {
        let scores = self.predict_scores(table)?;
        Ok(scores
            .into_iter()
            .map(|s| match self.objective {
                Objective::Squared => Value::Num(s[0]),
                Objective::Logistic if self.classes.len() == 2 && s.len() == 1 => {
                    Value::Cat(self.classes[usize::from(s[0] >= 0.5)].clone())
                }
                Objective::Logistic => {
                    let k = s
                        .iter()
                        .enumerate()
                        .fold(0, |best, (k, &p)| if p > s[best] { k } else { best });
                    Value::Cat(self.classes[k].clone())
                }
            })
            .collect())
    }
}
