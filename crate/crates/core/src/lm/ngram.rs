//! Count-based backoff model with separate pre-train and fine-tune stores.
//!
//! Scores follow stupid backoff: at the longest context `L` seen in
//! training, a token observed after the length-`j` suffix of the prefix
//! scores `alpha^(L-j) * count / total` for the longest such `j`; tokens
//! never observed in any context fall back to `alpha^L` times an add-k
//! unigram estimate. Each store's scores are normalized, the two stores are
//! blended `lambda * finetune + (1 - lambda) * pretrain`, and banned tokens
//! get zero mass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{is_banned, LanguageModel, LmError};
use crate::tokenizer::EncodedExample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NGramParams {
    pub order: usize,
    pub backoff: f64,
    pub unigram_k: f64,
    pub blend: f64,
}

impl Default for NGramParams {
    fn default() -> Self {
        Self {
            order: 4,
            backoff: 0.4,
            unigram_k: 0.01,
            blend: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreKind {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Followers {
    total: u64,
    next: BTreeMap<u32, u64>,
}

/// Counts of `(context, next)` pairs for every context length up to
/// `order - 1`, plus unigram target counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "CountStoreRepr", into = "CountStoreRepr")]
pub struct CountStore {
    contexts: BTreeMap<Vec<u32>, Followers>,
    unigrams: BTreeMap<u32, u64>,
    total: u64,
}

#[derive(Serialize, Deserialize)]
struct CountStoreRepr {
    contexts: Vec<(Vec<u32>, Vec<(u32, u64)>)>,
    unigrams: Vec<(u32, u64)>,
}

impl From<CountStore> for CountStoreRepr {
    fn from(s: CountStore) -> Self {
        Self {
            contexts: s
                .contexts
                .into_iter()
                .map(|(k, f)| (k, f.next.into_iter().collect()))
                .collect(),
            unigrams: s.unigrams.into_iter().collect(),
        }
    }
}

impl From<CountStoreRepr> for CountStore {
    fn from(r: CountStoreRepr) -> Self {
        let contexts = r
            .contexts
            .into_iter()
            .map(|(k, next)| {
                let next: BTreeMap<u32, u64> = next.into_iter().collect();
                let total = next.values().sum();
                (k, Followers { total, next })
            })
            .collect();
        let unigrams: BTreeMap<u32, u64> = r.unigrams.into_iter().collect();
        let total = unigrams.values().sum();
        Self {
            contexts,
            unigrams,
            total,
        }
    }
}

impl CountStore {
    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Number of times `next` followed exactly `context`.
    pub fn count(&self, context: &[u32], next: u32) -> u64 {
        if context.is_empty() {
            return self.unigrams.get(&next).copied().unwrap_or(0);
        }
        self.contexts
            .get(context)
            .and_then(|f| f.next.get(&next))
            .copied()
            .unwrap_or(0)
    }

    /// Every recorded `(context, next)` pair; the empty context holds unigrams.
    pub fn pairs(&self) -> impl Iterator<Item = (&[u32], u32, u64)> + '_ {
        self.unigrams
            .iter()
            .map(|(&w, &c)| (&[][..], w, c))
            .chain(self.contexts.iter().flat_map(|(k, f)| {
                f.next.iter().map(move |(&w, &c)| (k.as_slice(), w, c))
            }))
    }

    fn add(&mut self, ids: &[u32], mask: &[u8], order: usize) {
        for i in 0..ids.len() {
            if mask[i] == 0 {
                continue;
            }
            let w = ids[i];
            *self.unigrams.entry(w).or_insert(0) += 1;
            self.total += 1;
            let max_ctx = (order - 1).min(i);
            for j in 1..=max_ctx {
                let f = self.contexts.entry(ids[i - j..i].to_vec()).or_default();
                f.total += 1;
                *f.next.entry(w).or_insert(0) += 1;
            }
        }
    }

    /// Normalized backoff distribution; `None` for an empty store.
    fn distribution(&self, prefix: &[u32], params: &NGramParams, vocab: usize) -> Option<Vec<f64>> {
        if self.is_empty() {
            return None;
        }
        let legal = (0..vocab as u32).filter(|&w| !is_banned(w)).count() as f64;
        let denom = self.total as f64 + params.unigram_k * legal;
        let max_ctx = (params.order - 1).min(prefix.len());
        let levels: Vec<Option<&Followers>> = (1..=max_ctx)
            .map(|j| self.contexts.get(&prefix[prefix.len() - j..]))
            .collect();
        let longest = levels
            .iter()
            .rposition(|f| f.is_some_and(|f| f.total > 0))
            .map_or(0, |p| p + 1);

        let floor = params.backoff.powi(longest as i32);
        let mut scores: Vec<f64> = (0..vocab as u32)
            .map(|w| {
                if is_banned(w) {
                    0.0
                } else {
                    let c = self.unigrams.get(&w).copied().unwrap_or(0) as f64;
                    floor * (c + params.unigram_k) / denom
                }
            })
            .collect();
        for j in 1..=longest {
            if let Some(f) = levels[j - 1] {
                let weight = params.backoff.powi((longest - j) as i32) / f.total as f64;
                for (&w, &c) in &f.next {
                    if let Some(s) = scores.get_mut(w as usize) {
                        if !is_banned(w) {
                            *s = weight * c as f64;
                        }
                    }
                }
            }
        }
        normalize(&mut scores);
        Some(scores)
    }
}

fn normalize(v: &mut [f64]) {
    let sum: f64 = v.iter().sum();
    if sum > 0.0 {
        v.iter_mut().for_each(|x| *x /= sum);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramModel {
    params: NGramParams,
    vocab_size: usize,
    pretrain: CountStore,
    finetune: CountStore,
}

impl NGramModel {
    pub fn new(params: NGramParams, vocab_size: usize) -> Result<Self, LmError> {
        if params.order < 1 {
            return Err(LmError::BadOrder);
        }
        Ok(Self {
            params,
            vocab_size,
            pretrain: CountStore::default(),
            finetune: CountStore::default(),
        })
    }

    pub fn params(&self) -> &NGramParams {
        &self.params
    }

    pub fn set_blend(&mut self, blend: f64) {
        self.params.blend = blend;
    }

    pub fn pretrain(&self) -> &CountStore {
        &self.pretrain
    }

    pub fn finetune(&self) -> &CountStore {
        &self.finetune
    }

    pub fn resize_vocab(&mut self, vocab_size: usize) {
        self.vocab_size = self.vocab_size.max(vocab_size);
    }

    /// Counts every unmasked position as a target; masked positions only
    /// ever serve as context.
    pub fn fit(&mut self, examples: &[EncodedExample], into: StoreKind) -> Result<(), LmError> {
        if examples.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let store = match into {
            StoreKind::Pretrain => &mut self.pretrain,
            StoreKind::Finetune => &mut self.finetune,
        };
        for ex in examples {
            if let Some(&id) = ex.ids.iter().find(|&&id| id as usize >= self.vocab_size) {
                return Err(LmError::TokenOutOfRange {
                    id,
                    vocab: self.vocab_size,
                });
            }
            store.add(&ex.ids, &ex.loss_mask, self.params.order);
        }
        Ok(())
    }

    /// Probability of every token following `prefix`; sums to one.
    pub fn next_dist(&self, prefix: &[u32]) -> Vec<f64> {
        let v = self.vocab_size;
        let pt = self.pretrain.distribution(prefix, &self.params, v);
        let ft = self.finetune.distribution(prefix, &self.params, v);
        let mut dist = match (ft, pt) {
            (Some(f), Some(p)) => {
                let l = self.params.blend;
                f.iter().zip(&p).map(|(a, b)| l * a + (1.0 - l) * b).collect()
            }
            (Some(d), None) | (None, Some(d)) => d,
            (None, None) => (0..v as u32)
                .map(|w| if is_banned(w) { 0.0 } else { 1.0 })
                .collect(),
        };
        normalize(&mut dist);
        dist
    }
}

impl LanguageModel for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logits(&self, prefix: &[u32]) -> Result<Vec<f64>, LmError> {
        Ok(self
            .next_dist(prefix)
            .into_iter()
            .map(|p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect())
    }
}
