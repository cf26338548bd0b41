//! Small causal transformer decoder trained with AdamW.
//!
//! Pre-norm blocks (`x + attn(ln(x))`, `x + mlp(ln(x))`), learned positional
//! embeddings, tanh-GELU feed-forward and a final layer norm feeding the
//! output projection. The output projection starts at zero so an untrained
//! model predicts the uniform distribution. Gradients are computed by hand.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{is_banned, LanguageModel, LmError};
use crate::scalar::Scalar;
use crate::tokenizer::EncodedExample;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuralConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    /// Longest sequence the model accepts.
    pub context: usize,
    pub zero_init_output: bool,
    pub init_seed: u64,
    pub adam: AdamConfig,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            ff_mult: 4,
            context: 256,
            zero_init_output: true,
            init_seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Serialize + DeserializeOwned")]
pub struct Block<F> {
    pub ln1_g: Vec<F>,
    pub ln1_b: Vec<F>,
    /// d × 3d, columns are [q | k | v].
    pub w_qkv: Vec<F>,
    pub b_qkv: Vec<F>,
    pub w_o: Vec<F>,
    pub b_o: Vec<F>,
    pub ln2_g: Vec<F>,
    pub ln2_b: Vec<F>,
    pub w_fc: Vec<F>,
    pub b_fc: Vec<F>,
    pub w_proj: Vec<F>,
    pub b_proj: Vec<F>,
}

/// All trainable tensors, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Serialize + DeserializeOwned")]
pub struct Params<F> {
    /// vocab × d
    pub tok_emb: Vec<F>,
    /// context × d
    pub pos_emb: Vec<F>,
    pub blocks: Vec<Block<F>>,
    pub lnf_g: Vec<F>,
    pub lnf_b: Vec<F>,
    /// vocab × d (one row per output token)
    pub w_out: Vec<F>,
    pub b_out: Vec<F>,
}

impl<F: Scalar> Params<F> {
    pub fn tensors(&self) -> Vec<&Vec<F>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend([
                &b.ln1_g, &b.ln1_b, &b.w_qkv, &b.b_qkv, &b.w_o, &b.b_o, &b.ln2_g, &b.ln2_b,
                &b.w_fc, &b.b_fc, &b.w_proj, &b.b_proj,
            ]);
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.w_out, &self.b_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.w_qkv,
                &mut b.b_qkv,
                &mut b.w_o,
                &mut b.b_o,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w_fc,
                &mut b.b_fc,
                &mut b.w_proj,
                &mut b.b_proj,
            ]);
        }
        out.extend([
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.w_out,
            &mut self.b_out,
        ]);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|x| *x = F::zero());
        }
        z
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Serialize + DeserializeOwned")]
pub struct NeuralModel<F> {
    config: NeuralConfig,
    vocab_size: usize,
    params: Params<F>,
    adam_m: Params<F>,
    adam_v: Params<F>,
    step: u64,
}

fn normal_vec<F: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| F::lit(dist.sample(rng))).collect()
}

fn filled<F: Scalar>(n: usize, v: f64) -> Vec<F> {
    vec![F::lit(v); n]
}

impl<F: Scalar> NeuralModel<F> {
    pub fn new(config: NeuralConfig, vocab_size: usize) -> Self {
        assert!(
            config.n_heads > 0 && config.d_model % config.n_heads == 0,
            "d_model must be divisible by n_heads"
        );
        let d = config.d_model;
        let ff = d * config.ff_mult;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let resid_std = (1.0 / d as f64).sqrt() / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_g: filled(d, 1.0),
                ln1_b: filled(d, 0.0),
                w_qkv: normal_vec(&mut rng, d * 3 * d, (1.0 / d as f64).sqrt()),
                b_qkv: filled(3 * d, 0.0),
                w_o: normal_vec(&mut rng, d * d, resid_std),
                b_o: filled(d, 0.0),
                ln2_g: filled(d, 1.0),
                ln2_b: filled(d, 0.0),
                w_fc: normal_vec(&mut rng, d * ff, (1.0 / d as f64).sqrt()),
                b_fc: filled(ff, 0.0),
                w_proj: normal_vec(&mut rng, ff * d, (1.0 / ff as f64).sqrt() / (2.0 * config.n_layers as f64).sqrt()),
                b_proj: filled(d, 0.0),
            })
            .collect();
        let tok_emb = normal_vec(&mut rng, vocab_size * d, 0.02);
        let pos_emb = normal_vec(&mut rng, config.context * d, 0.02);
        let w_out = if config.zero_init_output {
            filled(vocab_size * d, 0.0)
        } else {
            normal_vec(&mut rng, vocab_size * d, (1.0 / d as f64).sqrt())
        };
        let params = Params {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: filled(d, 1.0),
            lnf_b: filled(d, 0.0),
            w_out,
            b_out: filled(vocab_size, 0.0),
        };
        let adam_m = params.zeros_like();
        let adam_v = params.zeros_like();
        Self {
            config,
            vocab_size,
            params,
            adam_m,
            adam_v,
            step: 0,
        }
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    pub fn steps_trained(&self) -> u64 {
        self.step
    }

    pub fn set_weight_decay(&mut self, wd: f64) {
        self.config.adam.weight_decay = wd;
    }

    /// Appends rows for new token ids; existing rows are untouched and the
    /// new output rows start at zero.
    pub fn resize_vocab(&mut self, vocab_size: usize) {
        if vocab_size <= self.vocab_size {
            return;
        }
        let d = self.config.d_model;
        let extra = vocab_size - self.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(
            self.config.init_seed,
            "neural/resize",
            self.vocab_size as u64,
        ));
        self.params.tok_emb.extend(normal_vec::<F>(&mut rng, extra * d, 0.02));
        self.params.w_out.extend(filled::<F>(extra * d, 0.0));
        self.params.b_out.extend(filled::<F>(extra, 0.0));
        for st in [&mut self.adam_m, &mut self.adam_v] {
            st.tok_emb.extend(filled::<F>(extra * d, 0.0));
            st.w_out.extend(filled::<F>(extra * d, 0.0));
            st.b_out.extend(filled::<F>(extra, 0.0));
        }
        self.vocab_size = vocab_size;
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), LmError> {
        if ids.len() > self.config.context {
            return Err(LmError::ContextOverflow {
                len: ids.len(),
                cap: self.config.context,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(LmError::TokenOutOfRange {
                id,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits for every position, `len(ids) × vocab`, row-major.
    pub fn forward(&self, ids: &[u32]) -> Result<Vec<F>, LmError> {
        self.check_ids(ids)?;
        let cache = self.run(ids);
        Ok(self.project(&cache.z, ids.len()))
    }

    /// Mean next-token cross-entropy over positions whose successor is
    /// unmasked.
    pub fn loss(&self, ex: &EncodedExample) -> Result<F, LmError> {
        let (loss, _) = self.loss_inner(ex, None)?;
        Ok(loss)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, ex: &EncodedExample) -> Result<(F, Params<F>), LmError> {
        let mut g = self.params.zeros_like();
        let (loss, _) = self.loss_inner(ex, Some((&mut g, F::one())))?;
        Ok((loss, g))
    }

    /// Teacher-forced loss with explicit targets: position `t` reads
    /// `inputs[..=t]` and is scored against `targets[t]` when `mask[t]` is 1.
    pub fn loss_with_targets(&self, inputs: &[u32], targets: &[u32], mask: &[u8]) -> Result<F, LmError> {
        let (loss, _) = self.loss_core(inputs, targets, mask, None)?;
        Ok(loss)
    }

    fn loss_inner(
        &self,
        ex: &EncodedExample,
        grad: Option<(&mut Params<F>, F)>,
    ) -> Result<(F, usize), LmError> {
        let n = ex.ids.len();
        if n < 2 {
            return Err(LmError::EmptyLossMask);
        }
        self.loss_core(&ex.ids[..n - 1], &ex.ids[1..], &ex.loss_mask[1..], grad)
    }

    fn loss_core(
        &self,
        ids: &[u32],
        target_ids: &[u32],
        mask: &[u8],
        grad: Option<(&mut Params<F>, F)>,
    ) -> Result<(F, usize), LmError> {
        assert!(
            ids.len() == target_ids.len() && ids.len() == mask.len(),
            "inputs, targets and mask must have equal length"
        );
        self.check_ids(ids)?;
        self.check_ids(target_ids)?;
        let targets: Vec<(usize, usize)> = (0..ids.len())
            .filter(|&i| mask[i] == 1)
            .map(|i| (i, target_ids[i] as usize))
            .collect();
        if targets.is_empty() {
            return Err(LmError::EmptyLossMask);
        }
        let v = self.vocab_size;
        let cache = self.run(ids);
        let logits = self.project(&cache.z, ids.len());
        let n = F::lit(targets.len() as f64);
        let mut total = F::zero();
        let mut dlogits = grad.as_ref().map(|_| vec![F::zero(); ids.len() * v]);
        for &(pos, tgt) in &targets {
            let row = &logits[pos * v..(pos + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum: F = row.iter().map(|&z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            total = total + (lse - row[tgt]);
            if let Some(dl) = dlogits.as_mut() {
                let out = &mut dl[pos * v..(pos + 1) * v];
                for (o, &z) in out.iter_mut().zip(row) {
                    *o = (z - lse).exp() / n;
                }
                out[tgt] = out[tgt] - F::one() / n;
            }
        }
        let loss = total / n;
        if let (Some((g, scale)), Some(mut dl)) = (grad, dlogits) {
            if scale != F::one() {
                dl.iter_mut().for_each(|x| *x = *x * scale);
            }
            self.backward(ids, &cache, &dl, g);
        }
        Ok((loss, targets.len()))
    }

    /// One AdamW step on the mean loss of `batch`. Returns that mean loss.
    pub fn train_step(&mut self, batch: &[&EncodedExample], learning_rate: f64) -> Result<F, LmError> {
        if batch.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let scale = F::lit(1.0 / batch.len() as f64);
        let mut grads = self.params.zeros_like();
        let mut total = F::zero();
        for ex in batch {
            let (l, _) = self.loss_inner(ex, Some((&mut grads, scale)))?;
            total = total + l;
        }
        let loss = total * scale;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(LmError::NonFiniteLoss {
                step: self.step as usize,
                detail: format!("loss {loss}"),
            });
        }
        self.apply_adam(&grads, learning_rate);
        Ok(loss)
    }

    fn apply_adam(&mut self, grads: &Params<F>, lr: f64) {
        self.step += 1;
        let a = self.config.adam;
        let t = self.step as i32;
        let b1 = F::lit(a.beta1);
        let b2 = F::lit(a.beta2);
        let one = F::one();
        let c1 = F::lit(1.0 - a.beta1.powi(t));
        let c2 = F::lit(1.0 - a.beta2.powi(t));
        let lr = F::lit(lr);
        let eps = F::lit(a.eps);
        let wd = F::lit(a.weight_decay);
        let params = self.params.tensors_mut();
        let ms = self.adam_m.tensors_mut();
        let vs = self.adam_v.tensors_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] = p[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * p[i]);
            }
        }
    }

    /// Runs `steps` AdamW steps over shuffled mini-batches. Returns the
    /// per-step losses.
    pub fn fit(
        &mut self,
        examples: &[EncodedExample],
        steps: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<Vec<f64>, LmError> {
        if examples.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        for ex in examples {
            self.check_ids(&ex.ids)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = Vec::new();
        let mut losses = Vec::with_capacity(steps);
        let bs = batch_size.max(1).min(examples.len());
        for _ in 0..steps {
            if order.len() < bs {
                let mut fresh: Vec<usize> = (0..examples.len()).collect();
                fresh.shuffle(&mut rng);
                order.extend(fresh);
            }
            let batch: Vec<&EncodedExample> = order.drain(..bs).map(|i| &examples[i]).collect();
            losses.push(self.train_step(&batch, learning_rate)?.as_f64());
        }
        Ok(losses)
    }

    fn project(&self, z: &[F], t_len: usize) -> Vec<F> {
        let d = self.config.d_model;
        let v = self.vocab_size;
        let mut out = vec![F::zero(); t_len * v];
        for t in 0..t_len {
            let zr = &z[t * d..(t + 1) * d];
            for w in 0..v {
                let wr = &self.params.w_out[w * d..(w + 1) * d];
                out[t * v + w] = self.params.b_out[w] + dot(zr, wr);
            }
        }
        out
    }

    fn run(&self, ids: &[u32]) -> Cache<F> {
        let d = self.config.d_model;
        let t_len = ids.len();
        let p = &self.params;
        let mut x = vec![F::zero(); t_len * d];
        for (t, &id) in ids.iter().enumerate() {
            let te = &p.tok_emb[id as usize * d..(id as usize + 1) * d];
            let pe = &p.pos_emb[t * d..(t + 1) * d];
            for j in 0..d {
                x[t * d + j] = te[j] + pe[j];
            }
        }
        let mut blocks = Vec::with_capacity(p.blocks.len());
        for b in &p.blocks {
            let x_in = x.clone();
            let ln1 = layer_norm(&x_in, t_len, d, &b.ln1_g, &b.ln1_b);
            let qkv = linear(&ln1.y, t_len, d, &b.w_qkv, &b.b_qkv, 3 * d);
            let (att, probs) = self.attention(&qkv, t_len);
            let o = linear(&att, t_len, d, &b.w_o, &b.b_o, d);
            let x1: Vec<F> = x_in.iter().zip(&o).map(|(&a, &c)| a + c).collect();
            let ln2 = layer_norm(&x1, t_len, d, &b.ln2_g, &b.ln2_b);
            let ff = b.b_fc.len();
            let pre = linear(&ln2.y, t_len, d, &b.w_fc, &b.b_fc, ff);
            let act: Vec<F> = pre.iter().map(|&u| gelu(u)).collect();
            let m = linear(&act, t_len, ff, &b.w_proj, &b.b_proj, d);
            x = x1.iter().zip(&m).map(|(&a, &c)| a + c).collect();
            blocks.push(BlockCache {
                x_in,
                ln1,
                qkv,
                probs,
                att,
                x1,
                ln2,
                pre,
                act,
            });
        }
        let lnf = layer_norm(&x, t_len, d, &p.lnf_g, &p.lnf_b);
        Cache {
            z: lnf.y.clone(),
            lnf,
            blocks,
        }
    }

    /// Causal multi-head attention. Returns the concatenated head outputs and
    /// the attention weights (`heads × T × T`, lower triangle used).
    fn attention(&self, qkv: &[F], t_len: usize) -> (Vec<F>, Vec<F>) {
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let hd = d / h;
        let scale = F::lit(1.0 / (hd as f64).sqrt());
        let mut out = vec![F::zero(); t_len * d];
        let mut probs = vec![F::zero(); h * t_len * t_len];
        for head in 0..h {
            let qo = head * hd;
            let ko = d + head * hd;
            let vo = 2 * d + head * hd;
            for t in 0..t_len {
                let q = &qkv[t * 3 * d + qo..t * 3 * d + qo + hd];
                let row = &mut probs[(head * t_len + t) * t_len..(head * t_len + t + 1) * t_len];
                let mut max = F::neg_infinity();
                for s in 0..=t {
                    let k = &qkv[s * 3 * d + ko..s * 3 * d + ko + hd];
                    row[s] = dot(q, k) * scale;
                    max = max.max(row[s]);
                }
                let mut sum = F::zero();
                for r in row.iter_mut().take(t + 1) {
                    *r = (*r - max).exp();
                    sum = sum + *r;
                }
                for r in row.iter_mut().take(t + 1) {
                    *r = *r / sum;
                }
                let o = &mut out[t * d + qo..t * d + qo + hd];
                for s in 0..=t {
                    let vv = &qkv[s * 3 * d + vo..s * 3 * d + vo + hd];
                    for j in 0..hd {
                        o[j] = o[j] + row[s] * vv[j];
                    }
                }
            }
        }
        (out, probs)
    }

    fn backward(&self, ids: &[u32], cache: &Cache<F>, dlogits: &[F], g: &mut Params<F>) {
        let d = self.config.d_model;
        let v = self.vocab_size;
        let t_len = ids.len();
        let p = &self.params;

        let mut dz = vec![F::zero(); t_len * d];
        for t in 0..t_len {
            let zr = &cache.z[t * d..(t + 1) * d];
            for w in 0..v {
                let dl = dlogits[t * v + w];
                if dl == F::zero() {
                    continue;
                }
                g.b_out[w] = g.b_out[w] + dl;
                let wr = &p.w_out[w * d..(w + 1) * d];
                for j in 0..d {
                    g.w_out[w * d + j] = g.w_out[w * d + j] + dl * zr[j];
                    dz[t * d + j] = dz[t * d + j] + dl * wr[j];
                }
            }
        }
        let mut dx = layer_norm_backward(&dz, &cache.lnf, t_len, d, &p.lnf_g, &mut g.lnf_g, &mut g.lnf_b);

        for (bi, (b, bc)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut g.blocks[bi];
            let ff = b.b_fc.len();
            // x = x1 + mlp(ln2(x1))
            let dact = linear_backward(&bc.act, &dx, t_len, ff, d, &b.w_proj, &mut gb.w_proj, &mut gb.b_proj);
            let dpre: Vec<F> = dact.iter().zip(&bc.pre).map(|(&da, &u)| da * gelu_grad(u)).collect();
            let dln2 = linear_backward(&bc.ln2.y, &dpre, t_len, d, ff, &b.w_fc, &mut gb.w_fc, &mut gb.b_fc);
            let dx1_ln = layer_norm_backward(&dln2, &bc.ln2, t_len, d, &b.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);
            let dx1: Vec<F> = dx.iter().zip(&dx1_ln).map(|(&a, &c)| a + c).collect();
            // x1 = x_in + attn(ln1(x_in))
            let datt = linear_backward(&bc.att, &dx1, t_len, d, d, &b.w_o, &mut gb.w_o, &mut gb.b_o);
            let dqkv = self.attention_backward(&bc.qkv, &bc.probs, &datt, t_len);
            let dln1 = linear_backward(&bc.ln1.y, &dqkv, t_len, d, 3 * d, &b.w_qkv, &mut gb.w_qkv, &mut gb.b_qkv);
            let dxin_ln = layer_norm_backward(&dln1, &bc.ln1, t_len, d, &b.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
            dx = dx1.iter().zip(&dxin_ln).map(|(&a, &c)| a + c).collect();
            let _ = &bc.x_in;
            let _ = &bc.x1;
        }
        for (t, &id) in ids.iter().enumerate() {
            let id = id as usize;
            for j in 0..d {
                g.tok_emb[id * d + j] = g.tok_emb[id * d + j] + dx[t * d + j];
                g.pos_emb[t * d + j] = g.pos_emb[t * d + j] + dx[t * d + j];
            }
        }
    }

    fn attention_backward(&self, qkv: &[F], probs: &[F], dout: &[F], t_len: usize) -> Vec<F> {
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let hd = d / h;
        let scale = F::lit(1.0 / (hd as f64).sqrt());
        let mut dqkv = vec![F::zero(); t_len * 3 * d];
        let mut dp = vec![F::zero(); t_len];
        for head in 0..h {
            let qo = head * hd;
            let ko = d + head * hd;
            let vo = 2 * d + head * hd;
            for t in 0..t_len {
                let row = &probs[(head * t_len + t) * t_len..(head * t_len + t + 1) * t_len];
                let dor = &dout[t * d + qo..t * d + qo + hd];
                let mut weighted = F::zero();
                for s in 0..=t {
                    let vv = &qkv[s * 3 * d + vo..s * 3 * d + vo + hd];
                    dp[s] = dot(dor, vv);
                    weighted = weighted + dp[s] * row[s];
                    for j in 0..hd {
                        let idx = s * 3 * d + vo + j;
                        dqkv[idx] = dqkv[idx] + row[s] * dor[j];
                    }
                }
                for s in 0..=t {
                    let ds = row[s] * (dp[s] - weighted) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    for j in 0..hd {
                        let q = qkv[t * 3 * d + qo + j];
                        let k = qkv[s * 3 * d + ko + j];
                        dqkv[t * 3 * d + qo + j] = dqkv[t * 3 * d + qo + j] + ds * k;
                        dqkv[s * 3 * d + ko + j] = dqkv[s * 3 * d + ko + j] + ds * q;
                    }
                }
            }
        }
        dqkv
    }
}

impl<F: Scalar> LanguageModel for NeuralModel<F> {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logits(&self, prefix: &[u32]) -> Result<Vec<f64>, LmError> {
        self.check_ids(prefix)?;
        if prefix.is_empty() {
            return Ok((0..self.vocab_size as u32)
                .map(|w| if is_banned(w) { f64::NEG_INFINITY } else { 0.0 })
                .collect());
        }
        let d = self.config.d_model;
        let cache = self.run(prefix);
        let last = &cache.z[(prefix.len() - 1) * d..];
        Ok((0..self.vocab_size)
            .map(|w| {
                if is_banned(w as u32) {
                    f64::NEG_INFINITY
                } else {
                    let wr = &self.params.w_out[w * d..(w + 1) * d];
                    (self.params.b_out[w] + dot(last, wr)).as_f64()
                }
            })
            .collect())
    }
}

struct LnCache<F> {
    y: Vec<F>,
    xhat: Vec<F>,
    rstd: Vec<F>,
}

struct BlockCache<F> {
    x_in: Vec<F>,
    ln1: LnCache<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    att: Vec<F>,
    x1: Vec<F>,
    ln2: LnCache<F>,
    pre: Vec<F>,
    act: Vec<F>,
}

struct Cache<F> {
    z: Vec<F>,
    lnf: LnCache<F>,
    blocks: Vec<BlockCache<F>>,
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `x (rows × n_in) · w (n_in × n_out) + b`.
fn linear<F: Scalar>(x: &[F], rows: usize, n_in: usize, w: &[F], b: &[F], n_out: usize) -> Vec<F> {
    let mut y = vec![F::zero(); rows * n_out];
    for r in 0..rows {
        let yr = &mut y[r * n_out..(r + 1) * n_out];
        yr.copy_from_slice(b);
        for i in 0..n_in {
            let xi = x[r * n_in + i];
            if xi == F::zero() {
                continue;
            }
            let wr = &w[i * n_out..(i + 1) * n_out];
            for (o, &wv) in yr.iter_mut().zip(wr) {
                *o = *o + xi * wv;
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients of [`linear`]; returns `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<F: Scalar>(
    x: &[F],
    dy: &[F],
    rows: usize,
    n_in: usize,
    n_out: usize,
    w: &[F],
    dw: &mut [F],
    db: &mut [F],
) -> Vec<F> {
    let mut dx = vec![F::zero(); rows * n_in];
    for r in 0..rows {
        let dyr = &dy[r * n_out..(r + 1) * n_out];
        for (o, &g) in dyr.iter().enumerate() {
            db[o] = db[o] + g;
        }
        for i in 0..n_in {
            let xi = x[r * n_in + i];
            let wr = &w[i * n_out..(i + 1) * n_out];
            let dwr = &mut dw[i * n_out..(i + 1) * n_out];
            let mut acc = F::zero();
            for o in 0..n_out {
                dwr[o] = dwr[o] + xi * dyr[o];
                acc = acc + wr[o] * dyr[o];
            }
            dx[r * n_in + i] = acc;
        }
    }
    dx
}

fn layer_norm<F: Scalar>(x: &[F], rows: usize, d: usize, g: &[F], b: &[F]) -> LnCache<F> {
    let mut y = vec![F::zero(); rows * d];
    let mut xhat = vec![F::zero(); rows * d];
    let mut rstd = vec![F::zero(); rows];
    let n = F::lit(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<F>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rs = F::one() / (var + F::lit(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = g[j] * h + b[j];
        }
    }
    LnCache { y, xhat, rstd }
}

fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    c: &LnCache<F>,
    rows: usize,
    d: usize,
    g: &[F],
    dg: &mut [F],
    db: &mut [F],
) -> Vec<F> {
    let mut dx = vec![F::zero(); rows * d];
    let n = F::lit(d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &c.xhat[r * d..(r + 1) * d];
        let mut mean_dh = F::zero();
        let mut mean_dh_xh = F::zero();
        for j in 0..d {
            dg[j] = dg[j] + dyr[j] * xh[j];
            db[j] = db[j] + dyr[j];
            let dh = dyr[j] * g[j];
            mean_dh = mean_dh + dh;
            mean_dh_xh = mean_dh_xh + dh * xh[j];
        }
        mean_dh = mean_dh / n;
        mean_dh_xh = mean_dh_xh / n;
        for j in 0..d {
            let dh = dyr[j] * g[j];
            dx[r * d + j] = c.rstd[r] * (dh - mean_dh - xh[j] * mean_dh_xh);
        }
    }
    dx
}

fn gelu<F: Scalar>(x: F) -> F {
    let k = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = F::lit(0.044715);
    let half = F::lit(0.5);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let k = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = F::lit(0.044715);
    let half = F::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::lit(3.0) * c * x * x)
}
