//! Transformer encoder-decoder policy.
//!
//! Pre-layer-norm blocks, learned positional embeddings, and a decoder input
//! embedding tied to the output projection. All parameters live under the
//! `s2s.` namespace. Batches are right-padded with [`PAD`]; padded keys are
//! masked out of every attention, so a batched forward pass yields the same
//! bits as running each member alone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::nn::{init_layer_norm, init_linear, layer_norm, linear};
use crate::backend::{init_normal, BackendError, Float, Graph, ParameterStore, Tensor, Var, MASK_FILL};
use crate::corpus::{BOS, EOS, PAD};

#[derive(Debug, thiserror::Error)]
pub enum S2SError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty response")]
    EmptyResponse,
    #[error("empty context")]
    EmptyContext,
    #[error("context length {len} exceeds max_context_len {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error("target length {len} (EOS included) exceeds max_response_len {max}")]
    ResponseTooLong { len: usize, max: usize },
    #[error("top_p must lie in (0, 1], got {0}")]
    TopP(f64),
}

pub type Result<T, E = S2SError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct S2SConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_context_len: usize,
    /// Longest decoder sequence, EOS included.
    pub max_response_len: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl S2SConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, d_model 128.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_context_len: 64,
            max_response_len: 32,
            dropout: 0.0,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(S2SError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= EOS as usize || self.max_context_len == 0 || self.max_response_len == 0 {
            return Err(S2SError::Config("vocab and length limits must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(S2SError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Encoder output: `[B, L, d]` states and the PAD mask of the keys.
#[derive(Clone, Debug)]
pub struct Memory {
    pub states: Var,
    pub key_pad: Vec<bool>,
    pub len: usize,
}

/// Per-step log-probabilities of one target sequence, `[T]` on the graph.
#[derive(Clone, Copy, Debug)]
pub struct LogProbSequence {
    pub steps: Var,
    pub len: usize,
}

impl LogProbSequence {
    pub fn values<T: Float>(&self, g: &Graph<T>) -> Vec<T> {
        g.value(self.steps).data().to_vec()
    }
}

/// Teacher-forced log-probabilities for a padded batch.
#[derive(Clone, Debug)]
pub struct BatchLogProbs {
    /// `[B, T]`, zero at padded positions.
    pub steps: Var,
    /// `[B]` sequence totals.
    pub totals: Var,
    pub lengths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult<T> {
    /// Generated ids, EOS included when emitted.
    pub tokens: Vec<u32>,
    /// `log P(token_t | token_<t, c)` under the full model distribution.
    pub logprobs: Vec<T>,
}

impl<T> DecodeResult<T> {
    /// Tokens with the terminating EOS removed.
    pub fn response(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeStrategy {
    Greedy,
    Nucleus { top_p: f64 },
}

/// Indices of the smallest probability-sorted prefix whose mass reaches
/// `top_p` (ties ordered by lower id), with renormalized probabilities.
pub fn nucleus_filter(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += probs[i];
        // the boundary token is included so kept mass >= top_p
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    kept.into_iter().map(|i| (i, probs[i] / mass)).collect()
}

pub fn sample_nucleus<R: Rng + ?Sized>(probs: &[f64], top_p: f64, rng: &mut R) -> usize {
    let kept = nucleus_filter(probs, top_p);
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for &(i, p) in &kept {
        cum += p;
        if u < cum {
            return i;
        }
    }
    kept.last().map(|&(i, _)| i).unwrap_or(0)
}

/// Lowest id among the maximal entries.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub config: S2SConfig,
}

fn pad_batch(seqs: &[&[u32]]) -> (Vec<u32>, usize) {
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut flat = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        flat.extend_from_slice(s);
        flat.extend(std::iter::repeat_n(PAD, len - s.len()));
    }
    (flat, len)
}

impl Seq2Seq {
    pub fn new(config: S2SConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params<T: Float, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterStore<T>> {
        let c = &self.config;
        let (d, std) = (c.d_model, c.init_std);
        let mut s = ParameterStore::new();
        s.insert("s2s.enc.embed", init_normal(&[c.vocab_size, d], std, rng))?;
        s.insert("s2s.enc.pos", init_normal(&[c.max_context_len, d], std, rng))?;
        s.insert("s2s.dec.embed", init_normal(&[c.vocab_size, d], std, rng))?;
        s.insert("s2s.dec.pos", init_normal(&[c.max_response_len, d], std, rng))?;
        s.insert("s2s.out.b", Tensor::zeros(&[c.vocab_size]))?;
        let attn = |s: &mut ParameterStore<T>, p: &str, rng: &mut R| -> Result<()> {
            for w in ["q", "k", "v", "o"] {
                init_linear(s, &format!("{p}.{w}"), d, d, std, rng)?;
            }
            Ok(())
        };
        let ff = |s: &mut ParameterStore<T>, p: &str, rng: &mut R| -> Result<()> {
            init_linear(s, &format!("{p}.ff1"), d, c.d_ff, std, rng)?;
            init_linear(s, &format!("{p}.ff2"), c.d_ff, d, std, rng)?;
            Ok(())
        };
        for l in 0..c.n_layers {
            let p = format!("s2s.enc.{l}");
            init_layer_norm(&mut s, &format!("{p}.ln1"), d)?;
            attn(&mut s, &format!("{p}.attn"), rng)?;
            init_layer_norm(&mut s, &format!("{p}.ln2"), d)?;
            ff(&mut s, &p, rng)?;

            let p = format!("s2s.dec.{l}");
            init_layer_norm(&mut s, &format!("{p}.ln1"), d)?;
            attn(&mut s, &format!("{p}.self"), rng)?;
            init_layer_norm(&mut s, &format!("{p}.ln2"), d)?;
            attn(&mut s, &format!("{p}.cross"), rng)?;
            init_layer_norm(&mut s, &format!("{p}.ln3"), d)?;
            ff(&mut s, &p, rng)?;
        }
        init_layer_norm(&mut s, "s2s.enc.ln_f", d)?;
        init_layer_norm(&mut s, "s2s.dec.ln_f", d)?;
        Ok(s)
    }

    /// Multi-head attention of `q_in` `[B, Lq, d]` over `kv_in` `[B, Lk, d]`.
    #[allow(clippy::too_many_arguments)]
    fn attention<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParameterStore<T>,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        key_pad: &[bool],
        causal: bool,
    ) -> Result<Var> {
        let (b, lq) = (g.shape(q_in)[0], g.shape(q_in)[1]);
        let lk = g.shape(kv_in)[1];
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = d / h;
        let heads = |g: &mut Graph<T>, x: Var, len: usize| -> Result<Var> {
            let x = g.reshape(x, &[b, len, h, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            Ok(g.reshape(x, &[b * h, len, dh])?)
        };
        let q = linear(g, s, &format!("{prefix}.q"), q_in)?;
        let k = linear(g, s, &format!("{prefix}.k"), kv_in)?;
        let v = linear(g, s, &format!("{prefix}.v"), kv_in)?;
        let q = heads(g, q, lq)?;
        let k = heads(g, k, lk)?;
        let v = heads(g, v, lk)?;
        let kt = g.transpose(k, 1, 2)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let mut mask = Vec::with_capacity(b * h * lq * lk);
        for bi in 0..b {
            for _ in 0..h {
                for i in 0..lq {
                    for j in 0..lk {
                        mask.push(key_pad[bi * lk + j] || (causal && j > i));
                    }
                }
            }
        }
        let scores = g.masked_fill(scores, &mask, T::lit(MASK_FILL))?;
        let att = g.softmax(scores)?;
        let att = g.dropout(att, self.config.dropout)?;
        let ctx = g.matmul(att, v)?;
        let ctx = g.reshape(ctx, &[b, h, lq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, lq, d])?;
        Ok(linear(g, s, &format!("{prefix}.o"), ctx)?)
    }

    fn feed_forward<T: Float>(&self, g: &mut Graph<T>, s: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
        let hdn = linear(g, s, &format!("{prefix}.ff1"), x)?;
        let hdn = g.gelu(hdn);
        let hdn = g.dropout(hdn, self.config.dropout)?;
        Ok(linear(g, s, &format!("{prefix}.ff2"), hdn)?)
    }

    fn residual<T: Float>(&self, g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
        let y = g.dropout(y, self.config.dropout)?;
        Ok(g.add(x, y)?)
    }

    fn embed<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParameterStore<T>,
        side: &str,
        ids: &[u32],
        b: usize,
        len: usize,
    ) -> Result<Var> {
        let table = g.param(s, &format!("s2s.{side}.embed"))?;
        let pos = g.param(s, &format!("s2s.{side}.pos"))?;
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = g.embedding(table, &ids)?;
        let x = g.reshape(x, &[b, len, self.config.d_model])?;
        let p = g.narrow(pos, 0, 0, len)?;
        let x = g.add(x, p)?;
        Ok(g.dropout(x, self.config.dropout)?)
    }

    /// Encodes contexts (right-padded internally; explicit PAD ids are
    /// masked as well).
    pub fn encode<T: Float>(&self, g: &mut Graph<T>, s: &ParameterStore<T>, contexts: &[&[u32]]) -> Result<Memory> {
        for c in contexts {
            if c.is_empty() {
                return Err(S2SError::EmptyContext);
            }
            if c.len() > self.config.max_context_len {
                return Err(S2SError::ContextTooLong {
                    len: c.len(),
                    max: self.config.max_context_len,
                });
            }
        }
        let (flat, len) = pad_batch(contexts);
        let key_pad: Vec<bool> = flat.iter().map(|&t| t == PAD).collect();
        let mut x = self.embed(g, s, "enc", &flat, contexts.len(), len)?;
        for l in 0..self.config.n_layers {
            let p = format!("s2s.enc.{l}");
            let hn = layer_norm(g, s, &format!("{p}.ln1"), x)?;
            let a = self.attention(g, s, &format!("{p}.attn"), hn, hn, &key_pad, false)?;
            x = self.residual(g, x, a)?;
            let hn = layer_norm(g, s, &format!("{p}.ln2"), x)?;
            let f = self.feed_forward(g, s, &p, hn)?;
            x = self.residual(g, x, f)?;
        }
        let states = layer_norm(g, s, "s2s.enc.ln_f", x)?;
        Ok(Memory { states, key_pad, len })
    }

    /// Decoder log-distributions `[B, T, V]` for right-padded decoder inputs.
    pub fn decode_step_logprobs<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParameterStore<T>,
        memory: &Memory,
        inputs: &[&[u32]],
    ) -> Result<Var> {
        let (flat, len) = pad_batch(inputs);
        if len > self.config.max_response_len {
            return Err(S2SError::ResponseTooLong {
                len,
                max: self.config.max_response_len,
            });
        }
        let key_pad: Vec<bool> = flat.iter().map(|&t| t == PAD).collect();
        let b = inputs.len();
        let mut x = self.embed(g, s, "dec", &flat, b, len)?;
        for l in 0..self.config.n_layers {
            let p = format!("s2s.dec.{l}");
            let hn = layer_norm(g, s, &format!("{p}.ln1"), x)?;
            let a = self.attention(g, s, &format!("{p}.self"), hn, hn, &key_pad, true)?;
            x = self.residual(g, x, a)?;
            let hn = layer_norm(g, s, &format!("{p}.ln2"), x)?;
            let a = self.attention(g, s, &format!("{p}.cross"), hn, memory.states, &memory.key_pad, false)?;
            x = self.residual(g, x, a)?;
            let hn = layer_norm(g, s, &format!("{p}.ln3"), x)?;
            let f = self.feed_forward(g, s, &p, hn)?;
            x = self.residual(g, x, f)?;
        }
        let x = layer_norm(g, s, "s2s.dec.ln_f", x)?;
        let table = g.param(s, "s2s.dec.embed")?;
        let proj = g.transpose(table, 0, 1)?;
        let logits = g.matmul(x, proj)?;
        let bias = g.param(s, "s2s.out.b")?;
        let logits = g.add(logits, bias)?;
        Ok(g.log_softmax(logits)?)
    }

    /// Teacher-forced log-probabilities of exact target sequences (EOS, if
    /// wanted, must already be appended). Step `t` sees BOS and `target[..t]`.
    pub fn batch_logprobs<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParameterStore<T>,
        contexts: &[&[u32]],
        targets: &[&[u32]],
    ) -> Result<BatchLogProbs> {
        if let Some(t) = targets.iter().find(|t| t.is_empty() || t.len() > self.config.max_response_len) {
            return Err(if t.is_empty() {
                S2SError::EmptyResponse
            } else {
                S2SError::ResponseTooLong {
                    len: t.len(),
                    max: self.config.max_response_len,
                }
            });
        }
        let memory = self.encode(g, s, contexts)?;
        let inputs: Vec<Vec<u32>> = targets
            .iter()
            .map(|t| std::iter::once(BOS).chain(t[..t.len() - 1].iter().copied()).collect())
            .collect();
        let input_refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let logp = self.decode_step_logprobs(g, s, &memory, &input_refs)?;
        let (b, len, v) = (targets.len(), g.shape(logp)[1], self.config.vocab_size);
        let flat = g.reshape(logp, &[b * len, v])?;
        let mut idx = Vec::with_capacity(b * len);
        let mut mask = Vec::with_capacity(b * len);
        for t in targets {
            for i in 0..len {
                idx.push(t.get(i).map_or(0, |&x| x as usize));
                mask.push(if i < t.len() { T::one() } else { T::zero() });
            }
        }
        let picked = g.pick(flat, &idx)?;
        let picked = g.mul_const(picked, mask)?;
        let steps = g.reshape(picked, &[b, len])?;
        let totals = g.sum_axis(steps, 1)?;
        Ok(BatchLogProbs {
            steps,
            totals,
            lengths: targets.iter().map(|t| t.len()).collect(),
        })
    }

    /// Log-probabilities of `response` followed by EOS.
    pub fn response_logprobs<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParameterStore<T>,
        context: &[u32],
        response: &[u32],
    ) -> Result<LogProbSequence> {
        if response.is_empty() {
            return Err(S2SError::EmptyResponse);
        }
        let target: Vec<u32> = response.iter().copied().chain(std::iter::once(EOS)).collect();
        self.sequence_logprobs(g, s, context, &target)
    }

    /// Log-probabilities of an exact decoder target sequence.
    pub fn sequence_logprobs<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParameterStore<T>,
        context: &[u32],
        target: &[u32],
    ) -> Result<LogProbSequence> {
        let batch = self.batch_logprobs(g, s, &[context], &[target])?;
        let steps = g.reshape(batch.steps, &[target.len()])?;
        Ok(LogProbSequence {
            steps,
            len: target.len(),
        })
    }

    /// Autoregressive decoding of a batch; sequences stop at EOS or `t_max`.
    /// Nucleus draws consume `rng` step by step in batch order.
    pub fn decode_batch<T: Float, R: Rng + ?Sized>(
        &self,
        s: &ParameterStore<T>,
        contexts: &[&[u32]],
        strategy: DecodeStrategy,
        t_max: usize,
        rng: &mut R,
    ) -> Result<Vec<DecodeResult<T>>> {
        if let DecodeStrategy::Nucleus { top_p } = strategy {
            if !(top_p > 0.0 && top_p <= 1.0) {
                return Err(S2SError::TopP(top_p));
            }
        }
        let t_max = t_max.min(self.config.max_response_len);
        let mut g = Graph::inference();
        let memory = self.encode(&mut g, s, contexts)?;
        let b = contexts.len();
        let v = self.config.vocab_size;
        let mut results: Vec<DecodeResult<T>> = (0..b)
            .map(|_| DecodeResult {
                tokens: Vec::new(),
                logprobs: Vec::new(),
            })
            .collect();
        let mut done = vec![false; b];
        for step in 0..t_max {
            if done.iter().all(|&d| d) {
                break;
            }
            let inputs: Vec<Vec<u32>> = results
                .iter()
                .map(|r| {
                    let mut inp = vec![BOS];
                    inp.extend_from_slice(&r.tokens);
                    inp.resize(step + 1, PAD);
                    inp
                })
                .collect();
            let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
            let logp = self.decode_step_logprobs(&mut g, s, &memory, &refs)?;
            let data = g.value(logp).data();
            for bi in 0..b {
                if done[bi] {
                    continue;
                }
                let row = &data[(bi * (step + 1) + step) * v..(bi * (step + 1) + step + 1) * v];
                let tok = match strategy {
                    DecodeStrategy::Greedy => argmax(row),
                    DecodeStrategy::Nucleus { top_p } => {
                        let probs: Vec<f64> = row.iter().map(|x| x.to_f64().unwrap().exp()).collect();
                        sample_nucleus(&probs, top_p, rng)
                    }
                };
                results[bi].tokens.push(tok as u32);
                results[bi].logprobs.push(row[tok]);
                if tok as u32 == EOS {
                    done[bi] = true;
                }
            }
        }
        Ok(results)
    }

    pub fn greedy_decode<T: Float>(&self, s: &ParameterStore<T>, context: &[u32], t_max: usize) -> Result<DecodeResult<T>> {
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        Ok(self
            .decode_batch(s, &[context], DecodeStrategy::Greedy, t_max, &mut unused)?
            .remove(0))
    }

    pub fn nucleus_decode<T: Float, R: Rng + ?Sized>(
        &self,
        s: &ParameterStore<T>,
        context: &[u32],
        top_p: f64,
        t_max: usize,
        rng: &mut R,
    ) -> Result<DecodeResult<T>> {
        Ok(self
            .decode_batch(s, &[context], DecodeStrategy::Nucleus { top_p }, t_max, rng)?
            .remove(0))
    }
}
