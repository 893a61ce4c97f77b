//! ESIM-style context/response compatibility scorer and the margin-shifted
//! reward derived from it.
//!
//! Pipeline: shared embeddings, a bidirectional GRU encoding layer, soft
//! cross-attention in both directions, enhancement `[a; ã; a-ã; a*ã]`, a
//! ReLU projection, a bidirectional GRU composition layer, masked max+avg
//! pooling of both sides, and a two-hidden-layer tanh MLP with a sigmoid
//! output. Parameters live under `esim.`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::nn::{init_linear, linear};
use crate::backend::{
    init_normal, Adam, AdamConfig, BackendError, Float, Graph, ParameterStore, Tensor, Var, MASK_FILL,
};
use crate::corpus::{TrainingPair, UtterancePool, PAD};
use crate::metrics::roc_auc;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("scorer inputs must be non-empty")]
    EmptyInput,
    #[error("margin {0} outside [0, 1]")]
    Margin(f64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no training pairs")]
    NoPairs,
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsimConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub mlp_dims: [usize; 2],
    pub dropout: f64,
}

impl EsimConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            hidden_dim: 64,
            mlp_dims: [128, 64],
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab_size, self.embed_dim, self.hidden_dim, self.mlp_dims[0], self.mlp_dims[1]];
        if dims.contains(&0) {
            return Err(RetrievalError::Config(format!("all dims must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Sigmoid output of a retrieval model, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RetrievalScore(f64);

impl RetrievalScore {
    pub fn new(value: f64) -> Self {
        Self(value.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `score - m`, in `[-m, 1 - m]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Reward(f64);

impl Reward {
    pub fn value(self) -> f64 {
        self.0
    }

    /// Direct construction, for tests and analytic checks.
    pub fn from_value(v: f64) -> Self {
        Self(v)
    }
}

pub fn r3(score: RetrievalScore, margin: f64) -> Result<Reward> {
    if !(0.0..=1.0).contains(&margin) {
        return Err(RetrievalError::Margin(margin));
    }
    Ok(Reward(score.0 - margin))
}

/// Any frozen `(context, response) -> [0, 1]` scorer can serve as the reward.
pub trait ResponseScorer {
    fn score_batch(&self, pairs: &[(&[u32], &[u32])]) -> Result<Vec<RetrievalScore>>;

    fn score(&self, context: &[u32], response: &[u32]) -> Result<RetrievalScore> {
        Ok(self.score_batch(&[(context, response)])?[0])
    }

    fn reward(&self, context: &[u32], response: &[u32], margin: f64) -> Result<Reward> {
        r3(self.score(context, response)?, margin)
    }
}

/// Scores every pair with the same value.
#[derive(Clone, Copy, Debug)]
pub struct ConstantScorer(pub f64);

impl ResponseScorer for ConstantScorer {
    fn score_batch(&self, pairs: &[(&[u32], &[u32])]) -> Result<Vec<RetrievalScore>> {
        if pairs.iter().any(|(c, r)| c.is_empty() || r.is_empty()) {
            return Err(RetrievalError::EmptyInput);
        }
        Ok(vec![RetrievalScore::new(self.0); pairs.len()])
    }
}

#[derive(Clone, Debug)]
pub struct Esim {
    pub config: EsimConfig,
}

fn pad_to(seqs: &[&[u32]], len: usize) -> Vec<u32> {
    let mut flat = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        flat.extend_from_slice(s);
        flat.extend(std::iter::repeat_n(PAD, len - s.len()));
    }
    flat
}

impl Esim {
    pub fn new(config: EsimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params<T: Float, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterStore<T>> {
        let c = &self.config;
        let (e, h) = (c.embed_dim, c.hidden_dim);
        let mut s = ParameterStore::new();
        s.insert("esim.embed", init_normal(&[c.vocab_size, e], 1.0 / (e as f64).sqrt(), rng))?;
        for (layer, d_in) in [("enc", e), ("comp", h)] {
            for dir in ["fw", "bw"] {
                let p = format!("esim.{layer}.{dir}");
                s.insert(format!("{p}.wi"), init_normal(&[d_in, 3 * h], 1.0 / (d_in as f64).sqrt(), rng))?;
                s.insert(format!("{p}.bi"), Tensor::zeros(&[3 * h]))?;
                s.insert(format!("{p}.wh"), init_normal(&[h, 3 * h], 1.0 / (h as f64).sqrt(), rng))?;
                s.insert(format!("{p}.bh"), Tensor::zeros(&[3 * h]))?;
            }
        }
        init_linear(&mut s, "esim.proj", 8 * h, h, 1.0 / (8.0 * h as f64).sqrt(), rng)?;
        init_linear(&mut s, "esim.mlp1", 8 * h, c.mlp_dims[0], 1.0 / (8.0 * h as f64).sqrt(), rng)?;
        init_linear(&mut s, "esim.mlp2", c.mlp_dims[0], c.mlp_dims[1], 1.0 / (c.mlp_dims[0] as f64).sqrt(), rng)?;
        init_linear(&mut s, "esim.out", c.mlp_dims[1], 1, 0.01, rng)?;
        Ok(s)
    }

    /// One GRU direction over `x` `[B, L, d_in]`; positions past each length
    /// carry the state through unchanged. Returns `[B, L, h]`.
    fn gru<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParameterStore<T>,
        prefix: &str,
        x: Var,
        lengths: &[usize],
        reverse: bool,
    ) -> Result<Var> {
        let h = self.config.hidden_dim;
        let (b, l) = (g.shape(x)[0], g.shape(x)[1]);
        let wi = g.param(s, &format!("{prefix}.wi"))?;
        let bi = g.param(s, &format!("{prefix}.bi"))?;
        let xp = g.matmul(x, wi)?;
        let xp = g.add(xp, bi)?;
        let wh = g.param(s, &format!("{prefix}.wh"))?;
        let bh = g.param(s, &format!("{prefix}.bh"))?;
        let mut state = g.constant(Tensor::zeros(&[b, h]));
        let mut outputs = vec![state; l];
        let order: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
        for t in order {
            let xt = g.narrow(xp, 1, t, 1)?;
            let xt = g.reshape(xt, &[b, 3 * h])?;
            let hp = g.matmul(state, wh)?;
            let hp = g.add(hp, bh)?;
            let gate = |g: &mut Graph<T>, v: Var, i: usize| g.narrow(v, 1, i * h, h);
            let (xr, xz, xn) = (gate(g, xt, 0)?, gate(g, xt, 1)?, gate(g, xt, 2)?);
            let (hr, hz, hn) = (gate(g, hp, 0)?, gate(g, hp, 1)?, gate(g, hp, 2)?);
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r);
            let z = g.add(xz, hz)?;
            let z = g.sigmoid(z);
            let rn = g.mul(r, hn)?;
            let n = g.add(xn, rn)?;
            let n = g.tanh(n);
            // (1 - z) * n + z * h  ==  n + z * (h - n)
            let diff = g.sub(state, n)?;
            let zd = g.mul(z, diff)?;
            let next = g.add(n, zd)?;
            state = if lengths.iter().all(|&len| t < len) {
                next
            } else {
                let keep: Vec<T> = (0..b)
                    .flat_map(|bi| std::iter::repeat_n(if t < lengths[bi] { T::one() } else { T::zero() }, h))
                    .collect();
                let hold: Vec<T> = keep.iter().map(|&k| T::one() - k).collect();
                let a = g.mul_const(next, keep)?;
                let c = g.mul_const(state, hold)?;
                g.add(a, c)?
            };
            outputs[t] = g.reshape(state, &[b, 1, h])?;
        }
        Ok(g.concat(&outputs, 1)?)
    }

    fn bigru<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParameterStore<T>,
        prefix: &str,
        x: Var,
        lengths: &[usize],
    ) -> Result<Var> {
        let fw = self.gru(g, s, &format!("{prefix}.fw"), x, lengths, false)?;
        let bw = self.gru(g, s, &format!("{prefix}.bw"), x, lengths, true)?;
        Ok(g.concat(&[fw, bw], 2)?)
    }

    /// Pads `x` `[B, L, d]` with zeros to `[B, len, d]`.
    fn pad_seq<T: Float>(g: &mut Graph<T>, x: Var, len: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s[1] == len {
            return Ok(x);
        }
        let z = g.constant(Tensor::zeros(&[s[0], len - s[1], s[2]]));
        Ok(g.concat(&[x, z], 1)?)
    }

    /// Soft alignment of `query` over `keys`, with padded keys masked.
    fn align<T: Float>(g: &mut Graph<T>, energy: Var, key_lengths: &[usize], values: Var) -> Result<Var> {
        let s = g.shape(energy).to_vec();
        let (b, lq, lk) = (s[0], s[1], s[2]);
        let mask: Vec<bool> = (0..b * lq * lk).map(|i| (i % lk) >= key_lengths[i / (lq * lk)]).collect();
        let e = g.masked_fill(energy, &mask, T::lit(MASK_FILL))?;
        let w = g.softmax(e)?;
        Ok(g.matmul(w, values)?)
    }

    fn enhance<T: Float>(g: &mut Graph<T>, a: Var, aligned: Var) -> Result<Var> {
        let diff = g.sub(a, aligned)?;
        let prod = g.mul(a, aligned)?;
        Ok(g.concat(&[a, aligned, diff, prod], 2)?)
    }

    /// Pre-sigmoid logits `[B]` for aligned batches of contexts and responses.
    pub fn logits<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParameterStore<T>,
        contexts: &[&[u32]],
        responses: &[&[u32]],
    ) -> Result<Var> {
        if contexts.is_empty()
            || contexts.len() != responses.len()
            || contexts.iter().chain(responses).any(|x| x.is_empty())
        {
            return Err(RetrievalError::EmptyInput);
        }
        let b = contexts.len();
        let (h, e) = (self.config.hidden_dim, self.config.embed_dim);
        let lc_lens: Vec<usize> = contexts.iter().map(|c| c.len()).collect();
        let lr_lens: Vec<usize> = responses.iter().map(|r| r.len()).collect();
        let lc = *lc_lens.iter().max().unwrap();
        let lr = *lr_lens.iter().max().unwrap();
        let l = lc.max(lr);

        // both sides share one encoder pass: rows [0, B) are contexts
        let mut ids = pad_to(contexts, l);
        ids.extend(pad_to(responses, l));
        let lengths: Vec<usize> = lc_lens.iter().chain(&lr_lens).copied().collect();
        let table = g.param(s, "esim.embed")?;
        let ids: Vec<usize> = ids.into_iter().map(|i| i as usize).collect();
        let x = g.embedding(table, &ids)?;
        let x = g.reshape(x, &[2 * b, l, e])?;
        let x = g.dropout(x, self.config.dropout)?;
        let enc = self.bigru(g, s, "esim.enc", x, &lengths)?;
        let a_full = g.narrow(enc, 0, 0, b)?;
        let a = g.narrow(a_full, 1, 0, lc)?;
        let b_full = g.narrow(enc, 0, b, b)?;
        let bb = g.narrow(b_full, 1, 0, lr)?;

        let bt = g.transpose(bb, 1, 2)?;
        let energy = g.matmul(a, bt)?;
        let a_tilde = Self::align(g, energy, &lr_lens, bb)?;
        let energy_t = g.transpose(energy, 1, 2)?;
        let b_tilde = Self::align(g, energy_t, &lc_lens, a)?;

        let ma = Self::enhance(g, a, a_tilde)?;
        let mb = Self::enhance(g, bb, b_tilde)?;
        let ma = Self::pad_seq(g, ma, l)?;
        let mb = Self::pad_seq(g, mb, l)?;
        let m = g.concat(&[ma, mb], 0)?;
        let m = linear(g, s, "esim.proj", m)?;
        let m = g.relu(m);
        let m = g.dropout(m, self.config.dropout)?;
        let comp = self.bigru(g, s, "esim.comp", m, &lengths)?;
        let va = g.narrow(comp, 0, 0, b)?;
        let vb = g.narrow(comp, 0, b, b)?;
        let pooled = [
            g.max_pool(va, &lc_lens)?,
            g.avg_pool(va, &lc_lens)?,
            g.max_pool(vb, &lr_lens)?,
            g.avg_pool(vb, &lr_lens)?,
        ];
        let v = g.concat(&pooled, 1)?;
        debug_assert_eq!(g.shape(v), &[b, 8 * h]);
        let z = linear(g, s, "esim.mlp1", v)?;
        let z = g.tanh(z);
        let z = g.dropout(z, self.config.dropout)?;
        let z = linear(g, s, "esim.mlp2", z)?;
        let z = g.tanh(z);
        let z = linear(g, s, "esim.out", z)?;
        Ok(g.reshape(z, &[b])?)
    }

    pub fn scores<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParameterStore<T>,
        contexts: &[&[u32]],
        responses: &[&[u32]],
    ) -> Result<Var> {
        let z = self.logits(g, s, contexts, responses)?;
        Ok(g.sigmoid(z))
    }

    /// Mean binary cross-entropy of logits against 0/1 labels.
    pub fn bce_loss<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParameterStore<T>,
        contexts: &[&[u32]],
        responses: &[&[u32]],
        labels: &[f64],
    ) -> Result<Var> {
        let z = self.logits(g, s, contexts, responses)?;
        let sp = g.softplus(z);
        let y: Vec<T> = labels.iter().map(|&v| T::lit(v)).collect();
        let yz = g.mul_const(z, y)?;
        let per = g.sub(sp, yz)?;
        Ok(g.mean(per))
    }
}

/// A trained ESIM with frozen parameters.
#[derive(Clone, Debug)]
pub struct EsimScorer {
    pub model: Esim,
    pub params: ParameterStore<f32>,
}

const SCORE_CHUNK: usize = 64;

impl ResponseScorer for EsimScorer {
    fn score_batch(&self, pairs: &[(&[u32], &[u32])]) -> Result<Vec<RetrievalScore>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(SCORE_CHUNK) {
            let ctx: Vec<&[u32]> = chunk.iter().map(|p| p.0).collect();
            let resp: Vec<&[u32]> = chunk.iter().map(|p| p.1).collect();
            let mut g = Graph::inference();
            let sc = self.model.scores(&mut g, &self.params, &ctx, &resp)?;
            out.extend(g.value(sc).data().iter().map(|&v| RetrievalScore::new(v as f64)));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Random negatives per positive per epoch.
    pub negatives: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub patience: usize,
    /// Distractors per validation context, drawn from other validation
    /// responses (one positive each).
    pub val_negatives: usize,
    /// Control run: labels are permuted at random, in training and validation.
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for RetrievalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            negatives: 1,
            lr: 1e-3,
            warmup_steps: 100,
            patience: 3,
            val_negatives: 9,
            shuffle_labels: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug)]
pub struct RetrievalRun {
    pub params: ParameterStore<f32>,
    pub epochs: Vec<RetrievalEpoch>,
    pub best_epoch: usize,
}

/// Labeled `(context, response, label)` triples: each pair's positive plus
/// `negatives` pool draws.
pub fn labeled_examples<'a, R: Rng + ?Sized>(
    pairs: &'a [TrainingPair],
    pool: &'a UtterancePool,
    negatives: usize,
    rng: &mut R,
) -> Vec<(&'a [u32], &'a [u32], f64)> {
    let mut out = Vec::with_capacity(pairs.len() * (1 + negatives));
    for p in pairs {
        out.push((p.context.flat.as_slice(), p.response.ids(), 1.0));
        for _ in 0..negatives {
            out.push((p.context.flat.as_slice(), pool.sample(rng).ids(), 0.0));
        }
    }
    out
}

/// Ranking set: each pair's own response (label 1) plus `distractors`
/// responses of other pairs in the same split (label 0).
pub fn ranking_examples<'a, R: Rng + ?Sized>(
    pairs: &'a [TrainingPair],
    distractors: usize,
    rng: &mut R,
) -> Vec<(&'a [u32], &'a [u32], f64)> {
    let mut out = Vec::with_capacity(pairs.len() * (1 + distractors));
    if pairs.len() < 2 {
        return out;
    }
    for (i, p) in pairs.iter().enumerate() {
        out.push((p.context.flat.as_slice(), p.response.ids(), 1.0));
        for _ in 0..distractors {
            let mut j = rng.gen_range(0..pairs.len() - 1);
            if j >= i {
                j += 1;
            }
            out.push((p.context.flat.as_slice(), pairs[j].response.ids(), 0.0));
        }
    }
    out
}

fn permute_labels<R: Rng + ?Sized>(examples: &mut [(&[u32], &[u32], f64)], rng: &mut R) {
    let mut labels: Vec<f64> = examples.iter().map(|e| e.2).collect();
    labels.shuffle(rng);
    for (e, l) in examples.iter_mut().zip(labels) {
        e.2 = l;
    }
}

/// Scores `(context, response)` rows with frozen `params`.
pub fn score_examples(model: &Esim, params: &ParameterStore<f32>, rows: &[(&[u32], &[u32])]) -> Result<Vec<f64>> {
    let scorer = EsimScorer {
        model: model.clone(),
        params: params.clone(),
    };
    Ok(scorer.score_batch(rows)?.into_iter().map(RetrievalScore::value).collect())
}

/// Trains ESIM with binary cross-entropy on positives versus random
/// negatives, keeping the parameters of the best validation AUC epoch.
pub fn train_retrieval(
    model: &Esim,
    train: &[TrainingPair],
    valid: &[TrainingPair],
    pool: &UtterancePool,
    cfg: &RetrievalTrainConfig,
) -> Result<RetrievalRun> {
    if train.is_empty() {
        return Err(RetrievalError::NoPairs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: ParameterStore<f32> = model.init_params(&mut rng)?;
    let per_epoch = (train.len() * (1 + cfg.negatives)).div_ceil(cfg.batch_size.max(1));
    let mut adam = Adam::new(AdamConfig {
        peak_lr: cfg.lr,
        warmup_steps: cfg.warmup_steps,
        total_steps: (per_epoch * cfg.epochs.max(1)) as u64 + 1,
        ..AdamConfig::default()
    });

    // fixed validation set, drawn once
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba11);
    let mut val = ranking_examples(valid, cfg.val_negatives, &mut val_rng);
    if cfg.shuffle_labels {
        permute_labels(&mut val, &mut val_rng);
    }
    let val_rows: Vec<(&[u32], &[u32])> = val.iter().map(|e| (e.0, e.1)).collect();
    let val_labels: Vec<bool> = val.iter().map(|e| e.2 > 0.5).collect();

    let mut best: Option<(f64, usize, ParameterStore<f32>)> = None;
    let mut epochs = Vec::new();
    let mut bad = 0;
    for epoch in 1..=cfg.epochs {
        let mut examples = labeled_examples(train, pool, cfg.negatives, &mut rng);
        if cfg.shuffle_labels {
            permute_labels(&mut examples, &mut rng);
        }
        examples.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, batch) in examples.chunks(cfg.batch_size.max(1)).enumerate() {
            let ctx: Vec<&[u32]> = batch.iter().map(|e| e.0).collect();
            let resp: Vec<&[u32]> = batch.iter().map(|e| e.1).collect();
            let labels: Vec<f64> = batch.iter().map(|e| e.2).collect();
            let mut g = Graph::new();
            if model.config.dropout > 0.0 {
                g = g.with_dropout_seed(cfg.seed.wrapping_add((epoch * 1_000_003 + bi) as u64));
            }
            let loss = model.bce_loss(&mut g, &params, &ctx, &resp, &labels)?;
            total += g.value(loss).item() as f64;
            batches += 1;
            g.backward(loss)?;
            params.accumulate_grads(&g);
            adam.step(&mut params);
        }
        let val_auc = if val.is_empty() {
            f64::NAN
        } else {
            roc_auc(&score_examples(model, &params, &val_rows)?, &val_labels)
        };
        epochs.push(RetrievalEpoch {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_auc,
        });
        let improved = best.as_ref().is_none_or(|b| val_auc > b.0 || (val.is_empty() && epoch > b.1));
        if improved {
            best = Some((val_auc, epoch, params.clone()));
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(RetrievalRun {
        params,
        epochs,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Esim, ParameterStore<f32>) {
        let m = Esim::new(EsimConfig {
            vocab_size: 15,
            embed_dim: 6,
            hidden_dim: 5,
            mlp_dims: [7, 4],
            dropout: 0.0,
        })
        .unwrap();
        let s = m.init_params(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        (m, s)
    }

    #[test]
    fn reward_is_score_minus_margin() {
        let r = r3(RetrievalScore::new(0.9), 0.4).unwrap().value();
        assert!((r - 0.5).abs() < 1e-12);
        let r = r3(RetrievalScore::new(0.3), 0.4).unwrap().value();
        assert!((r + 0.1).abs() < 1e-12);
        assert_eq!(r3(RetrievalScore::new(0.3), 0.0).unwrap().value(), 0.3);
        assert!(r3(RetrievalScore::new(0.3), 1.5).is_err());
    }

    #[test]
    fn scores_in_open_unit_interval_and_deterministic() {
        let (m, mut s) = tiny();
        // push the output layer hard to test saturation stays finite
        for v in s.get_mut("esim.out.w").unwrap().data_mut() {
            *v *= 200.0;
        }
        let scorer = EsimScorer { model: m, params: s };
        let pairs: Vec<(&[u32], &[u32])> = vec![(&[5, 6, 3, 7], &[8, 9]), (&[10], &[11, 12, 13, 14, 5])];
        let a = scorer.score_batch(&pairs).unwrap();
        let b = scorer.score_batch(&pairs).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| (0.0..=1.0).contains(&x.value())));
    }

    #[test]
    fn batch_scores_match_single() {
        let (m, s) = tiny();
        let scorer = EsimScorer { model: m, params: s };
        let pairs: Vec<(&[u32], &[u32])> = vec![(&[5, 6, 3, 7], &[8, 9]), (&[10], &[11, 12, 13, 14, 5])];
        let batch = scorer.score_batch(&pairs).unwrap();
        for (p, b) in pairs.iter().zip(batch) {
            let single = scorer.score(p.0, p.1).unwrap();
            assert!((single.value() - b.value()).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_input_is_error() {
        let (m, s) = tiny();
        let scorer = EsimScorer { model: m, params: s };
        assert!(matches!(scorer.score(&[], &[5]), Err(RetrievalError::EmptyInput)));
        assert!(matches!(ConstantScorer(0.5).score(&[5], &[]), Err(RetrievalError::EmptyInput)));
    }

    #[test]
    fn init_loss_near_ln2() {
        let (m, s) = tiny();
        let ctx: Vec<&[u32]> = vec![&[5, 6], &[7, 8, 9], &[10], &[11, 12]];
        let resp: Vec<&[u32]> = vec![&[13], &[14, 5], &[6, 7, 8], &[9]];
        let mut g = Graph::inference();
        let loss = m.bce_loss(&mut g, &s, &ctx, &resp, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((g.value(loss).item() as f64 - 2f64.ln()).abs() < 0.1);
    }

    #[test]
    fn score_is_not_assumed_symmetric() {
        let (m, s) = tiny();
        let scorer = EsimScorer { model: m, params: s };
        let ab = scorer.score(&[5, 6, 7], &[8]).unwrap();
        let ba = scorer.score(&[8], &[5, 6, 7]).unwrap();
        assert_ne!(ab, ba);
    }
}
