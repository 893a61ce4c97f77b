//! Reward-weighted sequence likelihood: candidate selection under the
//! mix policy, the CORAL loss, and the cross-entropy baseline.
//!
//! The loss for one candidate `r` of context `c` is
//! `-R(c, r) * sum_t log P(r_t | r_<t, c)` with `R = score - margin` held
//! constant. With `p_plus = 1` and `margin = 0` it is the cross-entropy
//! weighted by the scorer's confidence in the ground truth.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, Float, Graph, ParameterStore, Var};
use crate::corpus::{TrainingPair, UtterancePool, EOS};
use crate::retrieval::{r3, ResponseScorer, RetrievalError, RetrievalScore, Reward};
use crate::s2s::{DecodeStrategy, LogProbSequence, S2SError, Seq2Seq};

#[derive(Debug, thiserror::Error)]
pub enum CoralError {
    #[error("invalid coral config: {0}")]
    Config(String),
    #[error("unknown candidate mode {0:?} (expected nucleus or random-negative)")]
    UnknownMode(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Model(#[from] S2SError),
    #[error(transparent)]
    Scorer(#[from] RetrievalError),
    #[error("empty log-probability sequence")]
    EmptyLogProbs,
}

pub type Result<T, E = CoralError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateMode {
    Nucleus,
    RandomNegative,
}

impl CandidateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CandidateMode::Nucleus => "nucleus",
            CandidateMode::RandomNegative => "random-negative",
        }
    }
}

impl std::fmt::Display for CandidateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CandidateMode {
    type Err = CoralError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nucleus" => Ok(CandidateMode::Nucleus),
            "random-negative" | "random_negative" | "rn" => Ok(CandidateMode::RandomNegative),
            other => Err(CoralError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoralConfig {
    /// Probability of training on the ground-truth response.
    pub p_plus: f64,
    pub margin: f64,
    pub mode: CandidateMode,
    pub top_p: f64,
    /// Always include the ground-truth term and add a sampled term with
    /// probability `1 - p_plus`, instead of choosing one of the two.
    pub both_terms: bool,
}

impl Default for CoralConfig {
    fn default() -> Self {
        Self {
            p_plus: 0.8,
            margin: 0.4,
            mode: CandidateMode::Nucleus,
            top_p: 0.9,
            both_terms: false,
        }
    }
}

impl CoralConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_plus) {
            return Err(CoralError::Config(format!("p_plus {} outside [0, 1]", self.p_plus)));
        }
        if !(0.0..=1.0).contains(&self.margin) {
            return Err(CoralError::Config(format!("margin {} outside [0, 1]", self.margin)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(CoralError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateSource {
    GroundTruth,
    Nucleus,
    RandomNegative,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateResponse {
    /// Decoder targets, EOS included when present. Nucleus samples that
    /// hit the length cap carry no EOS.
    pub tokens: Vec<u32>,
    pub source: CandidateSource,
}

impl CandidateResponse {
    pub fn ground_truth(pair: &TrainingPair) -> Self {
        Self::from_response(pair.response.ids(), CandidateSource::GroundTruth)
    }

    pub fn from_response(response: &[u32], source: CandidateSource) -> Self {
        let mut tokens = response.to_vec();
        tokens.push(EOS);
        Self { tokens, source }
    }

    /// Number of scored decoder steps.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The response text ids, without EOS.
    pub fn response(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Which terms one batch item contributes, decided before any decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemPlan {
    pub ground_truth: bool,
    pub sampled: bool,
}

/// One `rand()` per item: above `p_plus` means a sampled candidate.
pub fn plan_item<R: Rng + ?Sized>(cfg: &CoralConfig, rng: &mut R) -> ItemPlan {
    let sampled = rng.gen::<f64>() > cfg.p_plus;
    ItemPlan {
        ground_truth: cfg.both_terms || !sampled,
        sampled,
    }
}

/// Candidates for a batch, in item order. Each item contributes its
/// ground-truth term, a sampled term, or (with `both_terms`) possibly both.
/// Returned with the index of the batch item each candidate belongs to.
pub fn select_candidates<R: Rng + ?Sized>(
    pairs: &[&TrainingPair],
    cfg: &CoralConfig,
    pool: &UtterancePool,
    model: &Seq2Seq,
    params: &ParameterStore<f32>,
    rng: &mut R,
) -> Result<Vec<(usize, CandidateResponse)>> {
    let plans: Vec<ItemPlan> = pairs.iter().map(|_| plan_item(cfg, rng)).collect();
    let sampled_idx: Vec<usize> = (0..pairs.len()).filter(|&i| plans[i].sampled).collect();
    let mut sampled: Vec<CandidateResponse> = match cfg.mode {
        CandidateMode::RandomNegative => sampled_idx
            .iter()
            .map(|_| CandidateResponse::from_response(pool.sample(rng).ids(), CandidateSource::RandomNegative))
            .collect(),
        CandidateMode::Nucleus if sampled_idx.is_empty() => Vec::new(),
        CandidateMode::Nucleus => {
            let ctx: Vec<&[u32]> = sampled_idx.iter().map(|&i| pairs[i].context.flat.as_slice()).collect();
            model
                .decode_batch(
                    params,
                    &ctx,
                    DecodeStrategy::Nucleus { top_p: cfg.top_p },
                    model.config.max_response_len,
                    rng,
                )?
                .into_iter()
                .map(|d| CandidateResponse {
                    tokens: d.tokens,
                    source: CandidateSource::Nucleus,
                })
                .collect()
        }
    };
    let mut out = Vec::new();
    let mut drawn = sampled.drain(..);
    for (i, (pair, plan)) in pairs.iter().zip(&plans).enumerate() {
        if plan.ground_truth {
            out.push((i, CandidateResponse::ground_truth(pair)));
        }
        if plan.sampled {
            out.push((i, drawn.next().expect("one draw per sampled item")));
        }
    }
    Ok(out)
}

/// The either/or choice for a single pair: ground truth with probability
/// `p_plus`, otherwise a nucleus sample or a random pool utterance.
pub fn select_candidate<R: Rng + ?Sized>(
    pair: &TrainingPair,
    cfg: &CoralConfig,
    pool: &UtterancePool,
    model: &Seq2Seq,
    params: &ParameterStore<f32>,
    rng: &mut R,
) -> Result<CandidateResponse> {
    let single = CoralConfig {
        both_terms: false,
        ..cfg.clone()
    };
    let mut c = select_candidates(&[pair], &single, pool, model, params, rng)?;
    Ok(c.remove(0).1)
}

/// Scores candidates against their contexts. An empty response (a bare
/// EOS) is scored 0.
pub fn candidate_rewards(
    scorer: &dyn ResponseScorer,
    contexts: &[&[u32]],
    candidates: &[&CandidateResponse],
    margin: f64,
) -> Result<Vec<Reward>> {
    let scorable: Vec<usize> = (0..candidates.len())
        .filter(|&i| !candidates[i].response().is_empty())
        .collect();
    let rows: Vec<(&[u32], &[u32])> = scorable.iter().map(|&i| (contexts[i], candidates[i].response())).collect();
    let mut scores = vec![RetrievalScore::new(0.0); candidates.len()];
    if !rows.is_empty() {
        for (i, s) in scorable.into_iter().zip(scorer.score_batch(&rows)?) {
            scores[i] = s;
        }
    }
    scores.into_iter().map(|s| Ok(r3(s, margin)?)).collect()
}

/// `-reward * sum(logprobs)`.
pub fn coral_loss<T: Float>(g: &mut Graph<T>, logprobs: &LogProbSequence, reward: Reward) -> Result<Var> {
    if logprobs.len == 0 {
        return Err(CoralError::EmptyLogProbs);
    }
    let total = g.sum(logprobs.steps);
    Ok(g.scale(total, T::lit(-reward.value())))
}

/// Sum of the positive term and an optional sampled term.
pub fn mixed_coral_loss<T: Float>(
    g: &mut Graph<T>,
    pos: (&LogProbSequence, Reward),
    neg: Option<(&LogProbSequence, Reward)>,
) -> Result<Var> {
    let lp = coral_loss(g, pos.0, pos.1)?;
    match neg {
        None => Ok(lp),
        Some((seq, r)) => {
            let ln = coral_loss(g, seq, r)?;
            Ok(g.add(lp, ln)?)
        }
    }
}

/// `-sum(logprobs)`.
pub fn ce_loss<T: Float>(g: &mut Graph<T>, logprobs: &LogProbSequence) -> Result<Var> {
    if logprobs.len == 0 {
        return Err(CoralError::EmptyLogProbs);
    }
    let total = g.sum(logprobs.steps);
    Ok(g.scale(total, T::lit(-1.0)))
}

/// `-(1/B) sum_i w_i * totals_i` for a `[N]` vector of sequence totals
/// drawn from a batch of `batch_size` items.
pub fn batch_weighted_loss<T: Float>(g: &mut Graph<T>, totals: Var, weights: &[f64], batch_size: usize) -> Result<Var> {
    let w: Vec<T> = weights.iter().map(|&w| T::lit(-w)).collect();
    let weighted = g.mul_const(totals, w)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, T::lit(1.0 / batch_size as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Tensor;
    use crate::corpus::{DialogContext, Utterance};
    use crate::s2s::S2SConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(g: &mut Graph<f64>, v: &[f64]) -> LogProbSequence {
        let steps = g.leaf(Tensor::from_vec(v.to_vec()), true);
        LogProbSequence { steps, len: v.len() }
    }

    #[test]
    fn loss_arithmetic() {
        let mut g = Graph::new();
        let s = seq(&mut g, &[-1.0, -2.0]);
        let l = coral_loss(&mut g, &s, Reward::from_value(0.5)).unwrap();
        assert_eq!(g.value(l).item(), 1.5);
        let s = seq(&mut g, &[-1.0, -1.0, -1.0]);
        let l = ce_loss(&mut g, &s).unwrap();
        assert_eq!(g.value(l).item(), 3.0);
    }

    #[test]
    fn zero_reward_annihilates() {
        let mut g = Graph::new();
        let s = seq(&mut g, &[-1.0, -2.0]);
        let l = coral_loss(&mut g, &s, Reward::from_value(0.0)).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(s.steps).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mixed_loss_is_linear() {
        let mut g = Graph::new();
        let p = seq(&mut g, &[-0.5, -1.5]);
        let n = seq(&mut g, &[-3.0]);
        let alone = mixed_coral_loss(&mut g, (&p, Reward::from_value(0.5)), None).unwrap();
        assert_eq!(g.value(alone).item(), 1.0);
        let both = mixed_coral_loss(&mut g, (&p, Reward::from_value(0.5)), Some((&n, Reward::from_value(-0.1)))).unwrap();
        let expect = -0.5 * -2.0 + 0.1 * -3.0;
        assert!((g.value(both).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_logprobs_rejected() {
        let mut g = Graph::<f64>::new();
        let steps = g.leaf(Tensor::zeros(&[0]), true);
        let s = LogProbSequence { steps, len: 0 };
        assert!(matches!(ce_loss(&mut g, &s), Err(CoralError::EmptyLogProbs)));
    }

    #[test]
    fn config_ranges() {
        assert!(CoralConfig::default().validate().is_ok());
        for bad in [
            CoralConfig { p_plus: 1.1, ..Default::default() },
            CoralConfig { margin: -0.1, ..Default::default() },
            CoralConfig { top_p: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!("random-negative".parse::<CandidateMode>().unwrap(), CandidateMode::RandomNegative);
        assert!("beam".parse::<CandidateMode>().is_err());
    }

    fn fixture() -> (TrainingPair, UtterancePool, Seq2Seq, ParameterStore<f32>) {
        let pair = TrainingPair {
            context: DialogContext::new(vec![Utterance(vec![5, 6])]),
            response: Utterance(vec![7, 8]),
        };
        let pool = UtterancePool::new((5..12).map(|i| Utterance(vec![i])).collect()).unwrap();
        let model = Seq2Seq::new(S2SConfig {
            vocab_size: 12,
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_context_len: 8,
            max_response_len: 4,
            dropout: 0.0,
            init_std: 0.1,
        })
        .unwrap();
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (pair, pool, model, params)
    }

    #[test]
    fn p_plus_extremes() {
        let (pair, pool, model, params) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = CoralConfig {
            p_plus: 1.0,
            mode: CandidateMode::RandomNegative,
            ..Default::default()
        };
        for _ in 0..200 {
            let c = select_candidate(&pair, &cfg, &pool, &model, &params, &mut rng).unwrap();
            assert_eq!(c.source, CandidateSource::GroundTruth);
            assert_eq!(c.tokens, vec![7, 8, EOS]);
        }
        cfg.p_plus = 0.0;
        let mut counts = [0usize; 12];
        for _ in 0..7000 {
            let c = select_candidate(&pair, &cfg, &pool, &model, &params, &mut rng).unwrap();
            assert_eq!(c.source, CandidateSource::RandomNegative);
            counts[c.response()[0] as usize] += 1;
        }
        // uniform over the 7 pool entries: each ~1000, sd ~29
        assert!(counts[5..].iter().all(|&n| (850..1150).contains(&n)), "{counts:?}");
    }

    #[test]
    fn ground_truth_fraction_binomial() {
        let (pair, pool, model, params) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = CoralConfig {
            p_plus: 0.8,
            mode: CandidateMode::RandomNegative,
            ..Default::default()
        };
        let gt = (0..10_000)
            .filter(|_| {
                select_candidate(&pair, &cfg, &pool, &model, &params, &mut rng).unwrap().source
                    == CandidateSource::GroundTruth
            })
            .count();
        assert!((7_800..=8_200).contains(&gt), "{gt}");
    }

    #[test]
    fn nucleus_candidates_come_from_the_model() {
        let (pair, pool, model, params) = fixture();
        let cfg = CoralConfig {
            p_plus: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = select_candidate(&pair, &cfg, &pool, &model, &params, &mut rng).unwrap();
        assert_eq!(c.source, CandidateSource::Nucleus);
        assert!(!c.is_empty() && c.len() <= 4);
        assert!(c.tokens[..c.len() - 1].iter().all(|&t| t != EOS));
    }

    #[test]
    fn both_terms_always_keeps_ground_truth() {
        let (pair, pool, model, params) = fixture();
        let cfg = CoralConfig {
            p_plus: 0.5,
            mode: CandidateMode::RandomNegative,
            both_terms: true,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = vec![&pair; 50];
        let c = select_candidates(&pairs, &cfg, &pool, &model, &params, &mut rng).unwrap();
        for i in 0..50 {
            let mine: Vec<_> = c.iter().filter(|(j, _)| *j == i).collect();
            assert_eq!(mine[0].1.source, CandidateSource::GroundTruth);
            assert!(mine.len() <= 2);
        }
        assert!(c.len() > 50 && c.len() < 100);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        let sc = crate::retrieval::ConstantScorer(0.7);
        let bare = CandidateResponse {
            tokens: vec![EOS],
            source: CandidateSource::Nucleus,
        };
        let full = CandidateResponse::from_response(&[5], CandidateSource::Nucleus);
        let ctx: Vec<&[u32]> = vec![&[6], &[6]];
        let r = candidate_rewards(&sc, &ctx, &[&bare, &full], 0.2).unwrap();
        assert!((r[0].value() + 0.2).abs() < 1e-12);
        assert!((r[1].value() - 0.5).abs() < 1e-6);
    }
}
