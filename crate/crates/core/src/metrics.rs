//! Corpus-level generation metrics and ranking AUC.
//!
//! All text metrics work on the tokenizer's lowercased surface split, so
//! `"Hello, world"` is `["hello", ",", "world"]`.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{split_words, Oracle, Tokenizer, TrainingPair};
use crate::retrieval::{ResponseScorer, RetrievalError, RetrievalScore};
use crate::s2s::{DecodeStrategy, S2SError, Seq2Seq};
use crate::backend::ParameterStore;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error(transparent)]
    Scorer(#[from] RetrievalError),
    #[error(transparent)]
    Model(#[from] S2SError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

fn ngram_counts<S: Eq + Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the hypothesis n-gram total for one pair.
pub fn modified_precision_counts<S: Eq + Hash>(hyp: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Corpus BLEU with uniform weights over orders `1..=max_n`.
///
/// Orders `n >= 2` with a zero match or total count get add-one smoothing
/// on both numerator and denominator. A zero unigram match gives 0.
pub fn bleu<S: Eq + Hash>(hyps: &[Vec<S>], refs: &[Vec<S>], max_n: usize) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (mut m, mut t) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let (mi, ti) = modified_precision_counts(h, r, n);
            m += mi;
            t += ti;
        }
        let (m, t) = if n >= 2 && (m == 0 || t == 0) {
            (m as f64 + 1.0, t as f64 + 1.0)
        } else {
            (m as f64, t as f64)
        };
        if m == 0.0 {
            return Ok(0.0);
        }
        log_sum += (m / t).ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Unique n-grams over total n-grams, pooled across all hypotheses.
pub fn distinct_n<S: Eq + Hash>(hyps: &[Vec<S>], n: usize) -> f64 {
    let mut unique = std::collections::HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        if n == 0 || h.len() < n {
            continue;
        }
        for w in h.windows(n) {
            unique.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// Exact-match alignment with the most matches, and among those, the
/// fewest chunks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    /// `(hyp position, ref position)` pairs in hypothesis order.
    pub pairs: Vec<(usize, usize)>,
    pub chunks: usize,
}

pub fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(h, r) in pairs {
        match prev {
            Some((ph, pr)) if h == ph + 1 && r == pr + 1 => {}
            _ => chunks += 1,
        }
        prev = Some((h, r));
    }
    chunks
}

/// DFS node budget per alignment; past this the best alignment found so far
/// is returned.
const ALIGN_BUDGET: usize = 200_000;

struct AlignSearch<'a, S> {
    hyp: &'a [S],
    reference: &'a [S],
    /// Occurrences of `hyp[i]`'s word at positions `>= i`.
    need_after: Vec<usize>,
    used: Vec<bool>,
    needed: HashMap<&'a S, usize>,
    current: Vec<(usize, usize)>,
    best: Vec<(usize, usize)>,
    best_chunks: usize,
    nodes: usize,
}

impl<S: Eq + Hash> AlignSearch<'_, S> {
    fn dfs(&mut self, i: usize, chunks: usize) {
        self.nodes += 1;
        if chunks >= self.best_chunks || self.nodes > ALIGN_BUDGET {
            return;
        }
        if i == self.hyp.len() {
            self.best_chunks = chunks;
            self.best = self.current.clone();
            return;
        }
        let w = &self.hyp[i];
        let need = self.needed.get(w).copied().unwrap_or(0);
        if need > 0 {
            let prev = self.current.last().copied();
            // try the continuation of the current chunk first
            let mut cands: Vec<usize> = (0..self.reference.len())
                .filter(|&j| !self.used[j] && self.reference[j] == *w)
                .collect();
            if let Some((ph, pr)) = prev {
                if ph + 1 == i {
                    if let Some(pos) = cands.iter().position(|&j| j == pr + 1) {
                        cands.swap(0, pos);
                    }
                }
            }
            for j in cands {
                let extends = matches!(prev, Some((ph, pr)) if ph + 1 == i && pr + 1 == j);
                self.used[j] = true;
                self.current.push((i, j));
                *self.needed.get_mut(w).unwrap() -= 1;
                self.dfs(i + 1, chunks + usize::from(!extends));
                *self.needed.get_mut(w).unwrap() += 1;
                self.current.pop();
                self.used[j] = false;
            }
        }
        // skipping is allowed only if later occurrences can still cover the need
        if self.need_after[i] > need {
            self.dfs(i + 1, chunks);
        }
    }
}

pub fn align<S: Eq + Hash>(hyp: &[S], reference: &[S]) -> Alignment {
    let mut ref_counts: HashMap<&S, usize> = HashMap::new();
    for w in reference {
        *ref_counts.entry(w).or_insert(0) += 1;
    }
    let mut hyp_counts: HashMap<&S, usize> = HashMap::new();
    for w in hyp {
        *hyp_counts.entry(w).or_insert(0) += 1;
    }
    let needed: HashMap<&S, usize> = hyp_counts
        .iter()
        .map(|(w, &c)| (*w, c.min(ref_counts.get(w).copied().unwrap_or(0))))
        .collect();
    let mut remaining: HashMap<&S, usize> = HashMap::new();
    let mut need_after = vec![0; hyp.len()];
    for i in (0..hyp.len()).rev() {
        let e = remaining.entry(&hyp[i]).or_insert(0);
        *e += 1;
        need_after[i] = *e;
    }
    let mut search = AlignSearch {
        hyp,
        reference,
        need_after,
        used: vec![false; reference.len()],
        needed,
        current: Vec::new(),
        best: Vec::new(),
        best_chunks: usize::MAX,
        nodes: 0,
    };
    search.dfs(0, 0);
    let chunks = count_chunks(&search.best);
    Alignment {
        pairs: search.best,
        chunks,
    }
}

/// Exact-match METEOR ("meteor-em"): no stemming or synonyms.
pub fn meteor<S: Eq + Hash>(hyp: &[S], reference: &[S]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let a = align(hyp, reference);
    let m = a.pairs.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / hyp.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (a.chunks as f64 / m).powi(3);
    f_mean * (1.0 - penalty)
}

/// Mean scorer output over `(context, hypothesis)` pairs.
pub fn maude_like(scorer: &dyn ResponseScorer, contexts: &[&[u32]], hyps: &[&[u32]]) -> Result<f64> {
    if contexts.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    if contexts.len() != hyps.len() {
        return Err(MetricsError::LengthMismatch {
            hyps: hyps.len(),
            refs: contexts.len(),
        });
    }
    let pairs: Vec<(&[u32], &[u32])> = contexts.iter().copied().zip(hyps.iter().copied()).collect();
    let scores = scorer.score_batch(&pairs)?;
    Ok(scores.iter().map(|s| s.value()).sum::<f64>() / scores.len() as f64)
}

/// ROC-AUC as the Mann-Whitney statistic, ties counted half. NaN when
/// either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return f64::NAN;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub bleu_max_n: usize,
    pub bleu_smoothing: String,
    pub meteor_variant: String,
    pub tokenization: String,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            bleu_max_n: 4,
            bleu_smoothing: "add-one".into(),
            meteor_variant: "meteor-em".into(),
            tokenization: "surface-lowercase".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_examples: usize,
    pub avg_len: f64,
    pub bleu: f64,
    pub meteor: f64,
    pub dist_1: f64,
    pub dist_2: f64,
    pub maude_esim: f64,
    /// Fraction of hypotheses the synthetic oracle accepts, when one exists.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_validity: Option<f64>,
    pub config: MetricsConfig,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One evaluated example, all as token ids (no EOS).
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub context: Vec<u32>,
    pub hypothesis: Vec<u32>,
    pub reference: Vec<u32>,
}

fn surface(tok: &Tokenizer, ids: &[u32]) -> Vec<String> {
    split_words(&tok.decode(ids))
}

/// Metrics over already generated hypotheses. `maude_esim` needs a scorer;
/// it reads NaN without one. Empty hypotheses score 0 under the scorer.
pub fn evaluate_items(
    items: &[EvalItem],
    tok: &Tokenizer,
    scorer: Option<&dyn ResponseScorer>,
    oracle: Option<&Oracle>,
) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let config = MetricsConfig::default();
    let hyps: Vec<Vec<String>> = items.iter().map(|it| surface(tok, &it.hypothesis)).collect();
    let refs: Vec<Vec<String>> = items.iter().map(|it| surface(tok, &it.reference)).collect();
    let n = items.len() as f64;
    let maude_esim = match scorer {
        None => f64::NAN,
        Some(sc) => {
            let scorable: Vec<(&[u32], &[u32])> = items
                .iter()
                .filter(|it| !it.hypothesis.is_empty() && !it.context.is_empty())
                .map(|it| (it.context.as_slice(), it.hypothesis.as_slice()))
                .collect();
            let scores: Vec<RetrievalScore> = if scorable.is_empty() {
                Vec::new()
            } else {
                sc.score_batch(&scorable)?
            };
            scores.iter().map(|s| s.value()).sum::<f64>() / n
        }
    };
    let oracle_validity = oracle.map(|o| {
        let ok: usize = items
            .iter()
            .map(|it| usize::from(o.judge(&tok.decode(&it.context), &tok.decode(&it.hypothesis))))
            .sum();
        ok as f64 / n
    });
    Ok(MetricsReport {
        n_examples: items.len(),
        avg_len: items.iter().map(|it| it.hypothesis.len()).sum::<usize>() as f64 / n,
        bleu: bleu(&hyps, &refs, config.bleu_max_n)?,
        meteor: hyps.iter().zip(&refs).map(|(h, r)| meteor(h, r)).sum::<f64>() / n,
        dist_1: distinct_n(&hyps, 1),
        dist_2: distinct_n(&hyps, 2),
        maude_esim,
        oracle_validity,
        config,
    })
}

const DECODE_CHUNK: usize = 32;

/// Greedy hypotheses for every pair's context, responses without EOS.
pub fn greedy_hypotheses(model: &Seq2Seq, params: &ParameterStore<f32>, pairs: &[TrainingPair]) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(pairs.len());
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    for chunk in pairs.chunks(DECODE_CHUNK) {
        let ctx: Vec<&[u32]> = chunk.iter().map(|p| p.context.flat.as_slice()).collect();
        let decoded = model.decode_batch(params, &ctx, DecodeStrategy::Greedy, model.config.max_response_len, &mut unused)?;
        out.extend(decoded.iter().map(|d| d.response().to_vec()));
    }
    Ok(out)
}

/// Greedy-decodes every test context and reports all metrics.
pub fn evaluate(
    model: &Seq2Seq,
    params: &ParameterStore<f32>,
    pairs: &[TrainingPair],
    tok: &Tokenizer,
    scorer: Option<&dyn ResponseScorer>,
    oracle: Option<&Oracle>,
) -> Result<MetricsReport> {
    let hyps = greedy_hypotheses(model, params, pairs)?;
    let items: Vec<EvalItem> = pairs
        .iter()
        .zip(hyps)
        .map(|(p, h)| EvalItem {
            context: p.context.flat.clone(),
            hypothesis: h,
            reference: p.response.ids().to_vec(),
        })
        .collect();
    evaluate_items(&items, tok, scorer, oracle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        split_words(s)
    }

    #[test]
    fn bleu_identity_is_exactly_one() {
        let h = vec![toks("the cat sat"), toks("a"), toks("on the mat today")];
        assert_eq!(bleu(&h, &h, 4).unwrap(), 1.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        assert_eq!(modified_precision_counts(&toks("the the the"), &toks("the cat"), 1), (1, 3));
    }

    #[test]
    fn bleu_errors() {
        let h = vec![toks("a")];
        assert!(matches!(bleu::<String>(&[], &[], 4), Err(MetricsError::EmptyCorpus)));
        assert!(matches!(bleu(&h, &[], 4), Err(MetricsError::LengthMismatch { .. })));
        assert_eq!(bleu(&[vec![]], &[toks("a b")], 4).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_applies_to_short_hypotheses() {
        // unigram/bigram exactly matched, p3/p4 smoothed to 1/1
        let b = bleu(&[toks("a b")], &[toks("a b c d")], 4).unwrap();
        assert!((b - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn distinct_examples() {
        assert_eq!(distinct_n(&[toks("a b"), toks("a c")], 1), 0.75);
        assert_eq!(distinct_n(&[toks("a b c d"), toks("a b c d")], 1), 0.5);
        assert_eq!(distinct_n(&[toks("a b c"), toks("d e")], 1), 1.0);
        assert_eq!(distinct_n(&[toks("a")], 2), 0.0);
    }

    #[test]
    fn meteor_examples() {
        assert_eq!(meteor(&toks("a b"), &toks("a b")), 0.9375);
        let n = 5;
        let s = toks("a b c d e");
        assert!((meteor(&s, &s) - (1.0 - 0.5 / (n * n * n) as f64)).abs() < 1e-12);
        assert_eq!(meteor(&toks("x y"), &toks("a b")), 0.0);
    }

    #[test]
    fn meteor_prefers_fewest_chunks() {
        // "the" can align to either ref position; the contiguous choice is one chunk
        let a = align(&toks("the cat"), &toks("the dog the cat"));
        assert_eq!(a.pairs, vec![(0, 2), (1, 3)]);
        assert_eq!(a.chunks, 1);
    }

    #[test]
    fn auc_definition() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.9], &[true, false]), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]), 0.5);
        assert!(roc_auc(&[0.5], &[true]).is_nan());
        assert!((roc_auc(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn constant_scorer_maude() {
        let c: Vec<&[u32]> = vec![&[5, 6], &[7]];
        let h: Vec<&[u32]> = vec![&[8], &[9, 10]];
        let sc = crate::retrieval::ConstantScorer(0.5);
        assert_eq!(maude_like(&sc, &c, &h).unwrap(), 0.5);
    }
}
