#![allow(dead_code)]

use coral::backend::gradcheck::{check_gradients, GradCheckReport};
use coral::backend::{Graph, ParameterStore, Var};
use coral::coral::{batch_weighted_loss, coral_loss, ce_loss};
use coral::corpus::EOS;
use coral::retrieval::Reward;
use coral::s2s::{S2SConfig, Seq2Seq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type R<T> = coral::backend::Result<T>;

/// Relative-error denominator floor. Structurally zero gradients (e.g.
/// attention key biases) come back from central differences as ~1e-12
/// round-off.
pub const GRAD_FLOOR: f64 = 1e-7;

pub fn tiny_model(vocab_size: usize, d_model: usize, n_layers: usize, max_response_len: usize, init_std: f64) -> Seq2Seq {
    Seq2Seq::new(S2SConfig {
        vocab_size,
        n_layers,
        n_heads: 2,
        d_model,
        d_ff: 2 * d_model,
        max_context_len: 8,
        max_response_len,
        dropout: 0.0,
        init_std,
    })
    .unwrap()
}

fn random_seq<G: Rng>(rng: &mut G, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(5..vocab as u32)).collect()
}

/// Mixed CORAL loss over a batch of two contexts, each with a ground
/// truth and a sampled candidate at fixed rewards, checked in f64.
pub fn coral_gradcheck(vocab: usize, d_model: usize, coords: usize, seed: u64) -> GradCheckReport {
    let model = tiny_model(vocab, d_model, 2, 6, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: ParameterStore<f64> = model.init_params(&mut rng).unwrap();
    let contexts: Vec<Vec<u32>> = vec![random_seq(&mut rng, vocab, 5), random_seq(&mut rng, vocab, 3)];
    let mut targets: Vec<Vec<u32>> = Vec::new();
    for len in [3, 2, 4, 5] {
        let mut t = random_seq(&mut rng, vocab, len);
        t.push(EOS);
        targets.push(t);
    }
    let owners = [0usize, 0, 1, 1];
    let rewards = [0.7, -0.2, 0.55, 0.1];
    let loss = move |g: &mut Graph<f64>, s: &ParameterStore<f64>| -> R<Var> {
        let ctx: Vec<&[u32]> = owners.iter().map(|&i| contexts[i].as_slice()).collect();
        let tg: Vec<&[u32]> = targets.iter().map(Vec::as_slice).collect();
        let lp = model.batch_logprobs(g, s, &ctx, &tg).map_err(|e| match e {
            coral::s2s::S2SError::Backend(b) => b,
            other => panic!("{other}"),
        })?;
        Ok(batch_weighted_loss(g, lp.totals, &rewards, 2).expect("loss"))
    };
    check_gradients(&params, loss, coords, 1e-5, GRAD_FLOOR, &mut rng).unwrap()
}

/// Every sequence a `T_max = 2` decoder can emit: `[EOS]`, `[w, EOS]`,
/// and the truncated `[w, w']`.
pub fn all_sequences(vocab: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![EOS]];
    for w in (0..vocab as u32).filter(|&w| w != EOS) {
        out.push(vec![w, EOS]);
        for w2 in (0..vocab as u32).filter(|&w| w != EOS) {
            out.push(vec![w, w2]);
        }
    }
    out
}

/// Compares the score-function estimator `sum_s P(s) R(s) grad log P(s)`,
/// taken exactly over every sequence, with central differences of
/// `E[R] = sum_s P(s) R(s)`. Returns the check and `sum_s P(s)`.
pub fn reinforce_identity(seed: u64) -> (GradCheckReport, f64) {
    let vocab = 5;
    let model = tiny_model(vocab, 8, 1, 2, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: ParameterStore<f64> = model.init_params(&mut rng).unwrap();
    let context: Vec<u32> = vec![4, 1, 3];
    let seqs = all_sequences(vocab);
    let rewards: Vec<f64> = seqs.iter().map(|_| rng.gen_range(-0.5..0.5)).collect();

    let total_prob = {
        let mut g = Graph::inference();
        let ctx: Vec<&[u32]> = vec![context.as_slice(); seqs.len()];
        let tg: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let lp = model.batch_logprobs(&mut g, &params, &ctx, &tg).unwrap();
        g.value(lp.totals).data().iter().map(|l| l.exp()).sum::<f64>()
    };

    // value: E[R]; gradient: the estimator (weights held constant)
    let loss = move |g: &mut Graph<f64>, s: &ParameterStore<f64>| -> R<Var> {
        let ctx: Vec<&[u32]> = vec![context.as_slice(); seqs.len()];
        let tg: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let lp = model.batch_logprobs(g, s, &ctx, &tg).expect("logprobs");
        let lps = g.value(lp.totals).data().to_vec();
        let weights: Vec<f64> = lps.iter().zip(&rewards).map(|(l, r)| l.exp() * r).collect();
        let expected: f64 = weights.iter().sum();
        let offset: f64 = weights.iter().zip(&lps).map(|(w, l)| w * l).sum();
        let weighted = g.mul_const(lp.totals, weights)?;
        let sum = g.sum(weighted);
        Ok(g.add_scalar(sum, expected - offset))
    };
    let report = check_gradients(&params, loss, usize::MAX, 1e-5, GRAD_FLOOR, &mut rng).unwrap();
    (report, total_prob)
}

fn total_logprob(model: &Seq2Seq, s: &ParameterStore<f64>, ctx: &[u32], target: &[u32]) -> f64 {
    let mut g = Graph::inference();
    let lp = model.sequence_logprobs(&mut g, s, ctx, target).unwrap();
    lp.values(&g).iter().sum()
}

/// One plain gradient step on `coral_loss` with the given reward; returns
/// the candidate's total log-probability before and after.
pub fn sign_step(seed: u64, reward: f64, lr: f64) -> (f64, f64) {
    let vocab = 12;
    let model = tiny_model(vocab, 8, 1, 6, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParameterStore<f64> = model.init_params(&mut rng).unwrap();
    let ctx = random_seq(&mut rng, vocab, 4);
    let len = rng.gen_range(1..5);
    let mut target = random_seq(&mut rng, vocab, len);
    target.push(EOS);
    let before = total_logprob(&model, &params, &ctx, &target);
    let mut g = Graph::new();
    let lp = model.sequence_logprobs(&mut g, &params, &ctx, &target).unwrap();
    let loss = coral_loss(&mut g, &lp, Reward::from_value(reward)).unwrap();
    g.backward(loss).unwrap();
    params.accumulate_grads(&g);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for n in names {
        let grad = params.grad(&n).unwrap().data().to_vec();
        for (v, d) in params.get_mut(&n).unwrap().data_mut().iter_mut().zip(grad) {
            *v -= lr * d;
        }
    }
    (before, total_logprob(&model, &params, &ctx, &target))
}

/// For `n` random pairs with `p_plus = 1`, `margin = 0`: the selected
/// candidate is the ground truth and `coral_loss == score * ce_loss` bit
/// for bit. Returns the number of mismatching samples.
pub fn ce_equivalence(n: usize, seed: u64) -> usize {
    use coral::coral::{select_candidate, CandidateSource, CoralConfig};
    use coral::corpus::{DialogContext, TrainingPair, Utterance, UtterancePool};
    use coral::retrieval::{r3, Esim, EsimConfig, EsimScorer, ResponseScorer};

    let vocab = 16;
    let model = tiny_model(vocab, 8, 1, 6, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: ParameterStore<f32> = model.init_params(&mut rng).unwrap();
    let esim = Esim::new(EsimConfig {
        vocab_size: vocab,
        embed_dim: 6,
        hidden_dim: 6,
        mlp_dims: [8, 4],
        dropout: 0.0,
    })
    .unwrap();
    let mut esim_params: ParameterStore<f32> = esim.init_params(&mut rng).unwrap();
    // widen the score spread away from 0.5
    for v in esim_params.get_mut("esim.out.w").unwrap().data_mut() {
        *v *= 100.0;
    }
    let scorer = EsimScorer {
        model: esim,
        params: esim_params,
    };
    let pool = UtterancePool::new(vec![Utterance(vec![5, 6])]).unwrap();
    let cfg = CoralConfig {
        p_plus: 1.0,
        margin: 0.0,
        ..CoralConfig::default()
    };
    let mut bad = 0;
    for _ in 0..n {
        let ctx_len = rng.gen_range(1..8);
        let resp_len = rng.gen_range(1..5);
        let pair = TrainingPair {
            context: DialogContext::new(vec![Utterance(random_seq(&mut rng, vocab, ctx_len))]),
            response: Utterance(random_seq(&mut rng, vocab, resp_len)),
        };
        let cand = select_candidate(&pair, &cfg, &pool, &model, &params, &mut rng).unwrap();
        assert_eq!(cand.source, CandidateSource::GroundTruth);
        let score = scorer.score(&pair.context.flat, cand.response()).unwrap();
        let mut g = Graph::<f32>::new();
        let lp = model.sequence_logprobs(&mut g, &params, &pair.context.flat, &cand.tokens).unwrap();
        let c = coral_loss(&mut g, &lp, r3(score, cfg.margin).unwrap()).unwrap();
        let ce = ce_loss(&mut g, &lp).unwrap();
        let weighted = score.value() as f32 * g.value(ce).item();
        if g.value(c).item().to_bits() != weighted.to_bits() {
            bad += 1;
        }
    }
    bad
}

/// Straightforward BLEU: n-grams as owned vectors, counted by linear scan.
pub fn reference_bleu(hyps: &[Vec<u8>], refs: &[Vec<u8>]) -> f64 {
    let grams = |s: &[u8], n: usize| -> Vec<Vec<u8>> {
        if s.len() < n {
            return vec![];
        }
        (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
    };
    let mut logp = 0.0;
    for n in 1..=4 {
        let (mut matched, mut total) = (0.0, 0.0);
        for (h, r) in hyps.iter().zip(refs) {
            let hg = grams(h, n);
            let mut rg = grams(r, n);
            total += hg.len() as f64;
            for g in hg {
                if let Some(pos) = rg.iter().position(|x| *x == g) {
                    rg.remove(pos);
                    matched += 1.0;
                }
            }
        }
        if n > 1 && (matched == 0.0 || total == 0.0) {
            matched += 1.0;
            total += 1.0;
        }
        if matched == 0.0 {
            return 0.0;
        }
        logp += (matched / total).ln() / 4.0;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * logp.exp()
}
