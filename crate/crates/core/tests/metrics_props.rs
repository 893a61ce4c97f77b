mod common;

use coral::metrics::{align, bleu, count_chunks, distinct_n, evaluate_items, meteor, EvalItem};
use coral::retrieval::ConstantScorer;
use proptest::prelude::*;

/// Minimum chunks over every maximum-size exact-match alignment.
fn brute_force_chunks(hyp: &[u8], reference: &[u8]) -> (usize, usize) {
    fn go(i: usize, hyp: &[u8], reference: &[u8], used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == hyp.len() {
            let m = cur.len();
            let c = coral::metrics::count_chunks(cur);
            if m > best.0 || (m == best.0 && c < best.1) {
                *best = (m, c);
            }
            return;
        }
        go(i + 1, hyp, reference, used, cur, best);
        for j in 0..reference.len() {
            if !used[j] && reference[j] == hyp[i] {
                used[j] = true;
                cur.push((i, j));
                go(i + 1, hyp, reference, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, usize::MAX);
    go(0, hyp, reference, &mut vec![false; reference.len()], &mut Vec::new(), &mut best);
    if best.0 == 0 {
        best.1 = 0;
    }
    best
}

fn sentence() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 0..9)
}

fn corpus() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
    prop::collection::vec((sentence(), sentence()), 1..6)
}

#[test]
fn dual_bleu_on_fifty_corpora() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let n = rng.gen_range(1..8);
        let sent = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u8> {
            let len = rng.gen_range(1..12);
            (0..len).map(|_| rng.gen_range(0..6)).collect()
        };
        let hyps: Vec<Vec<u8>> = (0..n).map(|_| sent(&mut rng)).collect();
        let refs: Vec<Vec<u8>> = (0..n).map(|_| sent(&mut rng)).collect();
        let a = bleu(&hyps, &refs, 4).unwrap();
        let b = common::checks::reference_bleu(&hyps, &refs);
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn echoing_references_is_perfect() {
    let s = common::synthetic(40, 5, 20, 3);
    let items: Vec<EvalItem> = s
        .data
        .test
        .iter()
        .map(|p| EvalItem {
            context: p.context.flat.clone(),
            hypothesis: p.response.0.clone(),
            reference: p.response.0.clone(),
        })
        .collect();
    let r = evaluate_items(&items, &s.tok, Some(&ConstantScorer(0.5)), Some(&s.oracle)).unwrap();
    assert_eq!(r.bleu, 1.0);
    assert_eq!(r.maude_esim, 0.5);
    assert_eq!(r.oracle_validity, Some(1.0));
    let refs: Vec<Vec<String>> = items
        .iter()
        .map(|it| coral::corpus::split_words(&s.tok.decode(&it.reference)))
        .collect();
    assert_eq!(r.dist_1, distinct_n(&refs, 1));
    assert_eq!(r.dist_2, distinct_n(&refs, 2));
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(json["config"]["bleu_smoothing"], "add-one");
    assert_eq!(json["config"]["meteor_variant"], "meteor-em");
    for key in ["avg_len", "bleu", "meteor", "dist_1", "dist_2", "maude_esim", "n_examples"] {
        assert!(json[key].is_number(), "{key}");
    }
}

proptest! {
    #[test]
    fn bleu_matches_reference(c in corpus()) {
        let (h, r): (Vec<_>, Vec<_>) = c.into_iter().unzip();
        let a = bleu(&h, &r, 4).unwrap();
        let b = common::checks::reference_bleu(&h, &r);
        prop_assert!((a - b).abs() < 1e-9 || (a == 0.0 && b == 0.0), "{} vs {}", a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn bleu_of_self_is_one(h in prop::collection::vec(prop::collection::vec(0u8..5, 1..9), 1..6)) {
        prop_assert_eq!(bleu(&h, &h, 4).unwrap(), 1.0);
    }

    #[test]
    fn metrics_ignore_order(c in corpus(), seed in 0u64..100) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = c.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (h1, r1): (Vec<_>, Vec<_>) = c.into_iter().unzip();
        let (h2, r2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        prop_assert!((bleu(&h1, &r1, 4).unwrap() - bleu(&h2, &r2, 4).unwrap()).abs() < 1e-12);
        prop_assert_eq!(distinct_n(&h1, 1), distinct_n(&h2, 1));
        prop_assert_eq!(distinct_n(&h1, 2), distinct_n(&h2, 2));
    }

    #[test]
    fn duplicate_never_increases_distinct(h in prop::collection::vec(sentence(), 1..6), pick in 0usize..6, n in 1usize..3) {
        let before = distinct_n(&h, n);
        let mut more = h.clone();
        more.push(h[pick % h.len()].clone());
        let after = distinct_n(&more, n);
        prop_assert!(after <= before + 1e-12);
        prop_assert!((0.0..=1.0).contains(&after));
    }

    #[test]
    fn alignment_chunks_are_minimal(h in sentence(), r in sentence()) {
        let a = align(&h, &r);
        let (m, c) = brute_force_chunks(&h, &r);
        prop_assert_eq!(a.pairs.len(), m);
        prop_assert_eq!(a.chunks, c);
        prop_assert_eq!(count_chunks(&a.pairs), a.chunks);
    }

    #[test]
    fn meteor_identity_formula(h in prop::collection::vec(0u8..200, 1..9)) {
        let mut uniq = h.clone();
        uniq.sort_unstable();
        uniq.dedup();
        let n = uniq.len() as f64;
        prop_assert!((meteor(&uniq, &uniq) - (1.0 - 0.5 / (n * n * n))).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&meteor(&h, &uniq)));
    }
}
