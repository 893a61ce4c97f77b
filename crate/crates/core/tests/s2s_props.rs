mod common;

use coral::backend::{Graph, ParameterStore};
use coral::s2s::{nucleus_filter, sample_nucleus, S2SConfig, Seq2Seq};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[test]
fn nucleus_monte_carlo_matches_renormalization() {
    let probs = [0.5, 0.3, 0.15, 0.05];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts = [0usize; 4];
    for _ in 0..100_000 {
        counts[sample_nucleus(&probs, 0.8, &mut rng)] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / 100_000.0).collect();
    assert!(total_variation(&freq, &[0.625, 0.375, 0.0, 0.0]) < 0.02, "{freq:?}");
}

#[test]
fn top_p_one_keeps_everything() {
    let probs = [0.1, 0.2, 0.3, 0.4];
    let kept = nucleus_filter(&probs, 1.0);
    assert_eq!(kept.len(), 4);
}

#[test]
fn init_logprobs_near_uniform() {
    let v = 40;
    let m = Seq2Seq::new(S2SConfig {
        init_std: 0.02,
        ..common::tiny_s2s(v, 16)
    })
    .unwrap();
    let s: ParameterStore<f32> = m.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..10u32 {
        let ctx = [5 + i, 6, 7 + i];
        let resp: Vec<u32> = (0..9).map(|k| 5 + (i * 3 + k) % 30).collect();
        let mut g = Graph::inference();
        let lp = m.response_logprobs(&mut g, &s, &ctx, &resp).unwrap();
        for x in lp.values(&g) {
            total += x as f64;
            n += 1;
        }
    }
    assert_eq!(n, 100);
    assert!((total / n as f64 + (v as f64).ln()).abs() < 0.5);
}

#[test]
fn future_targets_do_not_change_earlier_steps() {
    let m = Seq2Seq::new(common::tiny_s2s(12, 8)).unwrap();
    let s: ParameterStore<f64> = m.init_params(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let ctx = [5u32, 6];
    let base = [7u32, 8, 9, 2];
    let run = |t: &[u32]| {
        let mut g = Graph::inference();
        let lp = m.sequence_logprobs(&mut g, &s, &ctx, t).unwrap();
        lp.values(&g)
    };
    let reference = run(&base);
    for k in 0..base.len() {
        let mut t = base;
        t[k] = 10;
        let other = run(&t);
        assert_eq!(reference[..k], other[..k], "position {k}");
        assert_ne!(reference[k], other[k]);
    }
    assert!(reference.iter().all(|&x| x <= 0.0));
}

proptest! {
    #[test]
    fn nucleus_keeps_minimal_prefix(raw in prop::collection::vec(0.001f64..1.0, 1..10), top_p in 0.05f64..1.0) {
        let z: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let kept = nucleus_filter(&probs, top_p);
        let mass: f64 = kept.iter().map(|&(i, _)| probs[i]).sum();
        prop_assert!(mass >= top_p - 1e-9);
        // dropping the last kept token falls short of top_p
        let without_last = mass - probs[kept.last().unwrap().0];
        prop_assert!(without_last < top_p);
        let renorm: f64 = kept.iter().map(|&(_, p)| p).sum();
        prop_assert!((renorm - 1.0).abs() < 1e-9);
        // kept tokens are at least as likely as every dropped one
        let min_kept = kept.iter().map(|&(i, _)| probs[i]).fold(f64::INFINITY, f64::min);
        for (i, &p) in probs.iter().enumerate() {
            if !kept.iter().any(|&(k, _)| k == i) {
                prop_assert!(p <= min_kept);
            }
        }
    }
}
