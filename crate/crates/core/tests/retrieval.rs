mod common;

use coral::backend::gradcheck::check_gradients;
use coral::backend::{BackendError, Graph, ParameterStore, Var};
use coral::retrieval::{ranking_examples, Esim, EsimConfig, ResponseScorer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> Esim {
    Esim::new(EsimConfig {
        vocab_size: 12,
        embed_dim: 4,
        hidden_dim: 3,
        mlp_dims: [5, 4],
        dropout: 0.0,
    })
    .unwrap()
}

#[test]
fn esim_gradients_match_finite_differences() {
    let m = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params: ParameterStore<f64> = m.init_params(&mut rng).unwrap();
    // a larger output layer keeps the sigmoid away from its flat centre
    for v in params.get_mut("esim.out.w").unwrap().data_mut() {
        *v *= 50.0;
    }
    let ctx: Vec<Vec<u32>> = vec![vec![5, 6, 7, 3, 8], vec![9, 10]];
    let resp: Vec<Vec<u32>> = vec![vec![11], vec![5, 7, 9]];
    let loss = |g: &mut Graph<f64>, s: &ParameterStore<f64>| -> Result<Var, BackendError> {
        let c: Vec<&[u32]> = ctx.iter().map(Vec::as_slice).collect();
        let r: Vec<&[u32]> = resp.iter().map(Vec::as_slice).collect();
        m.bce_loss(g, s, &c, &r, &[1.0, 0.0]).map_err(|e| match e {
            coral::retrieval::RetrievalError::Backend(b) => b,
            other => panic!("{other}"),
        })
    };
    let report = check_gradients(&params, loss, 250, 1e-5, common::checks::GRAD_FLOOR, &mut rng).unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn padding_does_not_change_scores() {
    let m = tiny();
    let s: ParameterStore<f32> = m.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let scorer = coral::retrieval::EsimScorer { model: m, params: s };
    let alone = scorer.score(&[5, 6], &[7]).unwrap();
    let long: &[u32] = &[8, 9, 10, 11, 5, 6, 7, 8];
    let batch = scorer.score_batch(&[(&[5, 6], &[7]), (long, long)]).unwrap();
    assert!((alone.value() - batch[0].value()).abs() < 1e-6);
}

#[test]
fn trained_scorer_separates_valid_from_invalid() {
    let s = common::synthetic(1200, 100, 150, 21);
    let scorer = common::small_scorer(&s, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ex = ranking_examples(&s.data.test, 5, &mut rng);
    let (mut valid, mut invalid) = (Vec::new(), Vec::new());
    for (c, r, _) in &ex {
        let score = scorer.score(c, r).unwrap().value();
        if s.oracle.judge(&s.tok.decode(c), &s.tok.decode(r)) == 1 {
            valid.push(score);
        } else {
            invalid.push(score);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = mean(&valid) - mean(&invalid);
    assert!(gap > 0.3, "valid {} invalid {}", mean(&valid), mean(&invalid));
}

#[test]
fn ranking_examples_shape() {
    let s = common::synthetic(30, 10, 10, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ex = ranking_examples(&s.data.valid, 9, &mut rng);
    assert_eq!(ex.len(), s.data.valid.len() * 10);
    for chunk in ex.chunks(10) {
        assert_eq!(chunk[0].2, 1.0);
        assert!(chunk[1..].iter().all(|e| e.2 == 0.0 && e.0 == chunk[0].0));
    }
}
