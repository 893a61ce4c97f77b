mod common;

use coral::coral::CandidateMode;
use coral::s2s::Seq2Seq;
use coral::trainer::{
    ablate, cell_config, load_params, run, save_params, train, validate_r3, AblationGrid, LossKind, RunControl,
    TrainError,
};

fn fixture() -> (common::Synthetic, coral::retrieval::EsimScorer) {
    let s = common::synthetic(160, 24, 24, 5);
    let scorer = common::small_scorer(&s, 1);
    (s, scorer)
}

#[test]
fn ce_training_loss_decreases() {
    let (s, _) = fixture();
    let cfg = common::small_train_config(s.tok.vocab_size(), LossKind::Ce);
    let out = train(&s.data, None, &cfg).unwrap();
    let losses: Vec<f64> = out.log.records.iter().map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn coral_requires_a_scorer() {
    let (s, _) = fixture();
    let cfg = common::small_train_config(s.tok.vocab_size(), LossKind::Coral);
    assert!(matches!(train(&s.data, None, &cfg), Err(TrainError::MissingScorer)));
}

#[test]
fn same_seed_same_runlog_and_frozen_scorer() {
    let (s, scorer) = fixture();
    let before = common::params_digest(&scorer.params);
    let mut cfg = common::small_train_config(s.tok.vocab_size(), LossKind::Coral);
    cfg.max_epochs = 2;
    let a = train(&s.data, Some(&scorer), &cfg).unwrap();
    let b = train(&s.data, Some(&scorer), &cfg).unwrap();
    assert_eq!(a.log.trajectory(), b.log.trajectory());
    assert_eq!(a.params, b.params);
    assert_eq!(common::params_digest(&scorer.params), before);
    cfg.seed += 1;
    let c = train(&s.data, Some(&scorer), &cfg).unwrap();
    assert_ne!(a.log.trajectory(), c.log.trajectory());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (s, scorer) = fixture();
    let mut cfg = common::small_train_config(s.tok.vocab_size(), LossKind::Coral);
    cfg.coral.mode = CandidateMode::RandomNegative;
    cfg.patience = 10;
    let full_dir = tempfile::tempdir().unwrap();
    let full = run(
        &s.data,
        Some(&scorer),
        &cfg,
        &RunControl {
            dir: Some(full_dir.path()),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(full.finished);

    let dir = tempfile::tempdir().unwrap();
    let halted = run(
        &s.data,
        Some(&scorer),
        &cfg,
        &RunControl {
            dir: Some(dir.path()),
            resume: false,
            halt_after: Some(1),
        },
    )
    .unwrap();
    assert!(!halted.finished);
    assert_eq!(halted.log.records.len(), 1);
    let resumed = run(
        &s.data,
        Some(&scorer),
        &cfg,
        &RunControl {
            dir: Some(dir.path()),
            resume: true,
            halt_after: None,
        },
    )
    .unwrap();
    assert_eq!(resumed.log.trajectory(), full.log.trajectory());
    assert_eq!(resumed.params, full.params);

    // the returned parameters are the stored best checkpoint
    let best = load_params(&full_dir.path().join("best.ckpt")).unwrap();
    assert_eq!(common::params_digest(&best), common::params_digest(&full.params));
    let best_r3 = full.log.records.iter().map(|r| r.val_r3).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(full.log.best().unwrap().val_r3, best_r3);
}

#[test]
fn checkpoint_round_trip_and_bad_magic() {
    let (s, _) = fixture();
    let model = Seq2Seq::new(common::tiny_s2s(s.tok.vocab_size(), 8)).unwrap();
    let p = model.init_params::<f32, _>(&mut rand::rngs::mock::StepRng::new(1, 7)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    save_params(&p, &path).unwrap();
    assert_eq!(load_params(&path).unwrap(), p);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, bytes).unwrap();
    assert!(load_params(&path).is_err());
}

#[test]
fn validation_reward_shifts_with_margin() {
    let (s, scorer) = fixture();
    let model = Seq2Seq::new(common::tiny_s2s(s.tok.vocab_size(), 16)).unwrap();
    let params = model
        .init_params::<f32, _>(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))
        .unwrap();
    let at0 = validate_r3(&model, &params, &scorer, &s.data.valid, 0.0).unwrap();
    let at3 = validate_r3(&model, &params, &scorer, &s.data.valid, 0.3).unwrap();
    assert!((0.0..=1.0).contains(&at0));
    assert!((at0 - at3 - 0.3).abs() < 1e-12);
    assert!(validate_r3(&model, &params, &scorer, &s.data.valid, 1.5).is_err());
}

#[test]
fn ablation_rows_match_standalone_cells() {
    let (s, scorer) = fixture();
    let mut base = common::small_train_config(s.tok.vocab_size(), LossKind::Coral);
    base.max_epochs = 1;
    let grid = AblationGrid {
        p_plus: vec![0.8, 1.0],
        margins: vec![0.0, 0.4],
        modes: vec![CandidateMode::RandomNegative],
    };
    let mut seen = 0;
    let rows = ablate(&s.data, &scorer, &base, &grid, |_| seen += 1).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(seen, 4);
    let r = &rows[1];
    let solo = train(&s.data, Some(&scorer), &cell_config(&base, r.p_plus, r.margin, r.mode)).unwrap();
    assert_eq!(solo.log.best().unwrap().val_r3, r.best_val_r3);
    assert!((r.best_val_score - r.best_val_r3 - r.margin).abs() < 1e-12);
}
