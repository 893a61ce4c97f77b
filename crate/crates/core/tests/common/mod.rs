#![allow(dead_code)]

pub mod checks;

use coral::backend::ParameterStore;
use coral::corpus::{generate_synthetic, Dataset, Oracle, PairLimits, SyntheticGrammar, Tokenizer};
use coral::retrieval::{train_retrieval, Esim, EsimConfig, EsimScorer, RetrievalTrainConfig};
use coral::s2s::S2SConfig;
use coral::trainer::{LossKind, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const LIMITS: PairLimits = PairLimits {
    max_context_turns: 4,
    max_context_len: 16,
    max_response_len: 11,
};

pub struct Synthetic {
    pub data: Dataset,
    pub tok: Tokenizer,
    pub oracle: Oracle,
}

pub fn synthetic(n_train: usize, n_valid: usize, n_test: usize, seed: u64) -> Synthetic {
    let grammar = SyntheticGrammar::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, oracle) = generate_synthetic(&grammar, n_train, &mut rng);
    let valid = grammar.generate(n_valid, &mut rng);
    let test = grammar.generate(n_test, &mut rng);
    // every grammar word, so held-out fillers are never <unk>
    let mut all = train.clone();
    all.push(grammar.all_contexts());
    all.push(grammar.fillers.values().flatten().cloned().collect());
    let tok = Tokenizer::from_dialogs(&all, 200).unwrap();
    let data = Dataset::from_splits(&train, &valid, &test, &tok, LIMITS).unwrap();
    Synthetic { data, tok, oracle }
}

pub fn tiny_s2s(vocab_size: usize, d_model: usize) -> S2SConfig {
    S2SConfig {
        vocab_size,
        n_layers: 2,
        n_heads: 2,
        d_model,
        d_ff: 2 * d_model,
        max_context_len: LIMITS.max_context_len,
        max_response_len: LIMITS.max_response_len + 1,
        dropout: 0.0,
        init_std: 0.05,
    }
}

pub fn small_train_config(vocab_size: usize, loss: LossKind) -> TrainConfig {
    let mut cfg = TrainConfig::new(tiny_s2s(vocab_size, 16));
    cfg.loss = loss;
    cfg.batch_size = 16;
    cfg.max_epochs = 3;
    cfg.patience = 3;
    cfg.warmup_steps = 10;
    cfg.peak_lr = 3e-3;
    cfg.seed = 11;
    cfg.val_limit = Some(24);
    cfg
}

pub fn small_scorer(s: &Synthetic, epochs: usize) -> EsimScorer {
    let model = Esim::new(EsimConfig {
        vocab_size: s.tok.vocab_size(),
        embed_dim: 12,
        hidden_dim: 12,
        mlp_dims: [16, 8],
        dropout: 0.0,
    })
    .unwrap();
    let cfg = RetrievalTrainConfig {
        epochs,
        seed: 2,
        warmup_steps: 10,
        ..Default::default()
    };
    let run = train_retrieval(&model, &s.data.train, &s.data.valid, &s.data.pool, &cfg).unwrap();
    EsimScorer {
        model,
        params: run.params,
    }
}

pub fn params_digest(p: &ParameterStore<f32>) -> Vec<u8> {
    let mut h = Sha256::new();
    for (name, t) in p.iter() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().to_vec()
}
