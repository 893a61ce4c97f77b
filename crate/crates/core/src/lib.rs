//! Policy-gradient training of dialog response generators against a frozen
//! retrieval-model reward.
//!
//! Module map:
//! - [`backend`]: tensors, reverse-mode tape, Adam, checkpoints
//! - [`corpus`]: loading, tokenization, context/response pairs, synthetic grammar
//! - [`s2s`]: transformer encoder-decoder policy and its decoders
//! - [`retrieval`]: ESIM-style compatibility scorer and the margin-shifted reward
//! - [`coral`]: candidate selection and the reward-weighted likelihood losses
//! - [`trainer`]: batching, optimization, validation-reward early stopping, sweeps
//! - [`metrics`]: BLEU, exact-match METEOR, Distinct-n, reference-free score

pub mod backend;
pub mod coral;
pub mod corpus;
pub mod metrics;
pub mod retrieval;
pub mod s2s;
pub mod trainer;
