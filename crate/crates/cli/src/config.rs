//! Flat `key = value` run configuration.

use coral::coral::{CandidateMode, CoralConfig};
use coral::corpus::{CorpusFormat, PairLimits};
use coral::retrieval::{EsimConfig, RetrievalTrainConfig};
use coral::s2s::S2SConfig;
use coral::trainer::{AblationGrid, LossKind, TrainConfig};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`; known keys: {keys}", keys = RunConfig::KEYS.join(", "))]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decode {
    Greedy,
    Nucleus,
}

impl FromStr for Decode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "nucleus" => Ok(Self::Nucleus),
            other => Err(format!("expected greedy or nucleus, got {other}")),
        }
    }
}

impl fmt::Display for Decode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Greedy => "greedy",
            Self::Nucleus => "nucleus",
        })
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr,)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value.parse().map_err(|e| ConfigError::Value {
                            key: key.to_string(),
                            value: value.to_string(),
                            reason: format!("{e}"),
                        })?;
                    })*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// Every key, one `key = value` line each, in declaration order.
            pub fn render(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($key), self.$key));)*
                out
            }
        }
    };
}

run_config! {
    seed: u64 = 0,
    /// Directory holding train.txt, valid.txt and test.txt.
    data: String = String::new(),
    format: String = "eou-lines".into(),
    /// Root under which run directories are created.
    out: String = "runs".into(),
    /// train-retrieval run directory.
    scorer: String = String::new(),
    /// train-s2s run directory.
    model: String = String::new(),
    /// generate run directory.
    generations: String = String::new(),
    synth_train: usize = 5000,
    synth_valid: usize = 300,
    synth_test: usize = 500,
    vocab_size: usize = 200,
    max_context_turns: usize = 4,
    max_context_len: usize = 64,
    max_response_len: usize = 31,
    n_layers: usize = 2,
    n_heads: usize = 4,
    d_model: usize = 128,
    d_ff: usize = 512,
    dropout: f64 = 0.0,
    init_std: f64 = 0.02,
    esim_embed_dim: usize = 64,
    esim_hidden_dim: usize = 64,
    esim_mlp_1: usize = 128,
    esim_mlp_2: usize = 64,
    esim_dropout: f64 = 0.0,
    esim_epochs: usize = 10,
    esim_batch_size: usize = 32,
    esim_negatives: usize = 1,
    esim_val_negatives: usize = 9,
    esim_lr: f64 = 1e-3,
    esim_warmup_steps: u64 = 100,
    esim_patience: usize = 3,
    esim_shuffle_labels: bool = false,
    loss: LossKind = LossKind::Coral,
    batch_size: usize = 32,
    epochs: usize = 50,
    patience: usize = 5,
    lr: f64 = 1e-3,
    warmup_steps: u64 = 200,
    /// 0 disables clipping.
    clip_norm: f64 = 1.0,
    /// Validation pairs per epoch; 0 uses all.
    val_limit: usize = 0,
    p_plus: f64 = 0.8,
    margin: f64 = 0.4,
    mode: CandidateMode = CandidateMode::Nucleus,
    top_p: f64 = 0.9,
    both_terms: bool = false,
    decode: Decode = Decode::Greedy,
    grid_p_plus: String = "0.5,0.8,1.0".into(),
    grid_margin: String = "0,0.2,0.4".into(),
    grid_mode: String = "nucleus".into(),
}

impl RunConfig {
    /// Applies a config file body. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn format(&self) -> Result<CorpusFormat, ConfigError> {
        self.format.parse().map_err(|e| self.bad("format", &self.format, e))
    }

    fn bad(&self, key: &str, value: &str, e: impl fmt::Display) -> ConfigError {
        ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
            reason: e.to_string(),
        }
    }

    pub fn limits(&self) -> PairLimits {
        PairLimits {
            max_context_turns: self.max_context_turns,
            max_context_len: self.max_context_len,
            max_response_len: self.max_response_len,
        }
    }

    pub fn esim(&self, vocab_size: usize) -> EsimConfig {
        EsimConfig {
            vocab_size,
            embed_dim: self.esim_embed_dim,
            hidden_dim: self.esim_hidden_dim,
            mlp_dims: [self.esim_mlp_1, self.esim_mlp_2],
            dropout: self.esim_dropout,
        }
    }

    pub fn retrieval_train(&self) -> RetrievalTrainConfig {
        RetrievalTrainConfig {
            epochs: self.esim_epochs,
            batch_size: self.esim_batch_size,
            negatives: self.esim_negatives,
            lr: self.esim_lr,
            warmup_steps: self.esim_warmup_steps,
            patience: self.esim_patience,
            val_negatives: self.esim_val_negatives,
            shuffle_labels: self.esim_shuffle_labels,
            seed: self.seed,
        }
    }

    pub fn s2s(&self, vocab_size: usize) -> S2SConfig {
        S2SConfig {
            vocab_size,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_context_len: self.max_context_len,
            max_response_len: self.max_response_len + 1,
            dropout: self.dropout,
            init_std: self.init_std,
        }
    }

    pub fn train(&self, vocab_size: usize) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            loss: self.loss,
            coral: CoralConfig {
                p_plus: self.p_plus,
                margin: self.margin,
                mode: self.mode,
                top_p: self.top_p,
                both_terms: self.both_terms,
            },
            s2s: self.s2s(vocab_size),
            peak_lr: self.lr,
            warmup_steps: self.warmup_steps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            val_limit: (self.val_limit > 0).then_some(self.val_limit),
        }
    }

    pub fn grid(&self) -> Result<AblationGrid, ConfigError> {
        fn list<T: FromStr>(cfg: &RunConfig, key: &str, text: &str) -> Result<Vec<T>, ConfigError>
        where
            T::Err: fmt::Display,
        {
            text.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<T>().map_err(|e| cfg.bad(key, text, e)))
                .collect()
        }
        Ok(AblationGrid {
            p_plus: list(self, "grid_p_plus", &self.grid_p_plus)?,
            margins: list(self, "grid_margin", &self.grid_margin)?,
            modes: list(self, "grid_mode", &self.grid_mode)?,
        })
    }
}
