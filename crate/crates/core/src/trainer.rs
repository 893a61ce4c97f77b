//! Seq2Seq training loop for the CE baseline and the CORAL objective,
//! with validation-reward early stopping, checkpoint/resume, run logs and
//! grid sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{read_checkpoint, write_checkpoint, Adam, AdamConfig, BackendError, Graph, ParameterStore, Tensor};
use crate::coral::{
    batch_weighted_loss, candidate_rewards, select_candidates, CandidateMode, CandidateResponse, CoralConfig, CoralError,
};
use crate::corpus::{Dataset, TrainingPair};
use crate::metrics::greedy_hypotheses;
use crate::metrics::MetricsError;
use crate::retrieval::{r3, ResponseScorer, RetrievalError, RetrievalScore};
use crate::s2s::{S2SConfig, S2SError, Seq2Seq};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("coral loss needs a frozen retrieval scorer")]
    MissingScorer,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training pairs")]
    NoPairs,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Model(#[from] S2SError),
    #[error(transparent)]
    Coral(#[from] CoralError),
    #[error(transparent)]
    Scorer(#[from] RetrievalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad run state: {0}")]
    State(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Coral,
}

impl FromStr for LossKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "coral" => Ok(LossKind::Coral),
            other => Err(TrainError::Config(format!("unknown loss {other:?} (expected ce or coral)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Ce => "ce",
            LossKind::Coral => "coral",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub coral: CoralConfig,
    pub s2s: S2SConfig,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: Option<f64>,
    /// Validation pairs used per epoch; `None` uses all of them.
    pub val_limit: Option<usize>,
}

impl TrainConfig {
    pub fn new(s2s: S2SConfig) -> Self {
        Self {
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            loss: LossKind::Coral,
            coral: CoralConfig::default(),
            s2s,
            peak_lr: 1e-3,
            warmup_steps: 200,
            clip_norm: Some(1.0),
            val_limit: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "max_epochs, patience and batch_size must all be >= 1".into(),
            ));
        }
        self.coral.validate()?;
        self.s2s.validate()?;
        Ok(())
    }

    fn adam(&self, batches_per_epoch: usize) -> AdamConfig {
        AdamConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: (self.max_epochs * batches_per_epoch) as u64 + 1,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_r3: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch with the highest validation value.
    pub best_epoch: usize,
}

impl RunLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_r3,lr,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{:.3}\n", r.epoch, r.train_loss, r.val_r3, r.lr, r.seconds));
        }
        out
    }

    /// Everything except wall time, as exact bit patterns.
    pub fn trajectory(&self) -> Vec<(usize, u64, u64, u64)> {
        self.records
            .iter()
            .map(|r| (r.epoch, r.train_loss.to_bits(), r.val_r3.to_bits(), r.lr.to_bits()))
            .collect()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    pub bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Verdict {
        if self.best.is_none_or(|(_, b)| value > b) {
            self.best = Some((epoch, value));
            self.bad_epochs = 0;
            return Verdict::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }
}

/// Mean `score - margin` of greedy decodes. Empty decodes score 0.
pub fn validate_r3(
    model: &Seq2Seq,
    params: &ParameterStore<f32>,
    scorer: &dyn ResponseScorer,
    pairs: &[TrainingPair],
    margin: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let hyps = greedy_hypotheses(model, params, pairs)?;
    let mean_score = mean_score(scorer, pairs, &hyps)?;
    Ok(r3(RetrievalScore::new(mean_score), margin)?.value())
}

fn mean_score(scorer: &dyn ResponseScorer, pairs: &[TrainingPair], hyps: &[Vec<u32>]) -> Result<f64> {
    let rows: Vec<(&[u32], &[u32])> = pairs
        .iter()
        .zip(hyps)
        .filter(|(_, h)| !h.is_empty())
        .map(|(p, h)| (p.context.flat.as_slice(), h.as_slice()))
        .collect();
    let total: f64 = if rows.is_empty() {
        0.0
    } else {
        scorer.score_batch(&rows)?.iter().map(|s| s.value()).sum()
    };
    Ok(total / pairs.len() as f64)
}

/// Negative mean per-token cross-entropy of the ground truth.
pub fn validate_ce(model: &Seq2Seq, params: &ParameterStore<f32>, pairs: &[TrainingPair], batch_size: usize) -> Result<f64> {
    let (mut total, mut tokens) = (0.0f64, 0usize);
    for chunk in pairs.chunks(batch_size.max(1)) {
        let ctx: Vec<&[u32]> = chunk.iter().map(|p| p.context.flat.as_slice()).collect();
        let targets: Vec<Vec<u32>> = chunk.iter().map(|p| CandidateResponse::ground_truth(p).tokens).collect();
        let tref: Vec<&[u32]> = targets.iter().map(Vec::as_slice).collect();
        let mut g = Graph::inference();
        let lp = model.batch_logprobs(&mut g, params, &ctx, &tref)?;
        total += g.value(lp.totals).data().iter().map(|&x| x as f64).sum::<f64>();
        tokens += lp.lengths.iter().sum::<usize>();
    }
    Ok(total / tokens.max(1) as f64)
}

/// Batches of pair indices for one epoch: shuffled, grouped into windows of
/// similar response length, batch order shuffled again.
pub fn epoch_batches(pairs: &[TrainingPair], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(rng);
    let window = batch_size * 8;
    let mut batches = Vec::new();
    for w in idx.chunks_mut(window) {
        w.sort_by_key(|&i| pairs[i].response.len());
        batches.extend(w.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

pub fn batches_per_epoch(n_pairs: usize, batch_size: usize) -> usize {
    let window = batch_size * 8;
    let full = n_pairs / window;
    let rest = n_pairs % window;
    full * window.div_ceil(batch_size) + rest.div_ceil(batch_size)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// One optimizer step on a batch; returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &Seq2Seq,
    params: &mut ParameterStore<f32>,
    adam: &mut Adam<f32>,
    batch: &[&TrainingPair],
    cfg: &TrainConfig,
    pool: &crate::corpus::UtterancePool,
    scorer: Option<&dyn ResponseScorer>,
    rng: &mut ChaCha8Rng,
    dropout_seed: u64,
) -> Result<(f64, f64)> {
    let (owners, candidates, weights): (Vec<usize>, Vec<CandidateResponse>, Vec<f64>) = match cfg.loss {
        LossKind::Ce => {
            let c: Vec<CandidateResponse> = batch.iter().map(|p| CandidateResponse::ground_truth(p)).collect();
            ((0..batch.len()).collect(), c, vec![1.0; batch.len()])
        }
        LossKind::Coral => {
            let scorer = scorer.ok_or(TrainError::MissingScorer)?;
            let (owners, cands): (Vec<usize>, Vec<CandidateResponse>) =
                select_candidates(batch, &cfg.coral, pool, model, params, rng)?.into_iter().unzip();
            let ctx: Vec<&[u32]> = owners.iter().map(|&i| batch[i].context.flat.as_slice()).collect();
            let refs: Vec<&CandidateResponse> = cands.iter().collect();
            let rewards = candidate_rewards(scorer, &ctx, &refs, cfg.coral.margin)?;
            (owners, cands, rewards.iter().map(|r| r.value()).collect())
        }
    };
    let ctx: Vec<&[u32]> = owners.iter().map(|&i| batch[i].context.flat.as_slice()).collect();
    let targets: Vec<&[u32]> = candidates.iter().map(|c| c.tokens.as_slice()).collect();
    let mut g = Graph::new();
    if cfg.s2s.dropout > 0.0 {
        g = g.with_dropout_seed(dropout_seed);
    }
    let lp = model.batch_logprobs(&mut g, params, &ctx, &targets)?;
    let loss = batch_weighted_loss(&mut g, lp.totals, &weights, batch.len())?;
    let value = g.value(loss).item() as f64;
    g.backward(loss)?;
    params.accumulate_grads(&g);
    let lr = adam.step(params);
    Ok((value, lr))
}

const STATE_CKPT: &str = "state.ckpt";
const BEST_CKPT: &str = "best.ckpt";
const STATE_JSON: &str = "state.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunState {
    epoch: usize,
    step: u64,
    log: RunLog,
    stopper: EarlyStopper,
    finished: bool,
}

pub fn save_params(params: &ParameterStore<f32>, path: &Path) -> Result<()> {
    write_checkpoint(path, params.iter())?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParameterStore<f32>> {
    let mut s = ParameterStore::new();
    for (name, t) in read_checkpoint(path)? {
        s.insert(name, t)?;
    }
    Ok(s)
}

fn save_state(dir: &Path, params: &ParameterStore<f32>, adam: &Adam<f32>, state: &RunState) -> Result<()> {
    let opt = adam.state_tensors();
    let entries: Vec<(&str, &Tensor<f32>)> = params.iter().chain(opt.iter().map(|(n, t)| (n.as_str(), t))).collect();
    // write-then-rename keeps the previous state if interrupted
    let tmp = dir.join(format!("{STATE_CKPT}.tmp"));
    write_checkpoint(&tmp, entries)?;
    fs::rename(&tmp, dir.join(STATE_CKPT)).map_err(io_err(dir))?;
    let json = serde_json::to_string_pretty(state).expect("run state serializes");
    let path = dir.join(STATE_JSON);
    fs::write(&path, json).map_err(io_err(&path))
}

fn load_state(dir: &Path, adam_cfg: AdamConfig) -> Result<(ParameterStore<f32>, Adam<f32>, RunState)> {
    let path = dir.join(STATE_JSON);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let state: RunState = serde_json::from_str(&text).map_err(|e| TrainError::State(e.to_string()))?;
    let mut params = ParameterStore::new();
    let mut opt = Vec::new();
    for (name, t) in read_checkpoint(dir.join(STATE_CKPT))? {
        if name.starts_with("opt.") {
            opt.push((name, t));
        } else {
            params.insert(name, t)?;
        }
    }
    let adam = Adam::from_state(adam_cfg, state.step, opt)?;
    Ok((params, adam, state))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: ParameterStore<f32>,
    pub log: RunLog,
    /// False when the run stopped because of `halt_after`.
    pub finished: bool,
}

/// Where and how a run persists itself.
#[derive(Clone, Debug, Default)]
pub struct RunControl<'a> {
    /// Checkpoint directory; state is written after every epoch.
    pub dir: Option<&'a Path>,
    /// Continue from the state in `dir` instead of starting fresh.
    pub resume: bool,
    /// Stop (unfinished) after this many total epochs.
    pub halt_after: Option<usize>,
}

/// Trains from scratch without persistence.
pub fn train(dataset: &Dataset, scorer: Option<&dyn ResponseScorer>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(dataset, scorer, cfg, &RunControl::default())
}

pub fn run(
    dataset: &Dataset,
    scorer: Option<&dyn ResponseScorer>,
    cfg: &TrainConfig,
    ctl: &RunControl<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(TrainError::NoPairs);
    }
    if cfg.loss == LossKind::Coral && scorer.is_none() {
        return Err(TrainError::MissingScorer);
    }
    let model = Seq2Seq::new(cfg.s2s.clone())?;
    let adam_cfg = cfg.adam(batches_per_epoch(dataset.train.len(), cfg.batch_size));
    let (mut params, mut adam, mut state, mut best_params) = if ctl.resume {
        let dir = ctl.dir.ok_or_else(|| TrainError::State("resume needs a checkpoint directory".into()))?;
        let (p, a, s) = load_state(dir, adam_cfg)?;
        let best = load_params(&dir.join(BEST_CKPT))?;
        (p, a, s, Some(best))
    } else {
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let p = model.init_params::<f32, _>(&mut init_rng)?;
        let s = RunState {
            epoch: 0,
            step: 0,
            log: RunLog::default(),
            stopper: EarlyStopper::new(cfg.patience),
            finished: false,
        };
        (p, Adam::new(adam_cfg), s, None)
    };
    if let Some(dir) = ctl.dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let val: &[TrainingPair] = match cfg.val_limit {
        Some(n) => &dataset.valid[..n.min(dataset.valid.len())],
        None => &dataset.valid,
    };

    while !state.finished && state.epoch < cfg.max_epochs {
        if ctl.halt_after.is_some_and(|h| state.epoch >= h) {
            break;
        }
        let epoch = state.epoch + 1;
        let start = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        let batches = epoch_batches(&dataset.train, cfg.batch_size, &mut rng);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for (bi, b) in batches.iter().enumerate() {
            let batch: Vec<&TrainingPair> = b.iter().map(|&i| &dataset.train[i]).collect();
            let dropout_seed = cfg.seed ^ ((epoch as u64) << 32 | bi as u64);
            let (l, r) = train_batch(
                &model,
                &mut params,
                &mut adam,
                &batch,
                cfg,
                &dataset.pool,
                scorer,
                &mut rng,
                dropout_seed,
            )?;
            loss_sum += l;
            lr = r;
        }
        let val_r3 = match scorer {
            Some(sc) => validate_r3(&model, &params, sc, val, cfg.coral.margin)?,
            None => validate_ce(&model, &params, val, cfg.batch_size)?,
        };
        state.log.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len().max(1) as f64,
            val_r3,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        });
        let verdict = state.stopper.observe(epoch, val_r3);
        if verdict == Verdict::Improved {
            state.log.best_epoch = epoch;
            if let Some(dir) = ctl.dir {
                save_params(&params, &dir.join(BEST_CKPT))?;
            }
            best_params = Some(params.clone());
        }
        state.epoch = epoch;
        state.step = adam.step_count();
        state.finished = verdict == Verdict::Stop || epoch == cfg.max_epochs;
        if let Some(dir) = ctl.dir {
            save_state(dir, &params, &adam, &state)?;
        }
    }
    Ok(TrainOutcome {
        params: best_params.unwrap_or(params),
        log: state.log,
        finished: state.finished,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub p_plus: f64,
    pub margin: f64,
    pub mode: CandidateMode,
    pub best_val_r3: f64,
    /// `best_val_r3 + margin`, comparable across margins.
    pub best_val_score: f64,
    pub best_epoch: usize,
}

pub const ABLATION_HEADER: &str = "p_plus,margin,mode,best_val_r3,best_val_score,best_epoch";

impl AblationRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.p_plus, self.margin, self.mode, self.best_val_r3, self.best_val_score, self.best_epoch
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub p_plus: Vec<f64>,
    pub margins: Vec<f64>,
    pub modes: Vec<CandidateMode>,
}

impl AblationGrid {
    pub fn cells(&self) -> Vec<(f64, f64, CandidateMode)> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &p in &self.p_plus {
                for &m in &self.margins {
                    out.push((p, m, mode));
                }
            }
        }
        out
    }
}

/// The config for one grid cell.
pub fn cell_config(base: &TrainConfig, p_plus: f64, margin: f64, mode: CandidateMode) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.loss = LossKind::Coral;
    cfg.coral.p_plus = p_plus;
    cfg.coral.margin = margin;
    cfg.coral.mode = mode;
    cfg
}

/// Trains every cell of the grid with the same seed, sequentially.
pub fn ablate(
    dataset: &Dataset,
    scorer: &dyn ResponseScorer,
    base: &TrainConfig,
    grid: &AblationGrid,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(TrainError::Config("empty ablation grid".into()));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (p, m, mode) in cells {
        let out = train(dataset, Some(scorer), &cell_config(base, p, m, mode))?;
        let best = out.log.best().expect("at least one epoch");
        let row = AblationRow {
            p_plus: p,
            margin: m,
            mode,
            best_val_r3: best.val_r3,
            best_val_score: best.val_r3 + m,
            best_epoch: out.log.best_epoch,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
