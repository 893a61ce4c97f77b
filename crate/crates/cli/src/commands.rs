use crate::config::{Decode, RunConfig};
use anyhow::{bail, ensure, Context, Result};
use coral::corpus::{load_corpus, write_eou_lines, Dataset, Dialog, Oracle, SyntheticGrammar, Tokenizer};
use coral::metrics::{evaluate_items, EvalItem};
use coral::retrieval::{train_retrieval, Esim, EsimConfig, EsimScorer};
use coral::s2s::{DecodeStrategy, S2SConfig, Seq2Seq};
use coral::trainer::{ablate, load_params, run, save_params, RunControl, ABLATION_HEADER};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Written into a data directory produced by `synth`; evaluation then
/// reports oracle validity.
const SYNTHETIC_MARKER: &str = "synthetic";
const DECODE_CHUNK: usize = 32;

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<out>/<command>-<seed>-<timestamp>`, echoes the config and
    /// points `<out>/latest` at it.
    pub fn create(command: &str, cfg: &RunConfig) -> Result<Self> {
        let root = PathBuf::from(&cfg.out);
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs();
        let base = format!("{command}-{}-{stamp}", cfg.seed);
        let mut name = base.clone();
        let mut k = 1;
        while root.join(&name).exists() {
            name = format!("{base}-{k}");
            k += 1;
        }
        let path = root.join(&name);
        fs::create_dir(&path)?;
        fs::write(path.join("effective.conf"), cfg.render())?;
        fs::write(root.join("latest"), format!("{name}\n"))?;
        Ok(Self { path })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

/// Resolves a path-valued key; `latest` follows `<out>/latest`.
pub fn resolve(cfg: &RunConfig, key: &str, value: &str) -> Result<PathBuf> {
    ensure!(!value.is_empty(), "`{key}` is required for this command");
    if value == "latest" {
        let root = Path::new(&cfg.out);
        let name = fs::read_to_string(root.join("latest"))
            .with_context(|| format!("no latest run under {}", root.display()))?;
        return Ok(root.join(name.trim()));
    }
    let p = PathBuf::from(value);
    ensure!(p.exists(), "`{key}` path {} does not exist", p.display());
    Ok(p)
}

/// Replaces path-valued keys with absolute paths so the echoed config
/// reruns from anywhere.
pub fn pin_paths(cfg: &mut RunConfig) -> Result<()> {
    for key in ["data", "scorer", "model", "generations"] {
        let value = match key {
            "data" => &cfg.data,
            "scorer" => &cfg.scorer,
            "model" => &cfg.model,
            _ => &cfg.generations,
        };
        if value.is_empty() {
            continue;
        }
        let abs = fs::canonicalize(resolve(cfg, key, value)?)?;
        cfg.set(key, &abs.to_string_lossy())?;
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

struct Splits {
    train: Vec<Dialog>,
    valid: Vec<Dialog>,
    test: Vec<Dialog>,
    oracle: Option<Oracle>,
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let dir = resolve(cfg, "data", &cfg.data)?;
    let format = cfg.format()?;
    let ext = if format == coral::corpus::CorpusFormat::Jsonl { "jsonl" } else { "txt" };
    let load = |split: &str| -> Result<Vec<Dialog>> {
        let p = dir.join(format!("{split}.{ext}"));
        load_corpus(&p, format).with_context(|| format!("loading {}", p.display()))
    };
    Ok(Splits {
        train: load("train")?,
        valid: load("valid")?,
        test: load("test")?,
        oracle: dir
            .join(SYNTHETIC_MARKER)
            .exists()
            .then(|| Oracle::new(SyntheticGrammar::default())),
    })
}

fn dataset(splits: &Splits, tok: &Tokenizer, cfg: &RunConfig) -> Result<Dataset> {
    Ok(Dataset::from_splits(&splits.train, &splits.valid, &splits.test, tok, cfg.limits())?)
}

fn load_scorer(dir: &Path) -> Result<(EsimScorer, Tokenizer)> {
    let esim: EsimConfig = read_json(&dir.join("esim.json"))?;
    let params = load_params(&dir.join("scorer.ckpt"))?;
    let tok = Tokenizer::load(dir.join("vocab.txt"))?;
    Ok((
        EsimScorer {
            model: Esim::new(esim)?,
            params,
        },
        tok,
    ))
}

fn optional_scorer(cfg: &RunConfig) -> Result<Option<(EsimScorer, Tokenizer)>> {
    if cfg.scorer.is_empty() {
        return Ok(None);
    }
    Ok(Some(load_scorer(&resolve(cfg, "scorer", &cfg.scorer)?)?))
}

fn same_vocab(a: &Tokenizer, b: &Tokenizer) -> bool {
    a.vocab_size() == b.vocab_size() && (0..a.vocab_size() as u32).all(|i| a.token(i) == b.token(i))
}

pub fn synth(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = RunDir::create("synth", cfg)?;
    let grammar = SyntheticGrammar::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    write_eou_lines(dir.file("train.txt"), &grammar.generate(cfg.synth_train, &mut rng))?;
    write_eou_lines(dir.file("valid.txt"), &grammar.generate(cfg.synth_valid, &mut rng))?;
    write_eou_lines(dir.file("test.txt"), &grammar.generate(cfg.synth_test, &mut rng))?;
    fs::write(dir.file(SYNTHETIC_MARKER), "")?;
    Ok(dir.path)
}

pub fn train_retrieval_cmd(cfg: &RunConfig) -> Result<PathBuf> {
    let splits = load_splits(cfg)?;
    let tok = Tokenizer::from_dialogs(&splits.train, cfg.vocab_size)?;
    let data = dataset(&splits, &tok, cfg)?;
    let esim = cfg.esim(tok.vocab_size());
    let model = Esim::new(esim.clone())?;
    let dir = RunDir::create("train-retrieval", cfg)?;
    tok.save(dir.file("vocab.txt"))?;
    write_json(&dir.file("esim.json"), &esim)?;
    let out = train_retrieval(&model, &data.train, &data.valid, &data.pool, &cfg.retrieval_train())?;
    let mut csv = String::from("epoch,train_loss,val_auc\n");
    for e in &out.epochs {
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_auc));
    }
    fs::write(dir.file("retrieval.csv"), csv)?;
    save_params(&out.params, &dir.file("scorer.ckpt"))?;
    if let Some(best) = out.epochs.iter().find(|e| e.epoch == out.best_epoch) {
        println!("best epoch {} val_auc {:.4}", best.epoch, best.val_auc);
    }
    Ok(dir.path)
}

/// Tokenizer for a generator run: the scorer's when one is given, so ids
/// agree, otherwise built from the training split.
fn generator_vocab(splits: &Splits, scorer: &Option<(EsimScorer, Tokenizer)>, cfg: &RunConfig) -> Result<Tokenizer> {
    Ok(match scorer {
        Some((_, tok)) => tok.clone(),
        None => Tokenizer::from_dialogs(&splits.train, cfg.vocab_size)?,
    })
}

pub fn train_s2s(cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let splits = load_splits(cfg)?;
    let scorer = optional_scorer(cfg)?;
    let tok = generator_vocab(&splits, &scorer, cfg)?;
    let data = dataset(&splits, &tok, cfg)?;
    let tcfg = cfg.train(tok.vocab_size());
    let dir = match resume {
        Some(p) => RunDir { path: p.to_path_buf() },
        None => {
            let d = RunDir::create("train-s2s", cfg)?;
            tok.save(d.file("vocab.txt"))?;
            write_json(&d.file("model.json"), &tcfg.s2s)?;
            d
        }
    };
    let ctl = RunControl {
        dir: Some(&dir.path),
        resume: resume.is_some(),
        halt_after: None,
    };
    let out = run(&data, scorer.as_ref().map(|s| &s.0 as _), &tcfg, &ctl)?;
    fs::write(dir.file("runlog.csv"), out.log.to_csv())?;
    if let Some(best) = out.log.best() {
        println!("best epoch {} val_r3 {:.4}", best.epoch, best.val_r3);
    }
    Ok(dir.path)
}

pub fn generate(cfg: &RunConfig) -> Result<PathBuf> {
    let model_dir = resolve(cfg, "model", &cfg.model)?;
    let s2s: S2SConfig = read_json(&model_dir.join("model.json"))?;
    let ckpt = model_dir.join("best.ckpt");
    ensure!(ckpt.exists(), "missing checkpoint {}", ckpt.display());
    let params = load_params(&ckpt)?;
    let tok = Tokenizer::load(model_dir.join("vocab.txt"))?;
    let splits = load_splits(cfg)?;
    let data = dataset(&splits, &tok, cfg)?;
    let model = Seq2Seq::new(s2s)?;
    let strategy = match cfg.decode {
        Decode::Greedy => DecodeStrategy::Greedy,
        Decode::Nucleus => DecodeStrategy::Nucleus { top_p: cfg.top_p },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lines = String::new();
    for chunk in data.test.chunks(DECODE_CHUNK) {
        let ctx: Vec<&[u32]> = chunk.iter().map(|p| p.context.flat.as_slice()).collect();
        for r in model.decode_batch(&params, &ctx, strategy, usize::MAX, &mut rng)? {
            lines.push_str(&tok.decode(r.response()));
            lines.push('\n');
        }
    }
    let dir = RunDir::create("generate", cfg)?;
    tok.save(dir.file("vocab.txt"))?;
    fs::write(dir.file("generations.txt"), lines)?;
    Ok(dir.path)
}

pub fn evaluate(cfg: &RunConfig) -> Result<PathBuf> {
    let gen_dir = resolve(cfg, "generations", &cfg.generations)?;
    let tok = Tokenizer::load(gen_dir.join("vocab.txt"))?;
    let text = fs::read_to_string(gen_dir.join("generations.txt")).context("reading generations.txt")?;
    let hyps: Vec<&str> = text.lines().collect();
    let splits = load_splits(cfg)?;
    let data = dataset(&splits, &tok, cfg)?;
    if hyps.len() != data.test.len() {
        bail!("{} generations for {} test contexts", hyps.len(), data.test.len());
    }
    let scorer = optional_scorer(cfg)?;
    if let Some((_, stok)) = &scorer {
        ensure!(same_vocab(stok, &tok), "scorer vocabulary differs from the generator's");
    }
    let items: Vec<EvalItem> = data
        .test
        .iter()
        .zip(&hyps)
        .map(|(p, h)| EvalItem {
            context: p.context.flat.clone(),
            hypothesis: tok.encode(h),
            reference: p.response.0.clone(),
        })
        .collect();
    let report = evaluate_items(&items, &tok, scorer.as_ref().map(|s| &s.0 as _), splits.oracle.as_ref())?;
    let dir = RunDir::create("evaluate", cfg)?;
    fs::write(dir.file("metrics.json"), report.to_json())?;
    println!("{}", report.to_json());
    Ok(dir.path)
}

pub fn ablate_cmd(cfg: &RunConfig) -> Result<PathBuf> {
    let splits = load_splits(cfg)?;
    let (scorer, tok) = load_scorer(&resolve(cfg, "scorer", &cfg.scorer)?)?;
    let data = dataset(&splits, &tok, cfg)?;
    let grid = cfg.grid()?;
    ensure!(!grid.cells().is_empty(), "empty ablation grid");
    let dir = RunDir::create("ablate", cfg)?;
    let mut file = fs::File::create(dir.file("ablation.csv"))?;
    writeln!(file, "{ABLATION_HEADER}")?;
    let mut write_err = None;
    ablate(&data, &scorer, &cfg.train(tok.vocab_size()), &grid, |row| {
        println!("{}", row.csv_line());
        if let Err(e) = writeln!(file, "{}", row.csv_line()).and_then(|_| file.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    Ok(dir.path)
}
