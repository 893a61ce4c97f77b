//! Dialog corpora: loading, word-level tokenization, context/response pairs,
//! the random-negative utterance pool, and a synthetic grammar whose
//! compatibility oracle is exact.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Deserialize;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const EOU: u32 = 3;
pub const UNK: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<eou>", "<unk>"];

/// Surface form of the turn separator in eou-lines files.
pub const EOU_TEXT: &str = "EOU";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("utterance pool is empty")]
    EmptyPool,
    #[error("vocabulary size {0} is smaller than the {n} special tokens", n = SPECIAL_TOKENS.len())]
    VocabTooSmall(usize),
    #[error("unknown corpus format `{0}` (expected eou-lines or jsonl)")]
    UnknownFormat(String),
    #[error("tokenizer file: {0}")]
    BadVocab(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    /// One dialog per line, utterances separated by ` EOU ` (or `__eou__`).
    EouLines,
    /// `{"dialog": ["utt1", "utt2", ...]}` per line.
    Jsonl,
}

impl std::str::FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eou-lines" | "eou" | "txt" => Ok(Self::EouLines),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

/// A raw dialog: ordered utterance strings.
pub type Dialog = Vec<String>;

#[derive(Deserialize)]
struct JsonDialog {
    dialog: Vec<String>,
}

fn split_eou_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for w in line.split_whitespace() {
        if w == EOU_TEXT || w == "__eou__" {
            if !cur.is_empty() {
                out.push(cur.join(" "));
                cur.clear();
            }
        } else {
            cur.push(w);
        }
    }
    if !cur.is_empty() {
        out.push(cur.join(" "));
    }
    out
}

pub fn parse_corpus(reader: impl BufRead, format: CorpusFormat) -> Result<Vec<Dialog>> {
    let mut dialogs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let dialog = match format {
            CorpusFormat::EouLines => split_eou_line(&line),
            CorpusFormat::Jsonl => {
                let parsed: JsonDialog = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                    line: n,
                    msg: e.to_string(),
                })?;
                parsed
                    .dialog
                    .into_iter()
                    .map(|u| u.trim().to_string())
                    .filter(|u| !u.is_empty())
                    .collect()
            }
        };
        if dialog.is_empty() {
            return Err(CorpusError::Malformed {
                line: n,
                msg: "dialog has no utterances".into(),
            });
        }
        dialogs.push(dialog);
    }
    Ok(dialogs)
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<Dialog>> {
    parse_corpus(BufReader::new(fs::File::open(path)?), format)
}

pub fn write_eou_lines(path: impl AsRef<Path>, dialogs: &[Dialog]) -> Result<()> {
    let sep = format!(" {EOU_TEXT} ");
    let mut text = String::new();
    for d in dialogs {
        text.push_str(&d.join(&sep));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Lowercases and splits on whitespace; every non-alphanumeric character is
/// its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                word.extend(c.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// The normal form that `decode(encode(x))` reproduces for in-vocabulary text.
pub fn normalize(text: &str) -> String {
    split_words(text).join(" ")
}

/// Frequency-ranked word vocabulary with five reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(CorpusError::BadVocab(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Specials followed by the `vocab_size - 5` most frequent words; equal
    /// counts are ordered lexicographically.
    pub fn build<'a>(utterances: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<Self> {
        if vocab_size < SPECIAL_TOKENS.len() {
            return Err(CorpusError::VocabTooSmall(vocab_size));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for u in utterances {
            for w in split_words(u) {
                *counts.entry(w).or_default() += 1;
            }
        }
        for s in SPECIAL_TOKENS {
            counts.remove(s);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(vocab_size - SPECIAL_TOKENS.len()).map(|(w, _)| w));
        Self::from_tokens(tokens)
    }

    pub fn from_dialogs(dialogs: &[Dialog], vocab_size: usize) -> Result<Self> {
        Self::build(dialogs.iter().flatten().map(String::as_str), vocab_size)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`Tokenizer::encode`]. PAD and BOS are dropped, EOS ends the
    /// text, EOU renders as the eou-lines separator.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                PAD | BOS => {}
                EOS => break,
                EOU => words.push(EOU_TEXT),
                _ => words.push(self.token(id).unwrap_or("<unk>")),
            }
        }
        words.join(" ")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..5] != SPECIAL_TOKENS {
            return Err(CorpusError::BadVocab("specials must come first".into()));
        }
        Self::from_tokens(tokens)
    }
}

/// Token ids of one dialog turn.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Utterance(pub Vec<u32>);

impl Utterance {
    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Prior turns, also flattened with EOU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogContext {
    pub utterances: Vec<Utterance>,
    pub flat: Vec<u32>,
}

impl DialogContext {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        let mut flat = Vec::new();
        for (i, u) in utterances.iter().enumerate() {
            if i > 0 {
                flat.push(EOU);
            }
            flat.extend_from_slice(u.ids());
        }
        Self { utterances, flat }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// Drops oldest turns until the flat form fits `max_len`; a single
    /// remaining turn that is still too long keeps its last tokens.
    pub fn truncate(&mut self, max_len: usize) {
        if self.flat.len() <= max_len {
            return;
        }
        let mut turns = std::mem::take(&mut self.utterances);
        while turns.len() > 1 && DialogContext::new(turns.clone()).len() > max_len {
            turns.remove(0);
        }
        if let Some(only) = turns.first_mut() {
            if only.len() > max_len {
                only.0.drain(..only.len() - max_len);
            }
        }
        *self = DialogContext::new(turns);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub context: DialogContext,
    pub response: Utterance,
}

/// Tokenizes every turn; turns that tokenize to nothing are dropped.
pub fn tokenize_dialogs(dialogs: &[Dialog], tok: &Tokenizer) -> Vec<Vec<Utterance>> {
    dialogs
        .iter()
        .map(|d| {
            d.iter()
                .map(|u| Utterance(tok.encode(u)))
                .filter(|u| !u.is_empty())
                .collect()
        })
        .collect()
}

/// One pair per turn `t >= 2` (1-based), with context turns
/// `max(1, t - max_context_turns) ..= t - 1`.
pub fn make_pairs(dialogs: &[Vec<Utterance>], max_context_turns: usize) -> Vec<TrainingPair> {
    let window = max_context_turns.max(1);
    let mut pairs = Vec::new();
    for d in dialogs {
        for t in 1..d.len() {
            let start = t.saturating_sub(window);
            pairs.push(TrainingPair {
                context: DialogContext::new(d[start..t].to_vec()),
                response: d[t].clone(),
            });
        }
    }
    pairs
}

/// Every training utterance, for random-negative candidates.
#[derive(Clone, Debug)]
pub struct UtterancePool {
    utterances: Vec<Utterance>,
}

impl UtterancePool {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(CorpusError::EmptyPool);
        }
        Ok(Self { utterances })
    }

    pub fn from_dialogs(dialogs: &[Vec<Utterance>]) -> Result<Self> {
        Self::new(dialogs.iter().flatten().cloned().collect())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &Utterance {
        &self.utterances[rng.gen_range(0..self.utterances.len())]
    }
}

/// Uniform draw from `pool`; an empty pool is an error.
pub fn sample_negative<'a, R: Rng + ?Sized>(pool: &'a [Utterance], rng: &mut R) -> Result<&'a Utterance> {
    pool.choose(rng).ok_or(CorpusError::EmptyPool)
}

/// Template with at most one `{slot}` placeholder, written as space-separated words.
#[derive(Clone, Debug)]
pub struct Template {
    pub words: Vec<String>,
    pub slot: Option<String>,
}

impl Template {
    pub fn parse(text: &str) -> Self {
        let mut slot = None;
        let words = text
            .split_whitespace()
            .map(|w| {
                if let Some(name) = w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                    slot = Some(name.to_string());
                }
                w.to_string()
            })
            .collect();
        Self { words, slot }
    }

    pub fn fill(&self, filler: Option<&str>) -> String {
        self.words
            .iter()
            .map(|w| {
                if w.starts_with('{') {
                    filler.expect("slot template needs a filler")
                } else {
                    w.as_str()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug)]
pub struct TemplateFamily {
    pub name: String,
    pub contexts: Vec<Template>,
    pub responses: Vec<Template>,
}

/// Context-template families with per-family valid response templates.
///
/// A response is valid for a context exactly when it instantiates one of
/// the context family's response templates, and, when both sides carry the
/// same slot type, uses the context's filler.
#[derive(Clone, Debug)]
pub struct SyntheticGrammar {
    pub families: Vec<TemplateFamily>,
    pub fillers: BTreeMap<String, Vec<String>>,
}

impl Default for SyntheticGrammar {
    fn default() -> Self {
        let fam = |name: &str, ctx: &[&str], resp: &[&str]| TemplateFamily {
            name: name.to_string(),
            contexts: ctx.iter().map(|t| Template::parse(t)).collect(),
            responses: resp.iter().map(|t| Template::parse(t)).collect(),
        };
        let families = vec![
            fam(
                "food",
                &["do you like {food} ?", "what do you think of {food} ?"],
                &["yes i like {food}", "no i do not like {food}", "i love {food} a lot"],
            ),
            fam(
                "travel",
                &["have you been to {city} ?", "did you visit {city} last year ?"],
                &["yes i went to {city}", "no i have never been to {city}"],
            ),
            fam(
                "sport",
                &["do you play {sport} ?", "can you teach me {sport} ?"],
                &["i play {sport} every week", "sorry i am bad at {sport}"],
            ),
            fam(
                "pets",
                &["do you keep {animal} at home ?"],
                &["yes i have two {animal}", "no i am afraid of {animal}"],
            ),
            fam(
                "car",
                &["what color is your car ?"],
                &["my car is {color}", "it is {color} and old"],
            ),
            fam(
                "job",
                &["what does your father do ?"],
                &["he is a {job}", "he works as a {job}"],
            ),
            fam(
                "greeting",
                &["how are you today ?", "how is it going ?"],
                &["i am fine thanks", "not bad and you ?"],
            ),
            fam(
                "weather",
                &["is it raining in {city} ?"],
                &["yes it is raining in {city}", "no it is sunny in {city}"],
            ),
        ];
        let words = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect::<Vec<_>>();
        let mut fillers = BTreeMap::new();
        fillers.insert(
            "food".into(),
            words(&["tea", "coffee", "pizza", "pasta", "rice", "soup", "cake", "bread"]),
        );
        fillers.insert(
            "city".into(),
            words(&["paris", "london", "tokyo", "rome", "berlin", "madrid", "cairo", "lima"]),
        );
        fillers.insert(
            "sport".into(),
            words(&["tennis", "soccer", "golf", "chess", "hockey", "rugby", "boxing", "skiing"]),
        );
        fillers.insert(
            "animal".into(),
            words(&["cats", "dogs", "horses", "birds", "rabbits", "snakes", "ducks", "goats"]),
        );
        fillers.insert(
            "color".into(),
            words(&["red", "blue", "green", "yellow", "black", "white", "pink", "purple"]),
        );
        fillers.insert(
            "job".into(),
            words(&["teacher", "doctor", "nurse", "pilot", "chef", "farmer", "lawyer", "baker"]),
        );
        Self { families, fillers }
    }
}

/// Parsed identity of a grammar context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextParse {
    pub family: usize,
    pub slot: Option<(String, String)>,
}

impl SyntheticGrammar {
    fn slot_fillers(&self, slot: &str) -> &[String] {
        self.fillers.get(slot).map(Vec::as_slice).unwrap_or(&[])
    }

    fn match_template(&self, t: &Template, words: &[&str]) -> Option<Option<String>> {
        if t.words.len() != words.len() {
            return None;
        }
        let mut filler = None;
        for (tw, w) in t.words.iter().zip(words) {
            if tw.starts_with('{') {
                let slot = t.slot.as_deref().unwrap();
                if !self.slot_fillers(slot).iter().any(|f| f == w) {
                    return None;
                }
                filler = Some(w.to_string());
            } else if tw != w {
                return None;
            }
        }
        Some(filler)
    }

    /// Identifies which family (and filler) produced a context utterance.
    pub fn parse_context(&self, text: &str) -> Option<ContextParse> {
        let norm = normalize(text);
        let words: Vec<&str> = norm.split(' ').collect();
        for (fi, fam) in self.families.iter().enumerate() {
            for t in &fam.contexts {
                if let Some(filler) = self.match_template(t, &words) {
                    return Some(ContextParse {
                        family: fi,
                        slot: t.slot.clone().zip(filler),
                    });
                }
            }
        }
        None
    }

    fn instantiate(&self, t: &Template, bound: Option<&(String, String)>) -> Vec<String> {
        match &t.slot {
            None => vec![t.fill(None)],
            Some(slot) => match bound {
                Some((s, f)) if s == slot => vec![t.fill(Some(f))],
                _ => self.slot_fillers(slot).iter().map(|f| t.fill(Some(f))).collect(),
            },
        }
    }

    /// All responses the oracle accepts for a parsed context.
    pub fn valid_responses(&self, ctx: &ContextParse) -> Vec<String> {
        self.families[ctx.family]
            .responses
            .iter()
            .flat_map(|t| self.instantiate(t, ctx.slot.as_ref()))
            .collect()
    }

    /// Responses of every other family (all rejected for `ctx`).
    pub fn invalid_responses(&self, ctx: &ContextParse) -> Vec<String> {
        let valid: HashSet<String> = self.valid_responses(ctx).into_iter().collect();
        self.families
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != ctx.family)
            .flat_map(|(_, f)| f.responses.iter().flat_map(|t| self.instantiate(t, None)))
            .filter(|r| !valid.contains(r))
            .collect()
    }

    /// Every context string the grammar can produce.
    pub fn all_contexts(&self) -> Vec<String> {
        self.families
            .iter()
            .flat_map(|f| f.contexts.iter().flat_map(|t| self.instantiate(t, None)))
            .collect()
    }

    /// Samples `n_dialogs` two-turn dialogs (context, valid response).
    pub fn generate<R: Rng + ?Sized>(&self, n_dialogs: usize, rng: &mut R) -> Vec<Dialog> {
        (0..n_dialogs)
            .map(|_| {
                let fam = self.families.choose(rng).unwrap();
                let ct = fam.contexts.choose(rng).unwrap();
                let cf = ct.slot.as_ref().map(|s| self.slot_fillers(s).choose(rng).unwrap().clone());
                let rt = fam.responses.choose(rng).unwrap();
                let rf = match (&rt.slot, &ct.slot) {
                    (Some(rs), Some(cs)) if rs == cs => cf.clone(),
                    (Some(rs), _) => Some(self.slot_fillers(rs).choose(rng).unwrap().clone()),
                    (None, _) => None,
                };
                vec![ct.fill(cf.as_deref()), rt.fill(rf.as_deref())]
            })
            .collect()
    }
}

/// Exact compatibility judge for a [`SyntheticGrammar`].
#[derive(Clone, Debug)]
pub struct Oracle {
    grammar: SyntheticGrammar,
}

impl Oracle {
    pub fn new(grammar: SyntheticGrammar) -> Self {
        Self { grammar }
    }

    pub fn grammar(&self) -> &SyntheticGrammar {
        &self.grammar
    }

    /// 1 iff `response` instantiates a valid template for the context. Only
    /// the last turn of a multi-turn context (text after the final EOU) is
    /// judged.
    pub fn judge(&self, context: &str, response: &str) -> u8 {
        let last = context.rsplit(EOU_TEXT).next().unwrap_or(context);
        let Some(parse) = self.grammar.parse_context(last) else {
            return 0;
        };
        let resp = normalize(response);
        u8::from(self.grammar.valid_responses(&parse).contains(&resp))
    }
}

/// Synthetic corpus and its oracle.
pub fn generate_synthetic<R: Rng + ?Sized>(
    grammar: &SyntheticGrammar,
    n_dialogs: usize,
    rng: &mut R,
) -> (Vec<Dialog>, Oracle) {
    (grammar.generate(n_dialogs, rng), Oracle::new(grammar.clone()))
}

/// Tokenized train/valid/test pairs plus the training utterance pool.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<TrainingPair>,
    pub valid: Vec<TrainingPair>,
    pub test: Vec<TrainingPair>,
    pub pool: UtterancePool,
}

#[derive(Clone, Copy, Debug)]
pub struct PairLimits {
    pub max_context_turns: usize,
    pub max_context_len: usize,
    /// Response tokens kept (EOS excluded).
    pub max_response_len: usize,
}

impl Default for PairLimits {
    fn default() -> Self {
        Self {
            max_context_turns: 4,
            max_context_len: 64,
            max_response_len: 31,
        }
    }
}

pub fn prepare_pairs(dialogs: &[Dialog], tok: &Tokenizer, limits: PairLimits) -> Vec<TrainingPair> {
    let mut pairs = make_pairs(&tokenize_dialogs(dialogs, tok), limits.max_context_turns);
    for p in &mut pairs {
        p.context.truncate(limits.max_context_len);
        p.response.0.truncate(limits.max_response_len);
    }
    pairs
}

impl Dataset {
    pub fn from_splits(
        train: &[Dialog],
        valid: &[Dialog],
        test: &[Dialog],
        tok: &Tokenizer,
        limits: PairLimits,
    ) -> Result<Self> {
        let mut pool_dialogs = tokenize_dialogs(train, tok);
        for u in pool_dialogs.iter_mut().flatten() {
            u.0.truncate(limits.max_response_len);
        }
        Ok(Self {
            train: prepare_pairs(train, tok, limits),
            valid: prepare_pairs(valid, tok, limits),
            test: prepare_pairs(test, tok, limits),
            pool: UtterancePool::from_dialogs(&pool_dialogs)?,
        })
    }
}
