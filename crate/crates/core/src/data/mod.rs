//! Synthetic capability tasks, a general-text corpus, and their on-disk
//! JSONL form.
//!
//! Every task is built from a fixed "world" (a dictionary, a relation table,
//! a name list) that does not depend on the seed; the seed only controls
//! which prompts are sampled and how they are split. Datasets generated with
//! different seeds therefore probe the same underlying facts, which is what
//! lets one pretrained model serve every experiment.

mod corpus;
mod io;
mod tasks;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, Tokenizer};

pub use corpus::{generate_general_corpus, GeneralCorpus, GeneralGrammar};
pub use io::{
    read_corpus, read_dataset, read_jsonl, write_corpus, write_dataset, write_jsonl, DataLayout,
};
pub use tasks::{all_task_texts, World};

/// Smallest dataset the generators accept.
pub const MIN_TASK_SIZE: usize = 20;
/// Seed offset reserved for held-out capability sets so they never collide
/// with a dataset seed chosen by the user.
const CAPABILITY_SEED_SALT: u64 = 0x5eed_cafe_0000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mapping,
    Ioi,
    Analogy,
    Parity,
    Agreement,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Mapping,
        TaskKind::Ioi,
        TaskKind::Analogy,
        TaskKind::Parity,
        TaskKind::Agreement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Mapping => "mapping",
            TaskKind::Ioi => "ioi",
            TaskKind::Analogy => "analogy",
            TaskKind::Parity => "parity",
            TaskKind::Agreement => "agreement",
        }
    }

    pub fn mode(self) -> LossMode {
        match self {
            TaskKind::Agreement => LossMode::Sentence,
            _ => LossMode::Token,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task kind {s:?}")))
    }
}

/// Whether a task compares single answer tokens or whole sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Token,
    Sentence,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(LossMode::Token),
            "sentence" => Ok(LossMode::Sentence),
            _ => Err(Error::Config(format!("unknown loss mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenTriplet {
    pub prompt: String,
    pub correct: String,
    pub wrong: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentencePair {
    pub good: String,
    pub bad: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Example {
    Token(TokenTriplet),
    Sentence(SentencePair),
}

impl Example {
    pub fn mode(&self) -> LossMode {
        match self {
            Example::Token(_) => LossMode::Token,
            Example::Sentence(_) => LossMode::Sentence,
        }
    }

    /// The string duplicates are detected on: the prompt, or the good
    /// sentence.
    pub fn key(&self) -> &str {
        match self {
            Example::Token(t) => &t.prompt,
            Example::Sentence(s) => &s.good,
        }
    }

    /// Text the model should assign high likelihood to.
    pub fn positive_text(&self) -> String {
        match self {
            Example::Token(t) => format!("{}{}", t.prompt, t.correct),
            Example::Sentence(s) => s.good.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Example::Token(t) if t.correct == t.wrong => Err(Error::Input(format!(
                "correct and wrong answers coincide for prompt {:?}",
                t.prompt
            ))),
            Example::Token(t) if t.prompt.is_empty() => Err(Error::Input("empty prompt".into())),
            Example::Sentence(s) if s.good == s.bad => Err(Error::Input(format!(
                "good and bad sentences coincide: {:?}",
                s.good
            ))),
            Example::Sentence(s) if s.good.is_empty() || s.bad.is_empty() => {
                Err(Error::Input("empty sentence".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn encode(&self, tok: &Tokenizer) -> Result<EncodedExample> {
        match self {
            Example::Token(t) => Ok(EncodedExample::Token {
                prompt: tok.encode_with_bos(&t.prompt)?,
                correct: tok.single(&t.correct)?,
                wrong: tok.single(&t.wrong)?,
            }),
            Example::Sentence(s) => Ok(EncodedExample::Sentence {
                good: tok.encode_with_bos(&s.good)?,
                bad: tok.encode_with_bos(&s.bad)?,
            }),
        }
    }
}

/// Token ids ready for the model. Prompts and sentences start with BOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncodedExample {
    Token {
        prompt: Vec<TokenId>,
        correct: TokenId,
        wrong: TokenId,
    },
    Sentence {
        good: Vec<TokenId>,
        bad: Vec<TokenId>,
    },
}

pub fn encode_all(examples: &[Example], tok: &Tokenizer) -> Result<Vec<EncodedExample>> {
    examples.iter().map(|e| e.encode(tok)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub task_name: String,
    pub mode: LossMode,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskDataset {
    /// Splits `examples` 80/10/10 in their given order.
    pub fn from_examples(task_name: &str, mode: LossMode, mut examples: Vec<Example>) -> Self {
        let n = examples.len();
        let n_train = (n as f64 * 0.8).round() as usize;
        let n_dev = (n as f64 * 0.1).round() as usize;
        let test = examples.split_off(n_train + n_dev);
        let dev = examples.split_off(n_train);
        TaskDataset {
            task_name: task_name.to_string(),
            mode,
            train: examples,
            dev,
            test,
        }
    }

    pub fn split(&self, s: Split) -> &[Example] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_examples(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// Checks modes, per-example sanity and cross-split uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in self.all_examples() {
            if e.mode() != self.mode {
                return Err(Error::Input(format!(
                    "{} example in {:?}-mode dataset {}",
                    match e.mode() {
                        LossMode::Token => "token",
                        LossMode::Sentence => "sentence",
                    },
                    self.mode,
                    self.task_name
                )));
            }
            e.validate()?;
            if !seen.insert(e.key()) {
                return Err(Error::Input(format!(
                    "duplicate example {:?} in {}",
                    e.key(),
                    self.task_name
                )));
            }
        }
        Ok(())
    }

    /// Ensures every answer is a single token and every text encodes.
    pub fn check_tokenizer(&self, tok: &Tokenizer) -> Result<()> {
        for e in self.all_examples() {
            e.encode(tok)?;
        }
        Ok(())
    }
}

/// Samples `size` distinct examples of `kind` and splits them 80/10/10.
pub fn generate_task(kind: TaskKind, size: usize, seed: u64) -> Result<TaskDataset> {
    if size < MIN_TASK_SIZE {
        return Err(Error::Config(format!(
            "task size {size} is below the minimum of {MIN_TASK_SIZE}"
        )));
    }
    let world = World::new(kind);
    let examples = sample_distinct(&world, size, seed, &HashSet::new())?;
    let ds = TaskDataset::from_examples(kind.name(), kind.mode(), examples);
    ds.validate()?;
    Ok(ds)
}

/// Examples per task in a held-out capability set.
pub const CAPABILITY_SET_SIZE: usize = 50;

/// Fresh examples of the same task drawn with a reserved seed and
/// guaranteed not to appear anywhere in `dataset`. Used to measure held-out
/// capability.
pub fn capability_set(kind: TaskKind, size: usize, dataset: &TaskDataset) -> Result<Vec<Example>> {
    let world = World::new(kind);
    let exclude: HashSet<String> = dataset
        .all_examples()
        .map(|e| e.key().to_string())
        .collect();
    sample_distinct(&world, size, CAPABILITY_SEED_SALT, &exclude)
}

fn sample_distinct(
    world: &World,
    size: usize,
    seed: u64,
    exclude: &HashSet<String>,
) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<String> = HashSet::new();
    let mut out = Vec::with_capacity(size);
    let max_attempts = 200 * size + 1000;
    for _ in 0..max_attempts {
        if out.len() == size {
            break;
        }
        let e = world.sample(&mut rng);
        if exclude.contains(e.key()) || !seen.insert(e.key().to_string()) {
            continue;
        }
        out.push(e);
    }
    if out.len() < size {
        return Err(Error::Config(format!(
            "could only draw {} distinct {} examples, {size} requested",
            out.len(),
            world.kind()
        )));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Tokenizer covering every byte any task or the general grammar can
/// produce.
pub fn default_tokenizer() -> Tokenizer {
    let mut texts = all_task_texts();
    texts.extend(GeneralGrammar::standard().alphabet_texts());
    Tokenizer::from_corpus(texts.iter().map(String::as_str))
}
