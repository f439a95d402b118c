//! JSONL persistence for datasets and the general corpus.
//!
//! Token-mode lines carry `{"prompt","correct","wrong"}`, sentence-mode lines
//! `{"good","bad"}` and corpus lines `{"text"}`. Files live under
//! `<root>/<task>/{train,dev,test}.jsonl` and
//! `<root>/general/{textreg,eval}.jsonl`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Example, GeneralCorpus, LossMode, SentencePair, Split, TaskDataset, TokenTriplet};
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone)]
pub struct DataLayout {
    pub root: PathBuf,
}

impl DataLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataLayout { root: root.into() }
    }

    pub fn split_path(&self, task: &str, split: Split) -> PathBuf {
        self.root.join(task).join(format!("{}.jsonl", split.name()))
    }

    pub fn textreg_path(&self) -> PathBuf {
        self.root.join("general").join("textreg.jsonl")
    }

    pub fn eval_path(&self) -> PathBuf {
        self.root.join("general").join("eval.jsonl")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextLine {
    text: String,
}

fn example_line(e: &Example) -> String {
    match e {
        Example::Token(t) => serde_json::to_string(t),
        Example::Sentence(s) => serde_json::to_string(s),
    }
    .expect("plain string fields serialize")
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&example_line(e));
        out.push('\n');
    }
    util::write_bytes(path, out)
}

fn parse_example(line: &str, lineno: usize, mode: Option<LossMode>) -> Result<Example> {
    let parse_err = |message: String| Error::Parse {
        line: lineno,
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err("expected a JSON object".into()))?;
    let inferred = if obj.contains_key("prompt") {
        LossMode::Token
    } else if obj.contains_key("good") {
        LossMode::Sentence
    } else {
        return Err(parse_err(
            "object has neither a \"prompt\" nor a \"good\" key".into(),
        ));
    };
    let mode = mode.unwrap_or(inferred);
    let example = match mode {
        LossMode::Token => serde_json::from_value::<TokenTriplet>(value).map(Example::Token),
        LossMode::Sentence => serde_json::from_value::<SentencePair>(value).map(Example::Sentence),
    }
    .map_err(|e| parse_err(e.to_string()))?;
    example.validate().map_err(|e| parse_err(e.to_string()))?;
    Ok(example)
}

/// Reads one example per non-blank line. With `mode` unset the mode is
/// inferred from the first line and every later line must agree.
pub fn read_jsonl(path: &Path, mode: Option<LossMode>) -> Result<Vec<Example>> {
    let text = util::read_string(path)?;
    let mut mode = mode;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e = parse_example(line, i + 1, mode)?;
        mode.get_or_insert(e.mode());
        out.push(e);
    }
    Ok(out)
}

pub fn write_dataset(layout: &DataLayout, ds: &TaskDataset) -> Result<()> {
    for s in Split::ALL {
        write_jsonl(&layout.split_path(&ds.task_name, s), ds.split(s))?;
    }
    Ok(())
}

pub fn read_dataset(layout: &DataLayout, task: &str) -> Result<TaskDataset> {
    let known = task.parse::<super::TaskKind>().ok().map(|k| k.mode());
    let train = read_jsonl(&layout.split_path(task, Split::Train), known)?;
    let mode = known
        .or_else(|| train.first().map(Example::mode))
        .ok_or_else(|| Error::Input(format!("training split of {task} is empty")))?;
    let ds = TaskDataset {
        task_name: task.to_string(),
        mode,
        train,
        dev: read_jsonl(&layout.split_path(task, Split::Dev), Some(mode))?,
        test: read_jsonl(&layout.split_path(task, Split::Test), Some(mode))?,
    };
    ds.validate()?;
    Ok(ds)
}

fn write_texts(path: &Path, texts: &[String]) -> Result<()> {
    let mut out = String::new();
    for t in texts {
        out.push_str(&serde_json::to_string(&TextLine { text: t.clone() }).expect("string"));
        out.push('\n');
    }
    util::write_bytes(path, out)
}

fn read_texts(path: &Path) -> Result<Vec<String>> {
    let text = util::read_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<TextLine>(l)
                .map(|t| t.text)
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

pub fn write_corpus(layout: &DataLayout, corpus: &GeneralCorpus) -> Result<()> {
    write_texts(&layout.textreg_path(), &corpus.textreg)?;
    write_texts(&layout.eval_path(), &corpus.eval)
}

pub fn read_corpus(layout: &DataLayout) -> Result<GeneralCorpus> {
    Ok(GeneralCorpus {
        textreg: read_texts(&layout.textreg_path())?,
        eval: read_texts(&layout.eval_path())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_general_corpus, generate_task, TaskKind};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let layout = DataLayout::new(dir.path());
        for k in TaskKind::ALL {
            let ds = generate_task(k, 60, 2).unwrap();
            write_dataset(&layout, &ds).unwrap();
            assert_eq!(read_dataset(&layout, k.name()).unwrap(), ds);
        }
        let corpus = generate_general_corpus(2000, 0).unwrap();
        write_corpus(&layout, &corpus).unwrap();
        assert_eq!(read_corpus(&layout).unwrap(), corpus);
    }

    #[test]
    fn missing_key_names_key_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(
            &p,
            "{\"prompt\":\"a\",\"correct\":\"b\",\"wrong\":\"c\"}\n\n{\"prompt\":\"a\",\"correct\":\"b\"}\n",
        )
        .unwrap();
        match read_jsonl(&p, None) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("wrong"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mixed_modes_and_garbage_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(
            &p,
            "{\"good\":\"a b\",\"bad\":\"b a\"}\n{\"prompt\":\"a\",\"correct\":\"b\",\"wrong\":\"c\"}\n",
        )
        .unwrap();
        assert!(matches!(
            read_jsonl(&p, None),
            Err(Error::Parse { line: 2, .. })
        ));
        std::fs::write(&p, "not json\n").unwrap();
        assert!(matches!(
            read_jsonl(&p, None),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read_jsonl(&dir.path().join("absent.jsonl"), None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn multibyte_answers_survive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.jsonl");
        let ex = vec![Example::Token(TokenTriplet {
            prompt: "traduire «chat» → ".into(),
            correct: "é".into(),
            wrong: "ß".into(),
        })];
        write_jsonl(&p, &ex).unwrap();
        let back = read_jsonl(&p, Some(LossMode::Token)).unwrap();
        assert_eq!(back, ex);
        let Example::Token(t) = &back[0] else {
            unreachable!()
        };
        assert_eq!(t.correct.as_bytes(), "é".as_bytes());
    }
}
