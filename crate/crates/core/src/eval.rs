//! Accuracy, perplexity and held-out capability metrics.
//!
//! Accuracy is preference accuracy: an example counts as correct when the
//! model scores the correct answer (or good sentence) strictly above the
//! wrong one, so ties count as incorrect. Perplexity uses the natural
//! exponent.

use serde::{Deserialize, Serialize};

use crate::data::{encode_all, EncodedExample, Example};
use crate::error::{Error, Result};
use crate::lora::LoraAdapterSet;
use crate::model::{TokenId, TransformerModel};
use crate::tensor::Scalar;

/// Log-space scores `(correct, wrong)` per example: answer log-probabilities
/// in token mode, mean sentence log-probabilities in sentence mode.
pub fn pair_scores<T: Scalar>(
    model: &TransformerModel<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    examples: &[EncodedExample],
) -> Result<Vec<(f64, f64)>> {
    let mut token_items = Vec::new();
    let mut token_targets = Vec::new();
    let mut sentences: Vec<&[TokenId]> = Vec::new();
    for e in examples {
        match e {
            EncodedExample::Token {
                prompt,
                correct,
                wrong,
            } => {
                token_items.push(prompt.as_slice());
                token_targets.push([*correct, *wrong]);
            }
            EncodedExample::Sentence { good, bad } => {
                sentences.push(good);
                sentences.push(bad);
            }
        }
    }
    let items: Vec<(&[TokenId], &[TokenId])> = token_items
        .iter()
        .zip(&token_targets)
        .map(|(p, t)| (*p, t.as_slice()))
        .collect();
    let tok = model.final_logprobs(adapters, &items)?;
    let sent = model.sentence_logprobs(adapters, &sentences)?;
    let (mut ti, mut si) = (0, 0);
    let out = examples
        .iter()
        .map(|e| match e {
            EncodedExample::Token { .. } => {
                ti += 1;
                (tok[ti - 1][0].as_f64(), tok[ti - 1][1].as_f64())
            }
            EncodedExample::Sentence { .. } => {
                si += 2;
                (sent[si - 2].as_f64(), sent[si - 1].as_f64())
            }
        })
        .collect();
    Ok(out)
}

/// Fraction of pairs whose first score is strictly larger.
pub fn accuracy_from_scores(scores: &[(f64, f64)]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|(p, n)| p > n).count() as f64 / scores.len() as f64
}

pub fn task_accuracy<T: Scalar>(
    model: &TransformerModel<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    examples: &[Example],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("accuracy of an empty split".into()));
    }
    let enc = encode_all(examples, model.tokenizer())?;
    Ok(accuracy_from_scores(&pair_scores(model, adapters, &enc)?))
}

/// `exp(total NLL / predicted tokens)` over BOS-prefixed texts.
pub fn perplexity<T: Scalar>(
    model: &TransformerModel<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    texts: &[String],
) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Input("perplexity of an empty corpus".into()));
    }
    let tok = model.tokenizer();
    let seqs: Vec<Vec<TokenId>> = texts
        .iter()
        .map(|t| tok.encode_with_bos(t))
        .collect::<Result<_>>()?;
    let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
    let means = model.sentence_logprobs(adapters, &refs)?;
    let mut nll = 0.0;
    let mut count = 0usize;
    for (m, s) in means.iter().zip(&seqs) {
        let n = s.len() - 1;
        nll -= m.as_f64() * n as f64;
        count += n;
    }
    Ok((nll / count as f64).exp())
}

/// A non-target task whose accuracy feeds the capability score.
#[derive(Debug, Clone, Copy)]
pub struct HeldOutTask<'a> {
    pub name: &'a str,
    pub examples: &'a [Example],
}

/// Unweighted mean accuracy over `held_out`, which must not contain
/// `target`.
pub fn overall_capability<T: Scalar>(
    model: &TransformerModel<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    held_out: &[HeldOutTask<'_>],
    target: &str,
) -> Result<f64> {
    Ok(capability_breakdown(model, adapters, held_out, target)?.0)
}

/// Capability score together with each held-out task's accuracy.
pub fn capability_breakdown<T: Scalar>(
    model: &TransformerModel<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    held_out: &[HeldOutTask<'_>],
    target: &str,
) -> Result<(f64, Vec<f64>)> {
    if held_out.is_empty() {
        return Err(Error::Input(
            "no held-out tasks for the capability score".into(),
        ));
    }
    if held_out.iter().any(|h| h.name == target) {
        return Err(Error::Contract(format!(
            "target task {target} included in its own capability score"
        )));
    }
    let accs = held_out
        .iter()
        .map(|h| task_accuracy(model, adapters, h.examples))
        .collect::<Result<Vec<_>>>()?;
    Ok((accs.iter().sum::<f64>() / accs.len() as f64, accs))
}

/// Probability-space gaps `p_correct − p_wrong`. In sentence mode the
/// probabilities are per-token geometric means.
pub fn probability_gaps<T: Scalar>(
    model: &TransformerModel<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    examples: &[EncodedExample],
) -> Result<Vec<f64>> {
    Ok(pair_scores(model, adapters, examples)?
        .into_iter()
        .map(|(p, n)| p.exp() - n.exp())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub example: String,
    pub base_gap: f64,
    pub ablated_gap: f64,
}

pub fn gap_report<T: Scalar>(
    model: &TransformerModel<T>,
    adapters: &LoraAdapterSet<T>,
    examples: &[Example],
) -> Result<Vec<GapRow>> {
    let enc = encode_all(examples, model.tokenizer())?;
    let base = probability_gaps(model, None, &enc)?;
    let ablated = probability_gaps(model, Some(adapters), &enc)?;
    Ok(examples
        .iter()
        .zip(base.into_iter().zip(ablated))
        .map(|(e, (b, a))| GapRow {
            example: e.key().to_string(),
            base_gap: b,
            ablated_gap: a,
        })
        .collect())
}

pub fn mean_abs(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().map(|x| x.abs()).sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task_name: String,
    pub accuracy: f64,
    pub accuracy_drop: f64,
    pub perplexity: f64,
    pub overall_capability: f64,
    pub per_example_gaps: Vec<f64>,
}

impl MetricReport {
    pub const CSV_HEADER: [&'static str; 5] = ["task", "acc", "accd", "ppl", "cap"];

    pub fn csv_record(&self) -> [String; 5] {
        [
            self.task_name.clone(),
            format!("{:.6}", self.accuracy),
            format!("{:.6}", self.accuracy_drop),
            format!("{:.6}", self.perplexity),
            format!("{:.6}", self.overall_capability),
        ]
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "task": self.task_name,
            "acc": self.accuracy,
            "accd": self.accuracy_drop,
            "ppl": self.perplexity,
            "cap": self.overall_capability,
            "per_example_gaps": self.per_example_gaps,
        })
    }
}

/// Writes reports as CSV with the fixed column order.
pub fn write_reports_csv(path: &std::path::Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MetricReport::CSV_HEADER)
        .and_then(|_| {
            reports
                .iter()
                .try_for_each(|r| w.write_record(r.csv_record()))
        })
        .map_err(|e| Error::Contract(format!("csv: {e}")))?;
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Contract(format!("csv: {e}")))?;
    crate::util::write_bytes(path, bytes)
}

/// Everything needed to score one model variant against one target task.
#[derive(Debug, Clone, Copy)]
pub struct EvalSuite<'a> {
    pub target_name: &'a str,
    pub target: &'a [Example],
    pub base_accuracy: f64,
    pub held_out: &'a [HeldOutTask<'a>],
    pub corpus: &'a [String],
}

pub fn evaluate<T: Scalar>(
    model: &TransformerModel<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    suite: &EvalSuite<'_>,
) -> Result<MetricReport> {
    let enc = encode_all(suite.target, model.tokenizer())?;
    let scores = pair_scores(model, adapters, &enc)?;
    let accuracy = accuracy_from_scores(&scores);
    Ok(MetricReport {
        task_name: suite.target_name.to_string(),
        accuracy,
        accuracy_drop: suite.base_accuracy - accuracy,
        perplexity: perplexity(model, adapters, suite.corpus)?,
        overall_capability: overall_capability(model, adapters, suite.held_out, suite.target_name)?,
        per_example_gaps: scores.iter().map(|(p, n)| p.exp() - n.exp()).collect(),
    })
}
