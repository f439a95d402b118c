//! Trains the base transformer on the task mixture plus general text.
//!
//! Token-task examples are trained on their answer token only; sentences
//! and general text are trained on every next-token prediction. Each
//! sequence contributes its own mean negative log-likelihood, so short and
//! long sequences weigh the same.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, AdamW};
use crate::data::{EncodedExample, GeneralCorpus, TaskDataset};
use crate::error::{Error, Result};
use crate::eval::{perplexity, task_accuracy};
use crate::model::{ModelConfig, PackedBatch, TokenId, Tokenizer, TransformerModel};
use crate::tensor::{Graph, Scalar, Segment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub warmup_steps: usize,
    /// Share of each batch drawn from the general corpus.
    pub general_fraction: f64,
    /// Required dev accuracy on every task.
    pub mastery_threshold: f64,
    /// Dev accuracies are checked this often; training stops early once
    /// every task reaches `stop_accuracy`.
    pub eval_every: usize,
    pub stop_accuracy: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: ModelConfig::default(),
            steps: 3000,
            batch_size: 32,
            learning_rate: 3e-3,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            warmup_steps: 100,
            general_fraction: 0.3,
            mastery_threshold: 0.9,
            eval_every: 250,
            stop_accuracy: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "steps, batch_size and eval_every must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.grad_clip_norm > 0.0) {
            return Err(Error::Config(
                "learning_rate and grad_clip_norm must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.general_fraction) {
            return Err(Error::Config("general_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        let floor = 0.1;
        self.learning_rate
            * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps_run: usize,
    pub dev_accuracy: Vec<(String, f64)>,
    pub general_perplexity: f64,
    pub losses: Vec<f64>,
}

/// One training sequence with the rows whose next-token predictions count.
struct LmItem {
    tokens: Vec<TokenId>,
    /// `(row within sequence, target id)`
    targets: Vec<(usize, TokenId)>,
}

fn full_lm(tokens: Vec<TokenId>) -> LmItem {
    let targets = (0..tokens.len() - 1).map(|i| (i, tokens[i + 1])).collect();
    LmItem { tokens, targets }
}

fn lm_item(e: &EncodedExample) -> LmItem {
    match e {
        EncodedExample::Token {
            prompt, correct, ..
        } => {
            let mut tokens = prompt.clone();
            tokens.push(*correct);
            LmItem {
                targets: vec![(prompt.len() - 1, *correct)],
                tokens,
            }
        }
        EncodedExample::Sentence { good, .. } => full_lm(good.clone()),
    }
}

fn dev_accuracies<T: Scalar>(
    model: &TransformerModel<T>,
    datasets: &[TaskDataset],
) -> Result<Vec<(String, f64)>> {
    datasets
        .iter()
        .map(|d| Ok((d.task_name.clone(), task_accuracy(model, None, &d.dev)?)))
        .collect()
}

/// Trains a fresh model until every task's dev accuracy reaches the mastery
/// threshold, or fails listing the accuracies reached.
pub fn pretrain<T: Scalar>(
    config: &PretrainConfig,
    datasets: &[TaskDataset],
    corpus: &GeneralCorpus,
    tokenizer: &Tokenizer,
) -> Result<(TransformerModel<T>, PretrainReport)> {
    config.validate()?;
    if datasets.is_empty()
        || datasets
            .iter()
            .any(|d| d.train.is_empty() || d.dev.is_empty())
    {
        return Err(Error::Input(
            "pretraining needs non-empty train and dev splits".into(),
        ));
    }
    let task_items: Vec<Vec<LmItem>> = datasets
        .iter()
        .map(|d| {
            d.train
                .iter()
                .map(|e| e.encode(tokenizer).map(|e| lm_item(&e)))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let general_items: Vec<LmItem> = corpus
        .textreg
        .iter()
        .map(|t| tokenizer.encode_with_bos(t).map(full_lm))
        .collect::<Result<_>>()?;
    if general_items.is_empty() && config.general_fraction > 0.0 {
        return Err(Error::Input("general corpus is empty".into()));
    }

    let mut model = TransformerModel::<T>::init(config.model.clone(), tokenizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut losses = Vec::with_capacity(config.steps);
    let mut steps_run = 0;

    for step in 0..config.steps {
        let batch: Vec<&LmItem> = (0..config.batch_size)
            .map(|_| {
                if rng.random::<f64>() < config.general_fraction {
                    &general_items[rng.random_range(0..general_items.len())]
                } else {
                    let t = &task_items[rng.random_range(0..task_items.len())];
                    &t[rng.random_range(0..t.len())]
                }
            })
            .collect();
        let seqs: Vec<&[TokenId]> = batch.iter().map(|i| i.tokens.as_slice()).collect();
        let packed = PackedBatch::new(&seqs, model.config())?;

        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let fwd = model.forward_pass(&mut g, &vars, None, &packed)?;
        let mut rows = Vec::new();
        let mut picks = Vec::new();
        let mut segs = Vec::with_capacity(batch.len());
        for (i, item) in batch.iter().enumerate() {
            let start = packed.segments()[i].start;
            segs.push(Segment {
                start: rows.len(),
                len: item.targets.len(),
            });
            for &(r, t) in &item.targets {
                picks.push((rows.len(), t as usize));
                rows.push(start + r);
            }
        }
        let sel = g.select_rows(fwd.logits, &rows)?;
        let lp = g.log_softmax(sel)?;
        let lp = g.gather(lp, &picks)?;
        let per_seq = g.segment_mean(lp, &segs)?;
        let mean = g.mean(per_seq);
        let loss = g.scale(mean, -T::one());
        let loss_value = g.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Training(format!(
                "non-finite pretraining loss at step {step}"
            )));
        }
        g.backward(loss)?;
        let all = vars.all();
        let mut grads: Vec<Vec<T>> = all
            .iter()
            .map(|&v| g.take_grad(v).expect("trainable leaf"))
            .collect();
        drop(g);
        clip_global_norm(&mut grads, config.grad_clip_norm);
        opt.learning_rate = config.lr_at(step);
        {
            let mut params: Vec<&mut [T]> = model
                .named_params_mut()
                .into_iter()
                .map(|(_, p)| Arc::make_mut(p).data_mut())
                .collect();
            opt.step(&mut params, &grads)?;
        }
        losses.push(loss_value);
        steps_run = step + 1;

        if steps_run % config.eval_every == 0 && steps_run < config.steps {
            let accs = dev_accuracies(&model, datasets)?;
            if accs.iter().all(|(_, a)| *a >= config.stop_accuracy) {
                break;
            }
        }
    }

    let dev_accuracy = dev_accuracies(&model, datasets)?;
    let general_perplexity = if corpus.eval.is_empty() {
        f64::NAN
    } else {
        perplexity(&model, None, &corpus.eval)?
    };
    let report = PretrainReport {
        steps_run,
        dev_accuracy,
        general_perplexity,
        losses,
    };
    let failing: Vec<String> = report
        .dev_accuracy
        .iter()
        .filter(|(_, a)| *a < config.mastery_threshold)
        .map(|(n, a)| format!("{n}={a:.3}"))
        .collect();
    if !failing.is_empty() {
        let all: Vec<String> = report
            .dev_accuracy
            .iter()
            .map(|(n, a)| format!("{n}={a:.3}"))
            .collect();
        return Err(Error::Training(format!(
            "mastery threshold {} not reached after {} steps ({}); dev accuracy: {}",
            config.mastery_threshold,
            report.steps_run,
            failing.join(", "),
            all.join(", ")
        )));
    }
    Ok((model, report))
}
