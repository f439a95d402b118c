//! Comparison methods: rank weight matrices by importance with a
//! conventional attribution technique, then perturb the top-ranked ones
//! with scaled Gaussian noise.
//!
//! Four scorers are provided: difference of mean activations, logit lens,
//! integrated gradients over the weights, and linear probing. All of them
//! score the same components the adapters attach to, so a top-k budget
//! means the same thing for every method.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::layer_importance;
use crate::data::{encode_all, EncodedExample, Example};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSuite};
use crate::lora::{ComponentId, LoraAdapterSet};
use crate::model::{ForwardPass, ModelVars, PackedBatch, Site, TokenId, TransformerModel};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DiffMean,
    LogitLens,
    IntegratedGradients,
    Probing,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::DiffMean,
        Method::LogitLens,
        Method::IntegratedGradients,
        Method::Probing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DiffMean => "diffmean",
            Method::LogitLens => "logit-lens",
            Method::IntegratedGradients => "integrated-gradients",
            Method::Probing => "probing",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline method {s:?}")))
    }
}

/// One non-negative score per component, in [`ComponentId::all`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub method: String,
    pub scores: Vec<f64>,
}

impl ImportanceScores {
    pub fn score(&self, c: ComponentId) -> f64 {
        self.scores[c.flat_index()]
    }

    /// The `k` highest-scoring components. Ties keep layer then site order.
    pub fn top_k(&self, n_layers: usize, k: usize) -> Vec<ComponentId> {
        let mut all: Vec<(ComponentId, f64)> = ComponentId::all(n_layers)
            .into_iter()
            .map(|c| (c, self.score(c)))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1));
        all.into_iter().take(k).map(|(c, _)| c).collect()
    }

    fn from_layers(method: Method, layer_scores: &[f64]) -> Self {
        ImportanceScores {
            method: method.name().into(),
            scores: layer_scores
                .iter()
                .flat_map(|&s| std::iter::repeat_n(s, Site::ALL.len()))
                .collect(),
        }
    }
}

/// Sequences whose final position carries the contrast: answer appended
/// to the prompt for token tasks, whole sentences otherwise. Returns
/// `(positive, negative)` sequence lists.
fn contrast_sequences(examples: &[EncodedExample]) -> (Vec<Vec<TokenId>>, Vec<Vec<TokenId>>) {
    examples
        .iter()
        .map(|e| match e {
            EncodedExample::Token {
                prompt,
                correct,
                wrong,
            } => {
                let mut p = prompt.clone();
                p.push(*correct);
                let mut n = prompt.clone();
                n.push(*wrong);
                (p, n)
            }
            EncodedExample::Sentence { good, bad } => (good.clone(), bad.clone()),
        })
        .unzip()
}

fn encoded<T: Scalar>(
    model: &TransformerModel<T>,
    examples: &[Example],
) -> Result<Vec<EncodedExample>> {
    if examples.is_empty() {
        return Err(Error::Input("no examples to score".into()));
    }
    encode_all(examples, model.tokenizer())
}

fn with_forward<T: Scalar, R>(
    model: &TransformerModel<T>,
    seqs: &[Vec<TokenId>],
    read: impl FnOnce(&mut Graph<T>, &ModelVars, &ForwardPass, &PackedBatch) -> Result<R>,
) -> Result<R> {
    let batch = PackedBatch::new(seqs, model.config())?;
    let mut g = Graph::new();
    let mv = model.bind(&mut g, false);
    let fwd = model.forward_pass(&mut g, &mv, None, &batch)?;
    read(&mut g, &mv, &fwd, &batch)
}

fn final_rows_mean<T: Scalar>(g: &Graph<T>, x: Var, batch: &PackedBatch) -> Vec<f64> {
    let t = g.value(x);
    let d = t.shape()[1];
    let mut acc = vec![0.0; d];
    for s in 0..batch.len() {
        for (a, v) in acc.iter_mut().zip(t.row(batch.last_row(s))) {
            *a += v.as_f64();
        }
    }
    acc.iter_mut().for_each(|a| *a /= batch.len() as f64);
    acc
}

/// Mean input activation of every component at the final position, over a
/// set of sequences.
fn mean_site_inputs<T: Scalar>(
    model: &TransformerModel<T>,
    seqs: &[Vec<TokenId>],
) -> Result<Vec<Vec<f64>>> {
    with_forward(model, seqs, |g, _, fwd, batch| {
        Ok(fwd
            .site_inputs
            .iter()
            .flat_map(|layer| layer.iter().map(|&x| final_rows_mean(g, x, batch)))
            .collect())
    })
}

/// Per component, the L2 norm of the difference between mean final-position
/// input activations on correct and on wrong continuations.
pub fn score_diffmean<T: Scalar>(
    model: &TransformerModel<T>,
    examples: &[Example],
) -> Result<ImportanceScores> {
    let enc = encoded(model, examples)?;
    let (pos, neg) = contrast_sequences(&enc);
    let mp = mean_site_inputs(model, &pos)?;
    let mn = mean_site_inputs(model, &neg)?;
    let scores = mp
        .iter()
        .zip(&mn)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(ImportanceScores {
        method: Method::DiffMean.name().into(),
        scores,
    })
}

/// Where to read the logit gap for each example: `(row, token, weight)`
/// triples whose weighted sum, divided by the example count, is the mean
/// gap. Token examples compare the two answers at the prompt's last row;
/// sentence examples compare mean next-token logits of the two sentences.
struct GapLayout {
    seqs: Vec<Vec<TokenId>>,
    picks: Vec<(usize, usize)>,
    weights: Vec<f64>,
    n_examples: usize,
}

fn gap_layout<T: Scalar>(
    model: &TransformerModel<T>,
    examples: &[EncodedExample],
) -> Result<GapLayout> {
    let mut seqs = Vec::new();
    for e in examples {
        match e {
            EncodedExample::Token { prompt, .. } => seqs.push(prompt.clone()),
            EncodedExample::Sentence { good, bad } => {
                seqs.push(good.clone());
                seqs.push(bad.clone());
            }
        }
    }
    let batch = PackedBatch::new(&seqs, model.config())?;
    let (mut picks, mut weights) = (Vec::new(), Vec::new());
    let mut s = 0;
    for e in examples {
        match e {
            EncodedExample::Token { correct, wrong, .. } => {
                let r = batch.last_row(s);
                picks.extend([(r, *correct as usize), (r, *wrong as usize)]);
                weights.extend([1.0, -1.0]);
                s += 1;
            }
            EncodedExample::Sentence { .. } => {
                for sign in [1.0, -1.0] {
                    let seg = batch.segments()[s];
                    if seg.len < 2 {
                        return Err(Error::Input("sentence needs a predicted token".into()));
                    }
                    let w = sign / (seg.len - 1) as f64;
                    for r in seg.start..seg.start + seg.len - 1 {
                        picks.push((r, batch.token(r + 1)));
                        weights.push(w);
                    }
                    s += 1;
                }
            }
        }
    }
    Ok(GapLayout {
        seqs,
        picks,
        weights,
        n_examples: examples.len(),
    })
}

/// Mean logit gap read from `logits` as a scalar on the graph.
fn logit_gap<T: Scalar>(g: &mut Graph<T>, logits: Var, layout: &GapLayout) -> Result<Var> {
    let picked = g.gather(logits, &layout.picks)?;
    let n = layout.n_examples as f64;
    let w: Vec<T> = layout.weights.iter().map(|&w| T::lit(w / n)).collect();
    let w = g.constant(Tensor::new(vec![w.len()], w)?);
    let prod = g.mul(picked, w)?;
    Ok(g.sum(prod))
}

/// Mean logit gap when the residual stream after each layer (index 0 is
/// the embeddings) is read through the final norm and unembedding.
pub fn logit_lens_gaps<T: Scalar>(
    model: &TransformerModel<T>,
    examples: &[Example],
) -> Result<Vec<f64>> {
    let enc = encoded(model, examples)?;
    let layout = gap_layout(model, &enc)?;
    with_forward(model, &layout.seqs, |g, mv, fwd, _| {
        fwd.residuals
            .iter()
            .map(|&h| {
                let logits = model.unembed(g, mv, h)?;
                let gap = logit_gap(g, logits, &layout)?;
                Ok(g.value(gap).item().as_f64())
            })
            .collect()
    })
}

/// Each layer's score is the magnitude of the change in the read-out gap
/// across that layer; all sites of the layer share it.
pub fn score_logit_lens<T: Scalar>(
    model: &TransformerModel<T>,
    examples: &[Example],
) -> Result<ImportanceScores> {
    let gaps = logit_lens_gaps(model, examples)?;
    let deltas: Vec<f64> = gaps.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    Ok(ImportanceScores::from_layers(Method::LogitLens, &deltas))
}

/// Signed attributions from integrated gradients, with the endpoint gaps
/// that the completeness property relates them to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgAttribution {
    pub attributions: Vec<f64>,
    /// Mean logit gap of the unmodified model.
    pub gap_full: f64,
    /// Mean logit gap with every component matrix set to zero.
    pub gap_zero: f64,
}

impl IgAttribution {
    /// `|Σ attributions − (gap_full − gap_zero)| / |gap_full − gap_zero|`.
    pub fn completeness_error(&self) -> f64 {
        let total: f64 = self.attributions.iter().sum();
        let diff = self.gap_full - self.gap_zero;
        (total - diff).abs() / diff.abs().max(f64::MIN_POSITIVE)
    }
}

fn scaled_sites<T: Scalar>(model: &TransformerModel<T>, alpha: f64) -> TransformerModel<T> {
    let mut m = model.clone();
    for layer in &mut m.params_mut().layers {
        for w in &mut layer.sites {
            *w = Arc::new(w.scaled(T::lit(alpha)));
        }
    }
    m
}

/// Gap and its gradient with respect to every component matrix.
fn gap_and_site_grads<T: Scalar>(
    model: &TransformerModel<T>,
    layout: &GapLayout,
) -> Result<(f64, Vec<Vec<T>>)> {
    let batch = PackedBatch::new(&layout.seqs, model.config())?;
    let mut g = Graph::new();
    let mv = model.bind(&mut g, true);
    let fwd = model.forward_pass(&mut g, &mv, None, &batch)?;
    let gap = logit_gap(&mut g, fwd.logits, layout)?;
    let value = g.value(gap).item().as_f64();
    g.backward(gap)?;
    let grads = mv
        .layers
        .iter()
        .flat_map(|l| l.sites)
        .map(|v| g.take_grad(v).expect("site weights are trainable"))
        .collect();
    Ok((value, grads))
}

/// Integrated gradients along the straight path that scales every component
/// matrix jointly from zero to its trained value, with a midpoint Riemann
/// sum of `steps` terms.
pub fn integrated_gradients<T: Scalar>(
    model: &TransformerModel<T>,
    examples: &[Example],
    steps: usize,
) -> Result<IgAttribution> {
    if steps < 8 {
        return Err(Error::Config(format!(
            "integrated gradients needs at least 8 steps, got {steps}"
        )));
    }
    let enc = encoded(model, examples)?;
    let layout = gap_layout(model, &enc)?;
    let base: Vec<&Tensor<T>> = model
        .params()
        .layers
        .iter()
        .flat_map(|l| l.sites.iter().map(|w| &**w))
        .collect();
    let mut attributions = vec![0.0; base.len()];
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        let (_, grads) = gap_and_site_grads(&scaled_sites(model, alpha), &layout)?;
        for ((a, g), w) in attributions.iter_mut().zip(&grads).zip(&base) {
            *a += g
                .iter()
                .zip(w.data())
                .map(|(gi, wi)| gi.as_f64() * wi.as_f64())
                .sum::<f64>()
                / steps as f64;
        }
    }
    let (gap_full, _) = gap_and_site_grads(model, &layout)?;
    let (gap_zero, _) = gap_and_site_grads(&scaled_sites(model, 0.0), &layout)?;
    Ok(IgAttribution {
        attributions,
        gap_full,
        gap_zero,
    })
}

pub fn score_integrated_gradients<T: Scalar>(
    model: &TransformerModel<T>,
    examples: &[Example],
    steps: usize,
) -> Result<ImportanceScores> {
    let ig = integrated_gradients(model, examples, steps)?;
    Ok(ImportanceScores {
        method: Method::IntegratedGradients.name().into(),
        scores: ig.attributions.iter().map(|a| a.abs()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Share of example pairs used for probe training; the rest score it.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 300,
            learning_rate: 0.5,
            l2: 1e-3,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Logistic regression by full-batch gradient descent on standardized
/// features; returns accuracy on the evaluation rows.
pub fn probe_accuracy(
    train: &[(Vec<f64>, bool)],
    eval: &[(Vec<f64>, bool)],
    config: &ProbeConfig,
) -> Result<f64> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Input(
            "probe needs training and evaluation rows".into(),
        ));
    }
    if train.iter().all(|r| r.1) || train.iter().all(|r| !r.1) {
        return Err(Error::Input(
            "probe training rows contain a single class".into(),
        ));
    }
    let d = train[0].0.len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| train.iter().map(|r| r.0[j]).sum::<f64>() / n)
        .collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = train
                .iter()
                .map(|r| (r.0[j] - mean[j]).powi(2))
                .sum::<f64>()
                / n;
            v.sqrt().max(1e-8)
        })
        .collect();
    let norm = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&mean)
            .zip(&std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|r| norm(&r.0)).collect();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..config.iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, (_, y)) in xs.iter().zip(train) {
            let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - f64::from(u8::from(*y));
            gw.iter_mut().zip(x).for_each(|(g, xi)| *g += err * xi / n);
            gb += err / n;
        }
        w.iter_mut()
            .zip(&gw)
            .for_each(|(wi, g)| *wi -= config.learning_rate * (g + config.l2 * *wi));
        b -= config.learning_rate * gb;
    }
    let correct = eval
        .iter()
        .filter(|(x, y)| {
            let z = b + norm(x).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (z > 0.0) == *y
        })
        .count();
    Ok(correct as f64 / eval.len() as f64)
}

/// Per layer, a linear probe on final-position residual states separating
/// correct from wrong continuations; the score is held-out accuracy above
/// chance, clamped at zero.
pub fn score_probing<T: Scalar>(
    model: &TransformerModel<T>,
    examples: &[Example],
    config: &ProbeConfig,
) -> Result<ImportanceScores> {
    if examples.len() < 40 {
        return Err(Error::Input(format!(
            "probing needs at least 40 examples, got {}",
            examples.len()
        )));
    }
    let enc = encoded(model, examples)?;
    let (pos, neg) = contrast_sequences(&enc);
    let states = |seqs: &[Vec<TokenId>]| -> Result<Vec<Vec<Vec<f64>>>> {
        with_forward(model, seqs, |g, _, fwd, batch| {
            Ok(fwd.residuals[1..]
                .iter()
                .map(|&h| {
                    let t = g.value(h);
                    (0..batch.len())
                        .map(|s| {
                            t.row(batch.last_row(s))
                                .iter()
                                .map(|v| v.as_f64())
                                .collect()
                        })
                        .collect()
                })
                .collect())
        })
    };
    let (sp, sn) = (states(&pos)?, states(&neg)?);
    let mut order: Vec<usize> = (0..enc.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_train = ((enc.len() as f64) * config.train_fraction).round() as usize;
    let (train_idx, eval_idx) = order.split_at(n_train.clamp(1, enc.len() - 1));
    let layer_scores = sp
        .iter()
        .zip(&sn)
        .map(|(p, n)| {
            let rows = |idx: &[usize]| -> Vec<(Vec<f64>, bool)> {
                idx.iter()
                    .flat_map(|&i| [(p[i].clone(), true), (n[i].clone(), false)])
                    .collect()
            };
            Ok((probe_accuracy(&rows(train_idx), &rows(eval_idx), config)? - 0.5).max(0.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ImportanceScores::from_layers(
        Method::Probing,
        &layer_scores,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub components: Vec<ComponentId>,
    /// Score of each selected component over the largest selected score.
    pub multipliers: Vec<f64>,
    pub epsilon: f64,
    pub seed: u64,
}

impl CorruptionPlan {
    pub fn new(
        scores: &ImportanceScores,
        n_layers: usize,
        k: usize,
        epsilon: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "noise level {epsilon} must be finite and non-negative"
            )));
        }
        let total = n_layers * Site::ALL.len();
        if k > total {
            return Err(Error::Config(format!(
                "top-{k} exceeds the {total} components"
            )));
        }
        let components = scores.top_k(n_layers, k);
        let max = components
            .iter()
            .map(|&c| scores.score(c))
            .fold(0.0, f64::max);
        let multipliers = components
            .iter()
            .map(|&c| {
                if max > 0.0 {
                    scores.score(c) / max
                } else {
                    0.0
                }
            })
            .collect();
        Ok(CorruptionPlan {
            components,
            multipliers,
            epsilon,
            seed,
        })
    }
}

/// A copy of `model` whose planned components receive
/// `ε · multiplier · std(W) · N(0, 1)` noise. The input model is untouched.
pub fn corrupt<T: Scalar>(
    model: &TransformerModel<T>,
    plan: &CorruptionPlan,
) -> Result<TransformerModel<T>> {
    let mut out = model.clone();
    if plan.epsilon == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    for (&c, &m) in plan.components.iter().zip(&plan.multipliers) {
        let w = model.site_weight(c.layer, c.site);
        let s = plan.epsilon * m * w.std().as_f64();
        let data = w
            .data()
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(v.as_f64() + s * z)
            })
            .collect();
        out.set_site_weight(c.layer, c.site, Tensor::new(w.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub top_k: usize,
    pub epsilons: Vec<f64>,
    pub noise_seed: u64,
    pub ig_steps: usize,
    /// Examples used for importance scoring, taken from the front of the
    /// scoring split.
    pub max_scoring_examples: usize,
    pub probe: ProbeConfig,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            top_k: 10,
            epsilons: vec![0.1, 0.2, 0.5, 1.0, 2.0],
            noise_seed: 0,
            ig_steps: 64,
            max_scoring_examples: 64,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub accuracy_drop: f64,
    pub perplexity: f64,
    pub capability: f64,
    pub product: f64,
    pub epsilon: Option<f64>,
    pub error: Option<String>,
}

impl CompareRow {
    fn failed(method: &str, e: &Error) -> Self {
        CompareRow {
            method: method.into(),
            accuracy_drop: f64::NAN,
            perplexity: f64::NAN,
            capability: f64::NAN,
            product: f64::NAN,
            epsilon: None,
            error: Some(e.to_string()),
        }
    }
}

pub const BASE_ROW: &str = "base";
pub const ADAPTER_ROW: &str = "lora-ablation";

pub fn score<T: Scalar>(
    method: Method,
    model: &TransformerModel<T>,
    examples: &[Example],
    config: &CompareConfig,
) -> Result<ImportanceScores> {
    match method {
        Method::DiffMean => score_diffmean(model, examples),
        Method::LogitLens => score_logit_lens(model, examples),
        Method::IntegratedGradients => score_integrated_gradients(model, examples, config.ig_steps),
        Method::Probing => score_probing(model, examples, &config.probe),
    }
}

fn row<T: Scalar>(
    method: &str,
    model: &TransformerModel<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    suite: &EvalSuite<'_>,
    epsilon: Option<f64>,
) -> Result<CompareRow> {
    let r = evaluate(model, adapters, suite)?;
    Ok(CompareRow {
        method: method.into(),
        accuracy_drop: r.accuracy_drop,
        perplexity: r.perplexity,
        capability: r.overall_capability,
        product: r.accuracy_drop * r.overall_capability,
        epsilon,
        error: None,
    })
}

/// Picks the noise level with the best dev product (smallest level on ties)
/// and reports that level on the test suite.
fn noise_row<T: Scalar>(
    method: Method,
    model: &TransformerModel<T>,
    scoring: &[Example],
    dev: &EvalSuite<'_>,
    test: &EvalSuite<'_>,
    config: &CompareConfig,
) -> Result<CompareRow> {
    let scores = score(method, model, scoring, config)?;
    let n_layers = model.config().n_layers;
    let mut levels = config.epsilons.clone();
    levels.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for &eps in &levels {
        let plan = CorruptionPlan::new(&scores, n_layers, config.top_k, eps, config.noise_seed)?;
        let noisy = corrupt(model, &plan)?;
        let r = row(method.name(), &noisy, None, dev, Some(eps))?;
        if best.is_none_or(|(p, _)| r.product > p) {
            best = Some((r.product, eps));
        }
    }
    let (_, eps) = best.ok_or_else(|| Error::Config("empty noise-level grid".into()))?;
    let plan = CorruptionPlan::new(&scores, n_layers, config.top_k, eps, config.noise_seed)?;
    row(
        method.name(),
        &corrupt(model, &plan)?,
        None,
        test,
        Some(eps),
    )
}

/// Builds the comparison table for one target task: the untouched model,
/// the trained adapters restricted to their `top_k` components, and every
/// requested noise baseline tuned on `dev`. Failures become marked rows.
pub fn compare<T: Scalar>(
    model: &TransformerModel<T>,
    adapters: &LoraAdapterSet<T>,
    scoring: &[Example],
    dev: &EvalSuite<'_>,
    test: &EvalSuite<'_>,
    methods: &[Method],
    config: &CompareConfig,
) -> Result<Vec<CompareRow>> {
    let scoring = &scoring[..scoring.len().min(config.max_scoring_examples)];
    let mut rows = vec![row(BASE_ROW, model, None, test, None)?];
    let keep: Vec<ComponentId> = layer_importance(adapters)
        .ranked()
        .into_iter()
        .take(config.top_k)
        .map(|(c, _)| c)
        .collect();
    let budgeted = adapters.restricted_to(&keep);
    rows.push(
        row(ADAPTER_ROW, model, Some(&budgeted), test, None)
            .unwrap_or_else(|e| CompareRow::failed(ADAPTER_ROW, &e)),
    );
    for &m in methods {
        rows.push(
            noise_row(m, model, scoring, dev, test, config)
                .unwrap_or_else(|e| CompareRow::failed(m.name(), &e)),
        );
    }
    Ok(rows)
}

pub const COMPARE_HEADER: [&str; 7] = ["method", "accd", "ppl", "cap", "product", "eps", "error"];

pub fn compare_csv(rows: &[CompareRow]) -> Result<Vec<u8>> {
    let err = |e: csv::Error| Error::Contract(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COMPARE_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            format!("{:.6}", r.accuracy_drop),
            format!("{:.6}", r.perplexity),
            format!("{:.6}", r.capability),
            format!("{:.6}", r.product),
            r.epsilon.map(|e| e.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Contract(format!("csv: {e}")))
}
