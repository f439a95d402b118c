//! Training objective for capability ablation.
//!
//! The target term is the mean squared log-probability gap between correct
//! and wrong answers (or the mean-log-probability gap between good and bad
//! sentences), so its minimum sits at indifference. Three regularizers keep
//! the adapters small and quiet on general text:
//!
//! * textreg: mean squared norm of the adapter outputs `(α/r)·B·A·h` while
//!   the model reads general text, averaged over samples, positions and
//!   every adapted site;
//! * normreg: mean squared Frobenius norm over all adapter matrices;
//! * sparsityreg: mean entrywise L1 norm over all adapter matrices.

use serde::{Deserialize, Serialize};

use crate::data::{EncodedExample, LossMode};
use crate::error::{Error, Result};
use crate::lora::{AdapterVars, LoraAdapterSet};
use crate::model::{continuation_logprobs, ModelVars, PackedBatch, TokenId, TransformerModel};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub textreg: f64,
    pub normreg: f64,
    pub sparsityreg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            textreg: 1.0,
            normreg: 1e-3,
            sparsityreg: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            textreg: 0.0,
            normreg: 0.0,
            sparsityreg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("textreg", self.textreg),
            ("normreg", self.normreg),
            ("sparsityreg", self.sparsityreg),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub target: f64,
    pub textreg: f64,
    pub normreg: f64,
    pub sparsityreg: f64,
    pub total: f64,
    pub mean_abs_gap: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.target,
            self.textreg,
            self.normreg,
            self.sparsityreg,
            self.total,
            self.mean_abs_gap,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Graph handles of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub target: Var,
    pub textreg: Var,
    pub normreg: Var,
    pub sparsityreg: Var,
    pub total: Var,
    /// Per-example gaps, `[n]`.
    pub gaps: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().as_f64();
        let gaps = g.value(self.gaps).data();
        LossBreakdown {
            target: v(self.target),
            textreg: v(self.textreg),
            normreg: v(self.normreg),
            sparsityreg: v(self.sparsityreg),
            total: v(self.total),
            mean_abs_gap: gaps.iter().map(|x| x.as_f64().abs()).sum::<f64>() / gaps.len() as f64,
        }
    }
}

fn mode_of(examples: &[EncodedExample]) -> Result<LossMode> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Input("empty target batch".into()))?;
    let mode = match first {
        EncodedExample::Token { .. } => LossMode::Token,
        EncodedExample::Sentence { .. } => LossMode::Sentence,
    };
    let consistent = examples.iter().all(|e| {
        matches!(
            (e, mode),
            (EncodedExample::Token { .. }, LossMode::Token)
                | (EncodedExample::Sentence { .. }, LossMode::Sentence)
        )
    });
    if !consistent {
        return Err(Error::Input(
            "target batch mixes token and sentence examples".into(),
        ));
    }
    Ok(mode)
}

/// `log p(y⁺|x) − log p(y⁻|x)` per example, `[n]`.
pub fn token_gaps<T: Scalar>(
    g: &mut Graph<T>,
    model: &TransformerModel<T>,
    mv: &ModelVars,
    av: Option<&AdapterVars<T>>,
    examples: &[EncodedExample],
) -> Result<Var> {
    let mut prompts = Vec::with_capacity(examples.len());
    let mut pos = Vec::with_capacity(examples.len());
    let mut neg = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        let EncodedExample::Token {
            prompt,
            correct,
            wrong,
        } = e
        else {
            return Err(Error::Input("sentence example in token mode".into()));
        };
        if correct == wrong {
            return Err(Error::Input("correct and wrong answers coincide".into()));
        }
        prompts.push(prompt.as_slice());
        pos.push((i, *correct as usize));
        neg.push((i, *wrong as usize));
    }
    let batch = PackedBatch::new(&prompts, model.config())?;
    let fwd = model.forward_pass(g, mv, av, &batch)?;
    let rows: Vec<usize> = (0..examples.len()).map(|i| batch.last_row(i)).collect();
    let last = g.select_rows(fwd.logits, &rows)?;
    let lp = g.log_softmax(last)?;
    let lp_pos = g.gather(lp, &pos)?;
    let lp_neg = g.gather(lp, &neg)?;
    g.sub(lp_pos, lp_neg)
}

/// Mean log-probability of the good sentence minus that of the bad one.
pub fn sentence_gaps<T: Scalar>(
    g: &mut Graph<T>,
    model: &TransformerModel<T>,
    mv: &ModelVars,
    av: Option<&AdapterVars<T>>,
    examples: &[EncodedExample],
) -> Result<Var> {
    let mut seqs: Vec<&[TokenId]> = Vec::with_capacity(2 * examples.len());
    for e in examples {
        let EncodedExample::Sentence { good, .. } = e else {
            return Err(Error::Input("token example in sentence mode".into()));
        };
        seqs.push(good);
    }
    for e in examples {
        if let EncodedExample::Sentence { bad, .. } = e {
            seqs.push(bad);
        }
    }
    let n = examples.len();
    let batch = PackedBatch::new(&seqs, model.config())?;
    let fwd = model.forward_pass(g, mv, av, &batch)?;
    let all: Vec<usize> = (0..2 * n).collect();
    let (lp, segs) = continuation_logprobs(g, fwd.logits, &batch, &all)?;
    let good = g.segment_mean(lp, &segs[..n])?;
    let bad = g.segment_mean(lp, &segs[n..])?;
    g.sub(good, bad)
}

pub fn gaps<T: Scalar>(
    g: &mut Graph<T>,
    model: &TransformerModel<T>,
    mv: &ModelVars,
    av: Option<&AdapterVars<T>>,
    examples: &[EncodedExample],
) -> Result<Var> {
    match mode_of(examples)? {
        LossMode::Token => token_gaps(g, model, mv, av, examples),
        LossMode::Sentence => sentence_gaps(g, model, mv, av, examples),
    }
}

/// Mean of the squared entries of a vector.
pub fn mean_square<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let sq = g.mul(x, x)?;
    Ok(g.mean(sq))
}

/// Adapter output energy on general text.
pub fn textreg_term<T: Scalar>(
    g: &mut Graph<T>,
    model: &TransformerModel<T>,
    mv: &ModelVars,
    av: &AdapterVars<T>,
    general: &[Vec<TokenId>],
) -> Result<Var> {
    if general.is_empty() {
        return Err(Error::Input("empty general-text batch".into()));
    }
    let batch = PackedBatch::new(general, model.config())?;
    let fwd = model.forward_pass(g, mv, Some(av), &batch)?;
    let n_sites: usize = fwd.adapter_outputs.iter().map(|l| l.len()).sum();
    let denom = (general.len() * n_sites) as f64;
    let mut weights = vec![T::zero(); batch.rows()];
    for seg in batch.segments() {
        let w = T::lit(1.0 / (denom * seg.len as f64));
        weights[seg.start..seg.start + seg.len].fill(w);
    }
    let mut total: Option<Var> = None;
    for delta in fwd.adapter_outputs.iter().flatten() {
        let d = delta.expect("adapters are attached");
        let term = g.weighted_row_sq(d, &weights)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(crate::tensor::Tensor::scalar(T::zero()))))
}

fn mean_over_factors<T: Scalar>(
    g: &mut Graph<T>,
    av: &AdapterVars<T>,
    f: fn(&mut Graph<T>, Var) -> Var,
) -> Result<Var> {
    let vars = av.all();
    let mut acc = g.constant(crate::tensor::Tensor::scalar(T::zero()));
    for &v in &vars {
        let t = f(g, v);
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, T::lit(1.0 / vars.len().max(1) as f64)))
}

pub fn normreg_term<T: Scalar>(g: &mut Graph<T>, av: &AdapterVars<T>) -> Result<Var> {
    mean_over_factors(g, av, Graph::sq_norm)
}

pub fn sparsityreg_term<T: Scalar>(g: &mut Graph<T>, av: &AdapterVars<T>) -> Result<Var> {
    mean_over_factors(g, av, Graph::l1_norm)
}

/// Records the complete objective on `g`.
pub fn build_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &TransformerModel<T>,
    mv: &ModelVars,
    av: &AdapterVars<T>,
    target: &[EncodedExample],
    general: &[Vec<TokenId>],
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let gaps = gaps(g, model, mv, Some(av), target)?;
    let target_loss = mean_square(g, gaps)?;
    let textreg = textreg_term(g, model, mv, av, general)?;
    let normreg = normreg_term(g, av)?;
    let sparsityreg = sparsityreg_term(g, av)?;
    let mut total = target_loss;
    for (term, w) in [
        (textreg, weights.textreg),
        (normreg, weights.normreg),
        (sparsityreg, weights.sparsityreg),
    ] {
        let scaled = g.scale(term, T::lit(w));
        total = g.add(total, scaled)?;
    }
    Ok(LossVars {
        target: target_loss,
        textreg,
        normreg,
        sparsityreg,
        total,
        gaps,
    })
}

fn with_frozen<T: Scalar, R>(
    model: &TransformerModel<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    f: impl FnOnce(&mut Graph<T>, &ModelVars, Option<&AdapterVars<T>>) -> Result<R>,
) -> Result<R> {
    let mut g = Graph::new();
    let mv = model.bind(&mut g, false);
    let av = adapters
        .map(|a| a.bind(&mut g, false, model.config()))
        .transpose()?;
    f(&mut g, &mv, av.as_ref())
}

/// Mean squared gap over a token-mode batch.
pub fn token_equalization_loss<T: Scalar>(
    model: &TransformerModel<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    batch: &[EncodedExample],
) -> Result<T> {
    if mode_of(batch)? != LossMode::Token {
        return Err(Error::Input("token loss needs token-mode examples".into()));
    }
    with_frozen(model, adapters, |g, mv, av| {
        let gaps = token_gaps(g, model, mv, av, batch)?;
        let l = mean_square(g, gaps)?;
        Ok(g.value(l).item())
    })
}

/// Mean squared sentence gap over a sentence-mode batch.
pub fn sentence_equalization_loss<T: Scalar>(
    model: &TransformerModel<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    batch: &[EncodedExample],
) -> Result<T> {
    if mode_of(batch)? != LossMode::Sentence {
        return Err(Error::Input(
            "sentence loss needs sentence-mode examples".into(),
        ));
    }
    with_frozen(model, adapters, |g, mv, av| {
        let gaps = sentence_gaps(g, model, mv, av, batch)?;
        let l = mean_square(g, gaps)?;
        Ok(g.value(l).item())
    })
}

pub fn textreg_loss<T: Scalar>(
    model: &TransformerModel<T>,
    adapters: &LoraAdapterSet<T>,
    general: &[Vec<TokenId>],
) -> Result<T> {
    with_frozen(model, Some(adapters), |g, mv, av| {
        let l = textreg_term(g, model, mv, av.expect("bound"), general)?;
        Ok(g.value(l).item())
    })
}

fn factor_mean<T: Scalar>(adapters: &LoraAdapterSet<T>, f: impl Fn(&[T]) -> f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for s in adapters.sites() {
        total += f(s.a.data()) + f(s.b.data());
        n += 2;
    }
    total / n.max(1) as f64
}

pub fn normreg_loss<T: Scalar>(adapters: &LoraAdapterSet<T>) -> f64 {
    factor_mean(adapters, |x| {
        x.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    })
}

pub fn sparsityreg_loss<T: Scalar>(adapters: &LoraAdapterSet<T>) -> f64 {
    factor_mean(adapters, |x| x.iter().map(|v| v.as_f64().abs()).sum())
}

/// Evaluates the full objective without recording gradients.
pub fn total_loss<T: Scalar>(
    model: &TransformerModel<T>,
    adapters: &LoraAdapterSet<T>,
    target: &[EncodedExample],
    general: &[Vec<TokenId>],
    weights: &LossWeights,
    mode: LossMode,
) -> Result<LossBreakdown> {
    if mode_of(target)? != mode {
        return Err(Error::Input(format!(
            "target batch is not in {mode:?} mode"
        )));
    }
    if general.len() != target.len() {
        return Err(Error::Input(format!(
            "general batch of {} does not pair with target batch of {}",
            general.len(),
            target.len()
        )));
    }
    with_frozen(model, Some(adapters), |g, mv, av| {
        let vars = build_loss(g, model, mv, av.expect("bound"), target, general, weights)?;
        Ok(vars.breakdown(g))
    })
}
