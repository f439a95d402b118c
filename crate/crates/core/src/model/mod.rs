//! Decoder-only transformer with Llama-style blocks.
//!
//! Each layer is `h += W_O · attn(W_Q x, W_K x, W_V x)` on an RMS-normalized
//! residual stream, followed by a SiLU-gated MLP `h += W_down (silu(W_gate x)
//! ⊙ W_up x)`. Positions are learned embeddings and the unembedding matrix is
//! separate from the token embedding. The seven projection matrices of each
//! layer are the sites that adapters attach to.

mod tokenizer;

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{AdapterVars, LoraAdapterSet};
use crate::tensor::{Graph, Scalar, Segment, Tensor, Var};

pub use tokenizer::{TokenId, Tokenizer, BOS, EOS, PAD};

pub type Param<T> = Arc<Tensor<T>>;

pub const RMS_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;
/// Sequences scored per graph by the batched convenience methods.
const SCORE_CHUNK: usize = 64;

/// One of the seven projection matrices of a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Site {
    /// Canonical site order used everywhere: flattening, reports, ties.
    pub const ALL: [Site; 7] = [
        Site::Q,
        Site::K,
        Site::V,
        Site::O,
        Site::Gate,
        Site::Up,
        Site::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
            Site::O => "o",
            Site::Gate => "gate",
            Site::Up => "up",
            Site::Down => "down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<Site> {
        Site::ALL.into_iter().find(|s| s.name() == name)
    }

    /// `(d_out, d_in)` of the weight matrix at this site.
    pub fn dims(self, config: &ModelConfig) -> (usize, usize) {
        let (d, ff) = (config.d_model, config.d_ff);
        match self {
            Site::Q | Site::K | Site::V | Site::O => (d, d),
            Site::Gate | Site::Up => (ff, d),
            Site::Down => (d, ff),
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 128,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn n_components(&self) -> usize {
        self.n_layers * Site::ALL.len()
    }
}

#[derive(Clone)]
pub struct LayerParams<T> {
    pub attn_norm: Param<T>,
    pub mlp_norm: Param<T>,
    /// Indexed by [`Site::index`].
    pub sites: [Param<T>; 7],
}

#[derive(Clone)]
pub struct ModelParams<T> {
    pub tok_embed: Param<T>,
    pub pos_embed: Param<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Param<T>,
    pub unembed: Param<T>,
}

/// Graph handles for every model parameter, produced by
/// [`TransformerModel::bind`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub tok_embed: Var,
    pub pos_embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub unembed: Var,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub mlp_norm: Var,
    pub sites: [Var; 7],
}

impl ModelVars {
    /// Every handle in [`TransformerModel::named_params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_embed, self.pos_embed];
        for l in &self.layers {
            out.push(l.attn_norm);
            out.push(l.mlp_norm);
            out.extend_from_slice(&l.sites);
        }
        out.push(self.final_norm);
        out.push(self.unembed);
        out
    }
}

/// Several token sequences packed row-wise into one matrix.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    ids: Vec<usize>,
    positions: Vec<usize>,
    segments: Vec<Segment>,
}

impl PackedBatch {
    pub fn new<S: AsRef<[TokenId]>>(seqs: &[S], config: &ModelConfig) -> Result<Self> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let seq = seq.as_ref();
            if seq.is_empty() {
                return Err(Error::Input("empty token sequence".into()));
            }
            if seq.len() > config.max_seq_len {
                return Err(Error::Input(format!(
                    "sequence of {} tokens exceeds max_seq_len {}",
                    seq.len(),
                    config.max_seq_len
                )));
            }
            if let Some(bad) = seq.iter().find(|&&t| t as usize >= config.vocab_size) {
                return Err(Error::Input(format!(
                    "token id {bad} out of range for vocabulary of {}",
                    config.vocab_size
                )));
            }
            segments.push(Segment {
                start: ids.len(),
                len: seq.len(),
            });
            ids.extend(seq.iter().map(|&t| t as usize));
            positions.extend(0..seq.len());
        }
        Ok(PackedBatch {
            ids,
            positions,
            segments,
        })
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn last_row(&self, seq: usize) -> usize {
        let s = self.segments[seq];
        s.start + s.len - 1
    }

    pub fn token(&self, row: usize) -> usize {
        self.ids[row]
    }
}

/// Handles recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[rows × vocab]`
    pub logits: Var,
    /// Residual stream after the embeddings and after each layer.
    pub residuals: Vec<Var>,
    /// Input activation seen by each site, per layer.
    pub site_inputs: Vec<[Var; 7]>,
    /// `(α/r)·B·A·x` at each site when adapters are attached.
    pub adapter_outputs: Vec<[Option<Var>; 7]>,
}

#[derive(Clone)]
pub struct TransformerModel<T> {
    config: ModelConfig,
    tokenizer: Tokenizer,
    params: ModelParams<T>,
}

fn ones<T: Scalar>(n: usize) -> Param<T> {
    Arc::new(Tensor::ones(&[n]))
}

impl<T: Scalar> TransformerModel<T> {
    /// Randomly initialized model. The configured vocabulary size is taken
    /// from the tokenizer.
    pub fn init(mut config: ModelConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.vocab_size = tokenizer.vocab_size();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, v) = (config.d_model, config.vocab_size);
        let out_std = INIT_STD / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let sites = Site::ALL.map(|s| {
                let (o, i) = s.dims(&config);
                let std = if matches!(s, Site::O | Site::Down) {
                    out_std
                } else {
                    INIT_STD
                };
                Arc::new(Tensor::randn(&[o, i], std, &mut rng))
            });
            layers.push(LayerParams {
                attn_norm: ones(d),
                mlp_norm: ones(d),
                sites,
            });
        }
        let params = ModelParams {
            tok_embed: Arc::new(Tensor::randn(&[v, d], INIT_STD, &mut rng)),
            pos_embed: Arc::new(Tensor::randn(&[config.max_seq_len, d], INIT_STD, &mut rng)),
            layers,
            final_norm: ones(d),
            unembed: Arc::new(Tensor::randn(&[v, d], INIT_STD, &mut rng)),
        };
        Ok(TransformerModel {
            config,
            tokenizer,
            params,
        })
    }

    /// Assembles a model from named tensors, checking every shape.
    pub fn from_named(
        config: ModelConfig,
        tokenizer: Tokenizer,
        mut named: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::Corruption(format!(
                "tokenizer has {} symbols but config says {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let template = Self::init(config.clone(), tokenizer.clone())?;
        let expected = template.named_params();
        if named.len() != expected.len() {
            return Err(Error::Corruption(format!(
                "expected {} tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, t), (ename, et)) in named.iter().zip(&expected) {
            if name != ename || t.shape() != et.shape() {
                return Err(Error::Corruption(format!(
                    "tensor {name} {:?} does not match expected {ename} {:?}",
                    t.shape(),
                    et.shape()
                )));
            }
        }
        let mut model = template;
        for ((_, slot), (_, t)) in model.named_params_mut().into_iter().zip(named.drain(..)) {
            *slot = Arc::new(t);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    /// Parameters in canonical order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let p = &self.params;
        let mut out = vec![
            ("tok_embed".to_string(), &p.tok_embed),
            ("pos_embed".to_string(), &p.pos_embed),
        ];
        for (i, l) in p.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            for s in Site::ALL {
                out.push((format!("layers.{i}.{}", s.name()), &l.sites[s.index()]));
            }
        }
        out.push(("final_norm".to_string(), &p.final_norm));
        out.push(("unembed".to_string(), &p.unembed));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let p = &mut self.params;
        let mut out = vec![
            ("tok_embed".to_string(), &mut p.tok_embed),
            ("pos_embed".to_string(), &mut p.pos_embed),
        ];
        for (i, l) in p.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            out.push((format!("layers.{i}.mlp_norm"), &mut l.mlp_norm));
            for (s, w) in Site::ALL.iter().zip(l.sites.iter_mut()) {
                out.push((format!("layers.{i}.{}", s.name()), w));
            }
        }
        out.push(("final_norm".to_string(), &mut p.final_norm));
        out.push(("unembed".to_string(), &mut p.unembed));
        out
    }

    pub fn site_weight(&self, layer: usize, site: Site) -> &Tensor<T> {
        &self.params.layers[layer].sites[site.index()]
    }

    pub fn set_site_weight(&mut self, layer: usize, site: Site, w: Tensor<T>) -> Result<()> {
        let slot = &mut self.params.layers[layer].sites[site.index()];
        if slot.shape() != w.shape() {
            return Err(Error::Dimension {
                op: "set_site_weight",
                lhs: slot.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        *slot = Arc::new(w);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        let c = |p: &Param<T>| Arc::new(p.cast::<U>());
        let p = &self.params;
        TransformerModel {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            params: ModelParams {
                tok_embed: c(&p.tok_embed),
                pos_embed: c(&p.pos_embed),
                layers: p
                    .layers
                    .iter()
                    .map(|l| LayerParams {
                        attn_norm: c(&l.attn_norm),
                        mlp_norm: c(&l.mlp_norm),
                        sites: l.sites.each_ref().map(c),
                    })
                    .collect(),
                final_norm: c(&p.final_norm),
                unembed: c(&p.unembed),
            },
        }
    }

    /// SHA-256 over the little-endian f32 bytes of every parameter in
    /// canonical order, as a hex string.
    pub fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.named_params() {
            h.update(name.as_bytes());
            for &x in p.data() {
                h.update((x.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn n_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Records every parameter on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelVars {
        let p = &self.params;
        let mut leaf = |t: &Param<T>| g.leaf(Arc::clone(t), trainable);
        let tok_embed = leaf(&p.tok_embed);
        let pos_embed = leaf(&p.pos_embed);
        let layers = p
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: leaf(&l.attn_norm),
                mlp_norm: leaf(&l.mlp_norm),
                sites: l.sites.each_ref().map(&mut leaf),
            })
            .collect();
        ModelVars {
            tok_embed,
            pos_embed,
            layers,
            final_norm: leaf(&p.final_norm),
            unembed: leaf(&p.unembed),
        }
    }

    /// Runs the network over a packed batch on `g`.
    pub fn forward_pass(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        adapters: Option<&AdapterVars<T>>,
        batch: &PackedBatch,
    ) -> Result<ForwardPass> {
        let eps = T::lit(RMS_EPS);
        let tok = g.embedding(vars.tok_embed, &batch.ids)?;
        let pos = g.embedding(vars.pos_embed, &batch.positions)?;
        let mut h = g.add(tok, pos)?;
        let mut residuals = vec![h];
        let mut site_inputs = Vec::with_capacity(vars.layers.len());
        let mut adapter_outputs = Vec::with_capacity(vars.layers.len());

        for (l, lv) in vars.layers.iter().enumerate() {
            let mut deltas: [Option<Var>; 7] = [None; 7];
            let mut project = |g: &mut Graph<T>, x: Var, s: Site| -> Result<Var> {
                let base = g.linear(x, lv.sites[s.index()])?;
                let Some(av) = adapters else { return Ok(base) };
                let (a, b) = av.site(l, s);
                let ax = g.linear(x, a)?;
                let bax = g.linear(ax, b)?;
                let delta = g.scale(bax, av.scale);
                deltas[s.index()] = Some(delta);
                g.add(base, delta)
            };

            let x = g.rms_norm(h, lv.attn_norm, eps)?;
            let q = project(g, x, Site::Q)?;
            let k = project(g, x, Site::K)?;
            let v = project(g, x, Site::V)?;
            let attn = g.attention(q, k, v, self.config.n_heads, batch.segments())?;
            let o = project(g, attn, Site::O)?;
            h = g.add(h, o)?;

            let x2 = g.rms_norm(h, lv.mlp_norm, eps)?;
            let gate = project(g, x2, Site::Gate)?;
            let up = project(g, x2, Site::Up)?;
            let act = g.silu(gate);
            let act = g.mul(act, up)?;
            let down = project(g, act, Site::Down)?;
            h = g.add(h, down)?;

            residuals.push(h);
            site_inputs.push([x, x, x, attn, x2, x2, act]);
            adapter_outputs.push(deltas);
        }

        let logits = self.unembed(g, vars, h)?;
        Ok(ForwardPass {
            logits,
            residuals,
            site_inputs,
            adapter_outputs,
        })
    }

    /// Final norm followed by the unembedding; also used to read
    /// intermediate residual states.
    pub fn unembed(&self, g: &mut Graph<T>, vars: &ModelVars, h: Var) -> Result<Var> {
        let hf = g.rms_norm(h, vars.final_norm, T::lit(RMS_EPS))?;
        g.linear(hf, vars.unembed)
    }

    fn run<R>(
        &self,
        adapters: Option<&LoraAdapterSet<T>>,
        batch: &PackedBatch,
        read: impl FnOnce(&mut Graph<T>, &ForwardPass) -> Result<R>,
    ) -> Result<R> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let av = adapters
            .map(|a| a.bind(&mut g, false, &self.config))
            .transpose()?;
        let fwd = self.forward_pass(&mut g, &vars, av.as_ref(), batch)?;
        read(&mut g, &fwd)
    }

    /// Logits for a batch of equal-length sequences, `[batch × seq × vocab]`.
    pub fn forward<S: AsRef<[TokenId]>>(
        &self,
        adapters: Option<&LoraAdapterSet<T>>,
        tokens: &[S],
    ) -> Result<Tensor<T>> {
        let len = tokens.first().map_or(0, |s| s.as_ref().len());
        if tokens.iter().any(|s| s.as_ref().len() != len) {
            return Err(Error::Input("forward needs equal-length sequences".into()));
        }
        let batch = PackedBatch::new(tokens, &self.config)?;
        let v = self.config.vocab_size;
        self.run(adapters, &batch, |g, fwd| {
            Tensor::new(
                vec![tokens.len(), len, v],
                g.value(fwd.logits).data().to_vec(),
            )
        })
    }

    /// `log p(target | prompt)` read from the final position.
    pub fn token_logprob(
        &self,
        adapters: Option<&LoraAdapterSet<T>>,
        prompt: &[TokenId],
        target: TokenId,
    ) -> Result<T> {
        Ok(self.token_logprobs(adapters, &[(prompt, target)])?[0])
    }

    pub fn token_logprobs(
        &self,
        adapters: Option<&LoraAdapterSet<T>>,
        items: &[(&[TokenId], TokenId)],
    ) -> Result<Vec<T>> {
        let targets: Vec<[TokenId; 1]> = items.iter().map(|&(_, t)| [t]).collect();
        let sets: Vec<(&[TokenId], &[TokenId])> = items
            .iter()
            .zip(&targets)
            .map(|(&(p, _), t)| (p, t.as_slice()))
            .collect();
        Ok(self
            .final_logprobs(adapters, &sets)?
            .into_iter()
            .map(|v| v[0])
            .collect())
    }

    /// For each `(prompt, targets)` pair, the final-position log-probability
    /// of every listed target. Chunks are scored in parallel.
    pub fn final_logprobs(
        &self,
        adapters: Option<&LoraAdapterSet<T>>,
        items: &[(&[TokenId], &[TokenId])],
    ) -> Result<Vec<Vec<T>>> {
        if items.iter().any(|(p, _)| p.is_empty()) {
            return Err(Error::Input("empty prompt".into()));
        }
        let chunks: Vec<Vec<Vec<T>>> = items
            .par_chunks(SCORE_CHUNK)
            .map(|chunk| {
                let seqs: Vec<&[TokenId]> = chunk.iter().map(|(p, _)| *p).collect();
                let batch = PackedBatch::new(&seqs, &self.config)?;
                self.run(adapters, &batch, |g, fwd| {
                    let rows: Vec<usize> = (0..chunk.len()).map(|i| batch.last_row(i)).collect();
                    let sel = g.select_rows(fwd.logits, &rows)?;
                    let lp = g.log_softmax(sel)?;
                    let lp = g.value(lp);
                    chunk
                        .iter()
                        .enumerate()
                        .map(|(i, (_, ts))| {
                            let row = lp.row(i);
                            ts.iter()
                                .map(|&t| {
                                    row.get(t as usize).copied().ok_or_else(|| {
                                        Error::Input(format!("target id {t} out of range"))
                                    })
                                })
                                .collect()
                        })
                        .collect()
                })
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Mean per-token log-probability of everything after the first token.
    pub fn sentence_logprob(
        &self,
        adapters: Option<&LoraAdapterSet<T>>,
        sentence: &[TokenId],
    ) -> Result<T> {
        Ok(self.sentence_logprobs(adapters, &[sentence])?[0])
    }

    pub fn sentence_logprobs(
        &self,
        adapters: Option<&LoraAdapterSet<T>>,
        sentences: &[&[TokenId]],
    ) -> Result<Vec<T>> {
        let chunks: Vec<Vec<T>> = sentences
            .par_chunks(SCORE_CHUNK)
            .map(|chunk| {
                let batch = PackedBatch::new(chunk, &self.config)?;
                let all: Vec<usize> = (0..chunk.len()).collect();
                self.run(adapters, &batch, |g, fwd| {
                    sequence_mean_logprobs(g, fwd.logits, &batch, &all)
                        .map(|v| g.value(v).data().to_vec())
                })
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

/// `log p(token | sequence)` at the last row of each picked sequence.
pub fn final_token_logprobs<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    batch: &PackedBatch,
    picks: &[(usize, TokenId)],
) -> Result<Var> {
    let rows: Vec<usize> = picks.iter().map(|&(s, _)| batch.last_row(s)).collect();
    let sel = g.select_rows(logits, &rows)?;
    let lp = g.log_softmax(sel)?;
    let idx: Vec<(usize, usize)> = picks
        .iter()
        .enumerate()
        .map(|(i, &(_, t))| (i, t as usize))
        .collect();
    g.gather(lp, &idx)
}

/// Per-token log-probabilities of each listed sequence's own continuation,
/// returned as a flat vector together with one segment per sequence.
pub fn continuation_logprobs<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    batch: &PackedBatch,
    seqs: &[usize],
) -> Result<(Var, Vec<Segment>)> {
    let mut rows = Vec::new();
    let mut next = Vec::new();
    let mut segs = Vec::with_capacity(seqs.len());
    for &s in seqs {
        let seg = batch.segments[s];
        if seg.len < 2 {
            return Err(Error::Input(
                "sentence needs at least one predicted token after BOS".into(),
            ));
        }
        segs.push(Segment {
            start: rows.len(),
            len: seg.len - 1,
        });
        for r in seg.start..seg.start + seg.len - 1 {
            rows.push(r);
            next.push(batch.ids[r + 1]);
        }
    }
    let sel = g.select_rows(logits, &rows)?;
    let lp = g.log_softmax(sel)?;
    let idx: Vec<(usize, usize)> = next.into_iter().enumerate().collect();
    Ok((g.gather(lp, &idx)?, segs))
}

/// Mean continuation log-probability of each listed sequence.
pub fn sequence_mean_logprobs<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    batch: &PackedBatch,
    seqs: &[usize],
) -> Result<Var> {
    let (lp, segs) = continuation_logprobs(g, logits, batch, seqs)?;
    g.segment_mean(lp, &segs)
}
