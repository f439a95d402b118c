//! Random full-objective configurations for gradient checks.

use std::sync::Arc;

use capablate::data::{EncodedExample, LossMode};
use capablate::lora::LoraAdapterSet;
use capablate::model::{ModelConfig, Tokenizer, TransformerModel, BOS};
use capablate::objective::{build_loss, total_loss, LossWeights};
use capablate::tensor::{Graph, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradient tolerances: relative error and its denominator floor, for f64
/// and f32 tapes.
pub const F64_TOL: (f64, f64) = (1e-5, 1e-6);
pub const F32_TOL: (f64, f64) = (1e-2, 1e-3);

pub struct Case {
    pub model: TransformerModel<f64>,
    pub adapters: LoraAdapterSet<f64>,
    pub target: Vec<EncodedExample>,
    pub general: Vec<Vec<u32>>,
    pub mode: LossMode,
    pub weights: LossWeights,
}

fn random_seq(rng: &mut ChaCha8Rng, vocab: u32, len: std::ops::Range<usize>) -> Vec<u32> {
    let len = rng.random_range(len);
    let mut s = vec![BOS];
    s.extend((1..len).map(|_| rng.random_range(3..vocab)));
    s
}

/// A random toy model with random adapters, target batch and weights.
/// Even seeds use the token loss, odd seeds the sentence loss.
pub fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tok = Tokenizer::from_corpus(["abcdef"]);
    let heads = [1, 2][rng.random_range(0..2)];
    let cfg = ModelConfig {
        d_model: 4 * rng.random_range(1..3),
        n_layers: rng.random_range(1..3),
        n_heads: heads,
        d_ff: rng.random_range(3..7),
        max_seq_len: 8,
        seed,
        ..ModelConfig::default()
    };
    let mut model = TransformerModel::<f64>::init(cfg, tok).unwrap();
    for (_, p) in model.named_params_mut() {
        let shape = p.shape().to_vec();
        let mut t = Tensor::randn(&shape, 0.4, &mut rng);
        if shape.len() == 1 {
            t.data_mut().iter_mut().for_each(|x| *x += 1.0);
        }
        *p = Arc::new(t);
    }
    let rank = rng.random_range(1..3);
    let init = LoraAdapterSet::<f64>::init(model.config(), rank, 2.0, seed).unwrap();
    // Factors are kept away from zero so the L1 term is differentiable at
    // every probed point.
    let flat: Vec<f64> = (0..init.n_params())
        .map(|_| {
            let m = rng.random_range(0.05..0.4);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    let adapters = init.unflatten(&flat).unwrap();
    let vocab = model.config().vocab_size as u32;
    let n = rng.random_range(1..4);
    let mode = if seed % 2 == 0 {
        LossMode::Token
    } else {
        LossMode::Sentence
    };
    let target = (0..n)
        .map(|_| match mode {
            LossMode::Token => {
                let correct = rng.random_range(3..vocab);
                let wrong = 3 + (correct - 3 + rng.random_range(1..vocab - 3)) % (vocab - 3);
                EncodedExample::Token {
                    prompt: random_seq(&mut rng, vocab, 1..5),
                    correct,
                    wrong,
                }
            }
            LossMode::Sentence => EncodedExample::Sentence {
                good: random_seq(&mut rng, vocab, 2..6),
                bad: random_seq(&mut rng, vocab, 2..6),
            },
        })
        .collect();
    let general = (0..n).map(|_| random_seq(&mut rng, vocab, 2..7)).collect();
    Case {
        model,
        adapters,
        target,
        general,
        mode,
        weights: LossWeights {
            textreg: rng.random_range(0.1..2.0),
            normreg: rng.random_range(0.01..0.5),
            sparsityreg: rng.random_range(0.01..0.5),
        },
    }
}

/// Adapter gradient of the total objective from the tape, computed in `T`.
pub fn analytic<T: Scalar>(c: &Case) -> Vec<f64> {
    let model = c.model.cast::<T>();
    let adapters = c.adapters.cast::<T>();
    let mut g = Graph::new();
    let mv = model.bind(&mut g, false);
    let av = adapters.bind(&mut g, true, model.config()).unwrap();
    let vars = build_loss(&mut g, &model, &mv, &av, &c.target, &c.general, &c.weights).unwrap();
    g.backward(vars.total).unwrap();
    av.all()
        .into_iter()
        .flat_map(|v| g.take_grad(v).unwrap())
        .map(|x| x.as_f64())
        .collect()
}

/// Five-point central differences of the total objective in f64. The
/// fourth-order stencil keeps both truncation and cancellation error far
/// below the f64 tolerance for losses of order 10.
pub fn numeric(c: &Case) -> Vec<f64> {
    let base = c.adapters.flatten();
    let loss = |flat: &[f64]| {
        let a = c.adapters.unflatten(flat).unwrap();
        total_loss(&c.model, &a, &c.target, &c.general, &c.weights, c.mode)
            .unwrap()
            .total
    };
    let h = 1e-3;
    let mut work = base.clone();
    let mut at = |i: usize, offset: f64| {
        work[i] = base[i] + offset;
        let v = loss(&work);
        work[i] = base[i];
        v
    };
    (0..base.len())
        .map(|i| {
            let near = at(i, h) - at(i, -h);
            let far = at(i, 2.0 * h) - at(i, -2.0 * h);
            (8.0 * near - far) / (12.0 * h)
        })
        .collect()
}
