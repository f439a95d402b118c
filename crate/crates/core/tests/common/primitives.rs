//! Finite-difference checks of every tape primitive, returned as error
//! measurements so callers choose how to report them.

use capablate::tensor::{Graph, Scalar, Segment, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::objective::{F32_TOL, F64_TOL};
use super::{fd_grad, max_rel_err};

pub type Builder<T> = fn(&mut Graph<T>, &[Var]) -> Var;

/// Contracts a tensor with fixed, irregular weights so every output entry
/// reaches the scalar with a distinct coefficient.
fn probe<T: Scalar>(g: &mut Graph<T>, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<T> = (0..n)
        .map(|i| T::lit(((i as f64) * 0.7 + 0.3).sin()))
        .collect();
    let w = g.constant(Tensor::new(shape, w).unwrap());
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

fn eval_f64(build: Builder<f64>, xs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out).item()
}

fn analytic<T: Scalar>(build: Builder<T>, xs: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.cast::<T>())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    vars.iter()
        .zip(xs)
        .map(|(&v, x)| match g.grad(v) {
            Some(gr) => gr.iter().map(|z| z.as_f64()).collect(),
            None => vec![0.0; x.numel()],
        })
        .collect()
}

/// Worst relative gradient error of one primitive input at both precisions.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub input: usize,
    pub e64: f64,
    pub e32: f64,
}

impl Check {
    pub fn passes(&self) -> bool {
        self.e64 < F64_TOL.0 && self.e32 < F32_TOL.0
    }
}

pub fn run(
    name: &'static str,
    xs: Vec<Tensor<f64>>,
    b64: Builder<f64>,
    b32: Builder<f32>,
) -> Vec<Check> {
    let f = |inp: &[Tensor<f64>]| eval_f64(b64, inp);
    let a64 = analytic(b64, &xs);
    let a32 = analytic(b32, &xs);
    (0..xs.len())
        .map(|which| {
            let num = fd_grad(&f, &xs, which, 1e-3);
            Check {
                name,
                input: which,
                e64: max_rel_err(&a64[which], &num, F64_TOL.1),
                e32: max_rel_err(&a32[which], &num, F32_TOL.1),
            }
        })
        .collect()
}

macro_rules! gradcheck {
    ($out:ident, $name:expr, $inputs:expr, |$g:ident, $x:ident| $body:expr) => {{
        fn build<T: Scalar>($g: &mut Graph<T>, $x: &[Var]) -> Var {
            $body
        }
        $out.extend(run($name, $inputs, build::<f64>, build::<f32>));
    }};
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let t = randn(shape, rng);
    let d = t.data().iter().map(|x| x.abs() + 0.5).collect();
    Tensor::new(shape.to_vec(), d).unwrap()
}

/// Entries bounded away from zero so |x| is differentiable at the probe.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let t = randn(shape, rng);
    let d = t
        .data()
        .iter()
        .map(|&x| {
            if x.abs() < 0.1 {
                x.signum() * 0.1 + x
            } else {
                x
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), d).unwrap()
}

pub fn elementwise_primitives(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng));
    gradcheck!(out, "add", vec![a.clone(), b.clone()], |g, x| {
        let y = g.add(x[0], x[1]).unwrap();
        probe(g, y)
    });
    gradcheck!(out, "sub", vec![a.clone(), b.clone()], |g, x| {
        let y = g.sub(x[0], x[1]).unwrap();
        probe(g, y)
    });
    gradcheck!(out, "mul", vec![a.clone(), b.clone()], |g, x| {
        let y = g.mul(x[0], x[1]).unwrap();
        probe(g, y)
    });
    gradcheck!(out, "scale", vec![a.clone()], |g, x| {
        let y = g.scale(x[0], T::lit(-1.7));
        probe(g, y)
    });
    gradcheck!(out, "silu", vec![a.clone()], |g, x| {
        let y = g.silu(x[0]);
        probe(g, y)
    });
    gradcheck!(out, "rsqrt", vec![positive(&[3, 4], &mut rng)], |g, x| {
        let y = g.rsqrt(x[0]);
        probe(g, y)
    });
    out
}

pub fn matrix_primitives(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10 + 100 * seed);
    gradcheck!(
        out,
        "matmul",
        vec![randn(&[4, 3], &mut rng), randn(&[3, 2], &mut rng)],
        |g, x| {
            let y = g.matmul(x[0], x[1]).unwrap();
            g.sum(y)
        }
    );
    gradcheck!(
        out,
        "linear",
        vec![randn(&[5, 3], &mut rng), randn(&[4, 3], &mut rng)],
        |g, x| {
            let y = g.linear(x[0], x[1]).unwrap();
            probe(g, y)
        }
    );
    gradcheck!(out, "transpose", vec![randn(&[2, 5], &mut rng)], |g, x| {
        let y = g.transpose(x[0]).unwrap();
        probe(g, y)
    });
    gradcheck!(out, "reshape", vec![randn(&[2, 6], &mut rng)], |g, x| {
        let y = g.reshape(x[0], &[3, 4]).unwrap();
        probe(g, y)
    });
    out
}

pub fn reductions(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(20 + 100 * seed);
    let a = randn(&[3, 5], &mut rng);
    gradcheck!(out, "sum", vec![a.clone()], |g, x| g.sum(x[0]));
    gradcheck!(out, "mean", vec![a.clone()], |g, x| g.mean(x[0]));
    gradcheck!(out, "sq_norm", vec![a.clone()], |g, x| g.sq_norm(x[0]));
    gradcheck!(
        out,
        "l1",
        vec![away_from_zero(&[3, 5], &mut rng)],
        |g, x| g.l1_norm(x[0])
    );
    gradcheck!(out, "sum_last", vec![a.clone()], |g, x| {
        let y = g.sum_last(x[0]).unwrap();
        probe(g, y)
    });
    gradcheck!(out, "segment_mean", vec![randn(&[9], &mut rng)], |g, x| {
        let segs = [
            Segment { start: 0, len: 4 },
            Segment { start: 4, len: 1 },
            Segment { start: 5, len: 4 },
        ];
        let y = g.segment_mean(x[0], &segs).unwrap();
        probe(g, y)
    });
    gradcheck!(out, "weighted_row_sq", vec![a.clone()], |g, x| {
        let w = [T::lit(0.5), T::zero(), T::lit(2.0)];
        g.weighted_row_sq(x[0], &w).unwrap()
    });
    out
}

pub fn softmaxes_and_indexing(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(30 + 100 * seed);
    gradcheck!(
        out,
        "log_softmax",
        vec![randn(&[3, 6], &mut rng)],
        |g, x| {
            let y = g.log_softmax(x[0]).unwrap();
            probe(g, y)
        }
    );
    gradcheck!(
        out,
        "causal_softmax",
        vec![randn(&[4, 4], &mut rng)],
        |g, x| {
            let y = g.causal_softmax(x[0]).unwrap();
            probe(g, y)
        }
    );
    gradcheck!(out, "embedding", vec![randn(&[5, 3], &mut rng)], |g, x| {
        let y = g.embedding(x[0], &[4, 0, 4, 2]).unwrap();
        probe(g, y)
    });
    gradcheck!(
        out,
        "select_rows",
        vec![randn(&[5, 3], &mut rng)],
        |g, x| {
            let y = g.select_rows(x[0], &[1, 1, 3]).unwrap();
            probe(g, y)
        }
    );
    gradcheck!(out, "gather", vec![randn(&[4, 3], &mut rng)], |g, x| {
        let y = g.gather(x[0], &[(0, 2), (3, 1), (0, 2)]).unwrap();
        probe(g, y)
    });
    out
}

pub fn fused_transformer_primitives(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(40 + 100 * seed);
    let (q, k, v) = (
        randn(&[7, 4], &mut rng),
        randn(&[7, 4], &mut rng),
        randn(&[7, 4], &mut rng),
    );
    gradcheck!(out, "attention", vec![q, k, v], |g, x| {
        let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
        let y = g.attention(x[0], x[1], x[2], 2, &segs).unwrap();
        probe(g, y)
    });
    let gain = Tensor::new(vec![4], vec![1.0, 0.5, -0.7, 1.3]).unwrap();
    gradcheck!(
        out,
        "rms_norm",
        vec![randn(&[3, 4], &mut rng), gain],
        |g, x| {
            let y = g.rms_norm(x[0], x[1], T::lit(1e-6)).unwrap();
            probe(g, y)
        }
    );
    out
}

/// Every primitive group at one seed.
pub fn all(seed: u64) -> Vec<Check> {
    [
        elementwise_primitives,
        matrix_primitives,
        reductions,
        softmaxes_and_indexing,
        fused_transformer_primitives,
    ]
    .iter()
    .flat_map(|group| group(seed))
    .collect()
}
