//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod objective;
pub mod primitives;

use capablate::tensor::Tensor;

/// Five-point central differences of a scalar function with respect to
/// every entry of input `which`, evaluated in f64. Fourth-order accurate, so
/// a step near 1e-3 keeps truncation and cancellation error both far below
/// the f64 tolerance.
pub fn fd_grad(
    f: &dyn Fn(&[Tensor<f64>]) -> f64,
    inputs: &[Tensor<f64>],
    which: usize,
    step: f64,
) -> Vec<f64> {
    let mut work = inputs.to_vec();
    let n = work[which].numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = work[which].data()[i];
        let mut at = |offset: f64| {
            work[which].data_mut()[i] = orig + offset;
            let v = f(&work);
            work[which].data_mut()[i] = orig;
            v
        };
        let near = at(step) - at(-step);
        let far = at(2.0 * step) - at(-2.0 * step);
        out.push((8.0 * near - far) / (12.0 * step));
    }
    out
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over paired entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn to_f64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&x| x as f64).collect()
}
