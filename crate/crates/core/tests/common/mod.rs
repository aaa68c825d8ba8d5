#![allow(dead_code)]

use gaitmeta::autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Relative error with an absolute floor so that near-zero gradients are
/// compared on an absolute scale of `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite differences of `f` at `x` for every element.
pub fn central_diff(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let base = x.to_vec();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fp = f(&Tensor::new(x.shape(), plus).unwrap());
            let fm = f(&Tensor::new(x.shape(), minus).unwrap());
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(auto: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(auto.len(), numeric.len());
    auto.iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}
