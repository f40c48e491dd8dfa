//! Shared fixtures for the benchmarks.

use alignlab_core::rng::{stream, Stream};
use alignlab_core::Tensor;
use rand_distr::{Distribution, StandardNormal};

/// Standard-normal tensor drawn from a fixed stream.
pub fn normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(Stream::ParamInit, &[seed]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
