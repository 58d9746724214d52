//! Parameter initialization. Values are drawn in f64 and narrowed to the
//! model element type, so a given seed produces the same parameters at every
//! precision.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Tensor};

/// Fan-in-scaled uniform init for convolution kernels.
pub fn kaiming_uniform<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<E> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| E::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    let t = Tensor::from_vec(shape, data).expect("consistent shape");
    t.set_requires_grad(true);
    t
}

pub fn zeros_param<E: Element>(shape: &[usize]) -> Tensor<E> {
    let t = Tensor::zeros(shape);
    t.set_requires_grad(true);
    t
}
