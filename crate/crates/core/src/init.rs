//! Seeded parameter initialisation.
//!
//! Each tensor draws from its own generator, keyed by the run seed and
//! the tensor's name, so a tensor's initial value does not depend on which
//! other tensors exist. Two networks that differ only in their attention
//! blocks therefore start from identical convolution weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Shape, Tensor};

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// Uniform on `[-bound, bound)`.
pub fn uniform<T: Scalar>(shape: Shape, bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::lit(rng.gen_range(-bound..bound)))
}

/// `1 / sqrt(fan_in)` bound.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// He-uniform bound `sqrt(6 / fan_in)` for layers followed by ReLU.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_depend_on_seed_and_name_only() {
        let a: Tensor<f32> = uniform([1, 1, 2, 2], 1.0, &mut param_rng(3, "enc1.conv1.w"));
        let b: Tensor<f32> = uniform([1, 1, 2, 2], 1.0, &mut param_rng(3, "enc1.conv1.w"));
        let c: Tensor<f32> = uniform([1, 1, 2, 2], 1.0, &mut param_rng(3, "enc1.conv2.w"));
        let d: Tensor<f32> = uniform([1, 1, 2, 2], 1.0, &mut param_rng(4, "enc1.conv1.w"));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }
}
