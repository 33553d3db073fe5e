//! Counter-based random streams.
//!
//! Every random draw in training is keyed by `(seed, step, stream)`, so a
//! step can be replayed without carrying generator state between steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

/// Stream ids. Each consumer of randomness owns one.
pub mod stream {
    pub const PROMPTS: u64 = 1;
    pub const PRIORS: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    /// Router noise for decoder layer `l` uses `ROUTER_NOISE + l`.
    pub const ROUTER_NOISE: u64 = 16;
    pub const GRAD_CHECK: u64 = 4;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// ChaCha keyed by `seed`, positioned on the `(step, stream)` counter block.
pub fn keyed_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut s = seed;
    for chunk in key.chunks_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(splitmix(step.wrapping_mul(0x1_0000).wrapping_add(stream)));
    rng
}

/// Identifies the Gaussian noise tensor of one routing call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub step: u64,
    pub stream: u64,
}

impl NoiseKey {
    pub fn normal<T: Scalar>(&self, shape: &[usize]) -> Tensor<T> {
        let mut rng = keyed_rng(self.seed, self.step, self.stream);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z)
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("noise shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_key_same_stream() {
        let k = NoiseKey { seed: 7, step: 3, stream: 16 };
        let a: Tensor<f32> = k.normal(&[4, 5]);
        let b: Tensor<f32> = k.normal(&[4, 5]);
        assert_eq!(a, b);
        let c: Tensor<f32> = NoiseKey { step: 4, ..k }.normal(&[4, 5]);
        assert_ne!(a, c);
    }

    #[test]
    fn streams_are_independent() {
        let a: u64 = keyed_rng(1, 0, 1).random();
        let b: u64 = keyed_rng(1, 0, 2).random();
        let c: u64 = keyed_rng(2, 0, 1).random();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
