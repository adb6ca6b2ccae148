use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Real, Tensor};

/// Uniform Xavier/Glorot draw on `±sqrt(6 / (fan_in + fan_out))`.
///
/// A 2-D shape is read as `(fan_in, fan_out)`. Any other rank falls back to
/// `fan_in = fan_out = last axis`.
pub fn xavier_uniform<F: Real>(shape: &[usize], seed: u64) -> Tensor<F> {
    let bound = xavier_bound(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    let values = (0..n).map(|_| F::of(dist.sample(&mut rng))).collect();
    Tensor::new(shape.to_vec(), values).expect("shape matches draw count")
}

/// Stable per-parameter seed derived from a run seed and a parameter name
/// (FNV-1a over the name, mixed with the seed).
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [a, b] => (*a, *b),
        _ => {
            let last = *shape.last().expect("non-empty shape");
            (last, last)
        }
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
