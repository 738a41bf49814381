//! Seed derivation. Every random draw in the crate flows from one base seed
//! through labelled sub-streams so runs are exactly reproducible.

use rand_chacha::rand_core::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates derived seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed, a stream label, and an index.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut h = base;
    for b in label.as_bytes() {
        h = mix(h ^ (*b as u64));
    }
    mix(h ^ index)
}

/// A deterministic generator for the given (base, label, index) stream.
pub fn stream_rng(base: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label, index))
}

/// Standard normal via Box-Muller; deterministic given the generator state.
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_label_and_index() {
        let a = derive_seed(7, "alpha", 0);
        let b = derive_seed(7, "alpha", 1);
        let c = derive_seed(7, "beta", 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, "alpha", 0));
    }
}
