//! Deterministic random-number streams.
//!
//! Every source of randomness in the crate is a ChaCha stream derived from the
//! configuration seed, a stream name, and an index. Stages of the pipeline
//! (city generation, shadowing draws, network init, exploration, PSO, ...)
//! each own a named stream, so adding draws to one stage never perturbs the
//! sequences seen by another and full runs are bit-reproducible.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; standard 64-bit mixer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the ChaCha stream identified by `(seed, name, index)`.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut h = mix(seed);
    for chunk in name.as_bytes().chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        h = mix(h ^ u64::from_le_bytes(word));
    }
    h = mix(h ^ (name.len() as u64));
    h = mix(h ^ index);
    let mut key = [0u8; 32];
    for (i, word) in key.chunks_mut(8).enumerate() {
        word.copy_from_slice(&mix(h ^ (i as u64)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// One standard-normal draw (Box-Muller; consumes two uniforms per call).
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One N(mean, sd^2) draw.
pub fn normal<R: Rng>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    mean + sd * standard_normal(rng)
}

/// One Rayleigh(scale) draw via inverse CDF.
pub fn rayleigh<R: Rng>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = rng.gen(); // [0, 1); 1 - u in (0, 1]
    scale * (-2.0 * (1.0 - u).ln()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn substreams_are_reproducible() {
        let mut a = substream(7, "city", 0);
        let mut b = substream(7, "city", 0);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_differ_by_name_and_index() {
        let mut base = substream(7, "city", 0);
        let mut other_name = substream(7, "nodes", 0);
        let mut other_index = substream(7, "city", 1);
        let mut other_seed = substream(8, "city", 0);
        let x = base.next_u64();
        assert_ne!(x, other_name.next_u64());
        assert_ne!(x, other_index.next_u64());
        assert_ne!(x, other_seed.next_u64());
    }

    #[test]
    fn normal_moments_match() {
        let mut rng = substream(1, "test-normal", 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| normal(&mut rng, 3.0, 2.0)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 3.0).abs() < 0.03, "mean {mean}");
        assert!((var.sqrt() - 2.0).abs() < 0.03, "sd {}", var.sqrt());
    }

    #[test]
    fn rayleigh_moments_match() {
        let mut rng = substream(1, "test-rayleigh", 0);
        let scale = 18.0;
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| rayleigh(&mut rng, scale)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let expected = scale * (std::f64::consts::PI / 2.0).sqrt();
        assert!(
            (mean - expected).abs() / expected < 0.01,
            "mean {mean} vs {expected}"
        );
        assert!(draws.iter().all(|&x| x >= 0.0));
    }
}
