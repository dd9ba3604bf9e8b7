//! Deterministic seed derivation.
//!
//! Every random choice in the pipeline flows from a single root seed. Subsystems
//! (data generation, weight init, dropout, simulation) derive their own streams
//! with [`subseed`], so changing one subsystem's consumption pattern never
//! perturbs another's.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; full-period mixing of a 64-bit state.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a label, used to bind seed streams to subsystem names.
fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from a root seed and a subsystem label.
pub fn subseed(root: u64, label: &str) -> u64 {
    splitmix64(root ^ fnv1a(label))
}

/// Derive a child seed indexed by an integer (per-sample, per-step, ...).
pub fn subseed_n(root: u64, label: &str, n: u64) -> u64 {
    splitmix64(subseed(root, label).wrapping_add(n.wrapping_mul(0x2545_f491_4f6c_dd1d)))
}

/// Seeded ChaCha8 stream; the only RNG used anywhere in the crate.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Counter-based uniform in [0, 1): a pure hash of (seed, index), so values can
/// be regenerated without storing state. Used for dropout masks and per-pixel
/// noise.
pub fn counter_uniform(seed: u64, index: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(index.wrapping_add(0x9e37_79b9)));
    // 53 high bits -> [0,1) double
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Counter-based standard normal via Box-Muller over two counter uniforms.
pub fn counter_normal(seed: u64, index: u64) -> f64 {
    let u1 = counter_uniform(seed, index.wrapping_mul(2));
    let u2 = counter_uniform(seed, index.wrapping_mul(2).wrapping_add(1));
    let r = (-2.0 * (1.0 - u1).ln()).sqrt();
    r * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subseeds_differ_by_label() {
        assert_ne!(subseed(7, "data"), subseed(7, "init"));
        assert_ne!(subseed(7, "data"), subseed(8, "data"));
    }

    #[test]
    fn counter_uniform_is_deterministic_and_in_range() {
        for i in 0..1000 {
            let v = counter_uniform(42, i);
            assert!((0.0..1.0).contains(&v));
            assert_eq!(v, counter_uniform(42, i));
        }
    }

    #[test]
    fn counter_normal_has_sane_moments() {
        let n = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let v = counter_normal(3, i);
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
