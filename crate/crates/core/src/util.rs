use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) type Rng = ChaCha8Rng;

/// Seeded generator on a dedicated stream, so that independent consumers
/// sharing one run seed never overlap.
pub(crate) fn rng_stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_prior(prior: &[f64], c: usize) -> crate::Result<()> {
    if prior.len() != c {
        return Err(crate::Error::param(format!(
            "prior has {} entries, expected {c}",
            prior.len()
        )));
    }
    if prior.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(crate::Error::param("prior entries must be finite and non-negative"));
    }
    let sum: f64 = prior.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(crate::Error::param(format!("prior sums to {sum}, not 1")));
    }
    Ok(())
}

/// Derives an independent seed from `seed` for the `k`-th consumer (SplitMix64
/// finaliser).
pub(crate) fn sub_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
