//! AWGN channels and seeded randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Deterministic generator: identical seeds and call sequences give identical
/// outputs.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent 64-bit seed for `purpose` from a master seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Noise variance of a unit-power link at `snr_db`.
pub fn snr_db_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelParams {
    sigma2: f64,
}

impl ChannelParams {
    pub fn new(sigma2: f64) -> crate::Result<Self> {
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(crate::Error::InvalidArgument(format!(
                "noise variance must be finite and >= 0 (got {sigma2})"
            )));
        }
        Ok(ChannelParams { sigma2 })
    }

    pub fn from_snr_db(snr_db: f64) -> Self {
        ChannelParams {
            sigma2: snr_db_to_sigma2(snr_db),
        }
    }

    pub fn noiseless() -> Self {
        ChannelParams { sigma2: 0.0 }
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

/// Standard normal draws.
pub fn standard_normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `c + n` with `n` iid N(0, sigma2).
pub fn transmit(c: &[f64], params: ChannelParams, rng: &mut Rng) -> Vec<f64> {
    let sigma = params.sigma();
    c.iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(rng);
            x + sigma * z
        })
        .collect()
}
