//! Deterministic per-entity RNG streams.
//!
//! Every random draw in a run is keyed by `(master seed, stream id)` where
//! the stream id names the entity and round that consumes it. Two streams
//! with distinct ids never share state, so client-parallel execution is
//! schedule-independent: results depend only on the ids, not on which worker
//! produced them.

use super::ParamVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What kind of entity a stream belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamKind {
    /// Synthetic population generation.
    Population,
    /// Frozen backbone weights.
    Backbone,
    /// Base trainable parameters (adapter init, head).
    BaseModel,
    /// Server-side per-round client sampling.
    RoundSample,
    /// Client-local training (batch order).
    ClientTrain,
    /// Client-side DP noise (local or distributed share).
    ClientNoise,
    /// Server-side k-means over collected sketches.
    Kmeans,
    /// Random perturbation of initial cluster models.
    ServerInit,
    /// Coordinate subsampling for normality statistics.
    Subsample,
    /// Public pooled warm-up of the base model.
    Pretrain,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::Population => 1,
            StreamKind::Backbone => 2,
            StreamKind::BaseModel => 3,
            StreamKind::RoundSample => 4,
            StreamKind::ClientTrain => 5,
            StreamKind::ClientNoise => 6,
            StreamKind::Kmeans => 7,
            StreamKind::ServerInit => 8,
            StreamKind::Subsample => 9,
            StreamKind::Pretrain => 10,
        }
    }
}

/// `(entity kind, entity index, round index)` stream identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub kind: StreamKind,
    pub index: u64,
    pub round: u64,
}

impl StreamId {
    pub fn new(kind: StreamKind, index: u64, round: u64) -> Self {
        Self { kind, index, round }
    }
}

// splitmix64 finalizer; used only to spread stream-id fields into seed words.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A seeded, reproducible random stream.
///
/// Gaussian variates come from the Marsaglia polar method over the
/// underlying ChaCha8 uniform stream; the method is fixed so a given crate
/// version always maps `(seed, id)` to the same sample sequence.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl RngStream {
    pub fn derive(seed: u64, id: StreamId) -> Self {
        let mut state = mix(seed);
        for field in [id.kind.tag(), id.index, id.round] {
            state = mix(state ^ mix(field));
        }
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
            state = mix(state.wrapping_add(i as u64 + 1));
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Self {
            rng: ChaCha8Rng::from_seed(key),
            spare: None,
        }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// One standard normal variate (Marsaglia polar method).
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(g) = self.spare.take() {
            return g;
        }
        loop {
            let u = 2.0 * self.rng.gen::<f64>() - 1.0;
            let v = 2.0 * self.rng.gen::<f64>() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let m = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * m);
                return u * m;
            }
        }
    }

    /// `dim` i.i.d. draws from `N(0, sigma^2)`; `sigma = 0` yields zeros.
    pub fn gaussian_vec(&mut self, dim: usize, sigma: f64) -> Vec<f64> {
        assert!(sigma >= 0.0, "sigma must be non-negative");
        if sigma == 0.0 {
            return vec![0.0; dim];
        }
        (0..dim).map(|_| sigma * self.next_gaussian()).collect()
    }
}

/// Flat parameter vector of i.i.d. `N(0, sigma^2)` samples.
pub fn gaussian_noise(stream: &mut RngStream, dim: usize, sigma: f64) -> ParamVector {
    ParamVector::from_values(stream.gaussian_vec(dim, sigma))
}
