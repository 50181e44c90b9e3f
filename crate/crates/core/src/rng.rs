//! Counter-based random streams.
//!
//! Every variate is addressed by `(seed, stream id, draw index)`: a stream is
//! a ChaCha8 keystream whose key is derived from the seed and whose 64-bit
//! stream selector is derived from the stream id. Per-particle, per-step
//! generators are obtained by deriving sub-streams, so results never depend on
//! the order in which particles are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Address of an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    stream: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Child stream labelled by `tag`. Distinct tags give unrelated streams.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream {
            seed: self.seed,
            stream: mix64(self.stream ^ mix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    /// Stream for particle `particle` at step `step`.
    pub fn for_particle(&self, step: u64, particle: u64) -> RngStream {
        self.derive(step).derive(particle)
    }

    /// Generator positioned at draw index zero of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut state = self.seed;
        for chunk in key.chunks_exact_mut(8) {
            state = mix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng
    }
}

/// Generator factory for many sub-streams that share a key.
///
/// Deriving the ChaCha key is the expensive part of [`RngStream::rng`]; a
/// keyed factory only swaps the 64-bit stream selector.
#[derive(Clone)]
pub struct KeyedStreams {
    base: ChaCha8Rng,
    origin: RngStream,
}

impl KeyedStreams {
    pub fn new(origin: RngStream) -> Self {
        Self {
            base: origin.rng(),
            origin,
        }
    }

    /// Generator for particle `particle` at step `step`; identical to
    /// `origin.for_particle(step, particle).rng()`.
    pub fn particle(&self, step: u64, particle: u64) -> ChaCha8Rng {
        let id = self.origin.for_particle(step, particle).stream_id();
        let mut rng = self.base.clone();
        rng.set_stream(id);
        rng.set_word_pos(0);
        rng
    }
}
