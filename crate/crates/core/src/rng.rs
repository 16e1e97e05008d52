//! Deterministic random-number substreams.
//!
//! Every stochastic site in the pipeline owns a named substream derived from
//! the master seed plus a list of integer tags (kind, step, epoch, sample
//! hash, ...). Substreams are mutually independent, so adding or removing a
//! consumer never perturbs the draws seen by any other site. This is what
//! makes the degenerate-config identities (empty buffer, zero instances)
//! bit-exact: a guarded-off site simply never instantiates its stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

/// Substream kind tags. Values are arbitrary but fixed forever.
pub mod kind {
    /// Weight initialization of a fresh network.
    pub const MODEL_INIT: u64 = 0x01;
    /// Per-epoch shuffling of the step dataset. Strategy-independent.
    pub const SHUFFLE: u64 = 0x02;
    /// Per-sample fusion draws (lambda, fallback selection, random anchors).
    pub const SAMPLE: u64 = 0x03;
    /// Synthetic dataset generation.
    pub const SYNTH: u64 = 0x04;
    /// Replay-item picks when mixing stored content into a batch.
    pub const REPLAY_PICK: u64 = 0x05;
    /// Master-seed derivation for the held-out evaluation split.
    pub const EVAL_DATA: u64 = 0x06;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over raw bytes; used to fold string identifiers (sample ids) into
/// substream tags.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a new master seed from an existing one, far from any nearby seed
/// so that sweeps over consecutive master seeds never collide with it.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(master ^ 0x5344_5254_4D53_4752) ^ splitmix64(tag))
}

/// Derives an independent ChaCha8 stream from the master seed and a tag path.
pub fn substream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(master ^ 0x5344_5254_4D53_4752);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Beta(a, b) draw in f64. Draws happen in f64 regardless of the pipeline
/// scalar so the stream contents do not depend on precision.
pub fn sample_beta(rng: &mut ChaCha8Rng, a: f64, b: f64) -> f64 {
    let beta = Beta::new(a, b).expect("beta parameters must be positive");
    beta.sample(rng)
}
