//! Seeded, splittable random streams.
//!
//! Everything stochastic in the toolkit draws from ChaCha12 streams derived
//! here. Two layers of splitting keep runs replayable:
//!
//! * [`phase_seed`] derives an independent 64-bit seed per named phase
//!   ("simulate", "init", "train", ...) from the run seed, so adding draws
//!   to one phase never shifts another.
//! * [`substream`] opens stream `index` of a seed. Per-entry substreams make
//!   results independent of evaluation order, so a simulation sharded across
//!   threads produces the same bytes as a serial one.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The RNG used everywhere in this workspace.
pub type Stream = ChaCha12Rng;

/// Root stream of a seed (stream index 0).
pub fn root(seed: u64) -> Stream {
    substream(seed, 0)
}

/// Independent stream `index` under `seed`. ChaCha streams with equal seed
/// and different stream index never overlap.
pub fn substream(seed: u64, index: u64) -> Stream {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index.into());
    rng
}

/// Stable 64-bit seed for a named phase of a run. FNV-1a over the phase
/// name, then a splitmix64 finalizer mixing in the run seed.
pub fn phase_seed(seed: u64, phase: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in phase.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
