//! Deterministic seed derivation.
//!
//! One master seed fans out into independent streams (initialisation,
//! batch sampling, scene generation, augmentation, ...) so that changing
//! e.g. the augmentation settings never perturbs scene content. Derivation
//! is a splitmix64 hash of `(master, stream, index)`, which gives
//! well-mixed, platform-independent 64-bit seeds.

/// Named consumers of derived seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Network parameter initialisation.
    Init,
    /// Stage-1 task batch sampling.
    Stage1Sampler,
    /// Procedural scene generation.
    Generator,
    /// Data augmentation draws.
    Augment,
    /// Stage-2 supervised batch sampling.
    Stage2Sampler,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Stage1Sampler => 2,
            Stream::Generator => 3,
            Stream::Augment => 4,
            Stream::Stage2Sampler => 5,
        }
    }
}

/// One round of the splitmix64 output function.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Seed for `stream`, derived from the master seed.
pub fn derive(master: u64, stream: Stream) -> u64 {
    derive_indexed(master, stream, 0)
}

/// Seed for the `index`-th consumer within `stream` (e.g. per-scene or
/// per-frame generator streams).
pub fn derive_indexed(master: u64, stream: Stream, index: u64) -> u64 {
    let a = splitmix64(master ^ 0xA076_1D64_78BD_642F);
    let b = splitmix64(a ^ stream.tag().wrapping_mul(0xE703_7ED1_A0B4_28DB));
    splitmix64(b ^ index.wrapping_mul(0x8EBC_6AF0_9C88_C6E3))
}
