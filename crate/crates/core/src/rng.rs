//! Named random sub-streams derived from a single root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives an independent stream for `(root, name, index)`.
///
/// Streams are keyed by name so that individual pipeline stages (env, init,
/// train, eval, probe) can be re-run without disturbing the others.
pub fn substream(root: u64, name: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

/// Derives a 64-bit child seed, for handing to code that wants a plain seed.
pub fn subseed(root: u64, name: &str, index: u64) -> u64 {
    use rand::RngCore;
    substream(root, name, index).next_u64()
}
