//! Named, independent random streams derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Generator used for every stochastic component.
pub type Stream = ChaCha8Rng;

pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const NEGATIVES: &str = "negatives";
pub const DROPOUT: &str = "dropout";
pub const MASK: &str = "mask";
pub const EVAL_NEGATIVES: &str = "eval-negatives";

/// Hashes `(seed, labels...)` into a 256-bit generator seed.
pub fn derive_seed(seed: u64, labels: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let out = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&out);
    s
}

/// First eight bytes of [`derive_seed`], for places that want a `u64`.
pub fn derive_u64(seed: u64, labels: &[&str]) -> u64 {
    let s = derive_seed(seed, labels);
    u64::from_le_bytes(s[..8].try_into().expect("eight bytes"))
}

pub fn stream(seed: u64, labels: &[&str]) -> Stream {
    ChaCha8Rng::from_seed(derive_seed(seed, labels))
}

/// Every stream a training run draws from. Each one depends only on
/// `(seed, name)`, so adding a stream never shifts another.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeedBundle {
    pub seed: u64,
    pub init: Stream,
    pub shuffle: Stream,
    pub negatives: Stream,
    pub dropout: Stream,
    pub mask: Stream,
}

impl SeedBundle {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            init: stream(seed, &[INIT]),
            shuffle: stream(seed, &[SHUFFLE]),
            negatives: stream(seed, &[NEGATIVES]),
            dropout: stream(seed, &[DROPOUT]),
            mask: stream(seed, &[MASK]),
        }
    }

    /// Fresh evaluation stream for one user; identical on every call.
    pub fn eval_stream(seed: u64, user: usize) -> Stream {
        stream(seed, &[EVAL_NEGATIVES, &user.to_string()])
    }
}

/// Shorthand for [`SeedBundle::new`].
pub fn set_all_seeds(seed: u64) -> SeedBundle {
    SeedBundle::new(seed)
}
