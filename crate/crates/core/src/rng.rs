//! Seeded, splittable randomness.
//!
//! Each [`Rng`] is a ChaCha8 stream keyed by a 32-byte root. Child streams are
//! derived by hashing the parent root with a name, so `rng.derive("model/init")`
//! is a pure function of the seed and the name and never shares state with any
//! other stream.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Vector};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    root: [u8; 32],
    inner: ChaCha8Rng,
}

/// Serializable snapshot of a stream position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub root: String,
    pub word_pos: String,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"hdmole/root");
        h.update(seed.to_le_bytes());
        Self::from_root(seed, h.finalize().into())
    }

    fn from_root(seed: u64, root: [u8; 32]) -> Self {
        Self {
            seed,
            root,
            inner: ChaCha8Rng::from_seed(root),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream named `name`. Does not advance `self`.
    pub fn derive(&self, name: &str) -> Rng {
        let mut h = Sha256::new();
        h.update(self.root);
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        Self::from_root(self.seed, h.finalize().into())
    }

    /// Child stream keyed by an integer (cell index, sample index, ...).
    pub fn derive_index(&self, name: &str, index: u64) -> Rng {
        self.derive(&format!("{name}#{index}"))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn normal_vector(&mut self, n: usize, std: f64) -> Vector {
        Vector::from((0..n).map(|_| std * self.normal()).collect::<Vec<_>>())
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            root: self.root.iter().map(|b| format!("{b:02x}")).collect(),
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        if state.root.len() != 64 {
            return Err(Error::invalid("rng root must be 64 hex characters"));
        }
        let mut root = [0u8; 32];
        for (i, byte) in root.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&state.root[2 * i..2 * i + 2], 16)
                .map_err(|e| Error::invalid(format!("rng root: {e}")))?;
        }
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|e| Error::invalid(format!("rng word_pos: {e}")))?;
        let mut rng = Self::from_root(state.seed, root);
        rng.inner.set_word_pos(pos);
        Ok(rng)
    }
}

/// Matrix of i.i.d. `N(0, std²)` entries.
pub fn gaussian_fill(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::invalid(format!("std must be positive, got {std}")));
    }
    let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data)
}
