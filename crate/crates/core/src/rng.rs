//! Counter-based random substreams.
//!
//! Every random tensor in a replicate is drawn from its own ChaCha stream
//! whose 256-bit key is the tuple `(master_seed, replicate, task, role)`.
//! Streams never overlap and do not depend on the order in which workers
//! visit replicates, so results are independent of the thread count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// What a stream is used for. The discriminant is part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Role {
    TruthDeviation = 1,
    TrainFeatures = 2,
    TrainNoise = 3,
    ValFeatures = 4,
    ValNoise = 5,
    TestTruthDeviation = 6,
    TestFeatures = 7,
    TestNoise = 8,
    TestInput = 9,
    Audit = 10,
}

/// Identifies one deterministic substream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub master_seed: u64,
    pub replicate: u64,
    pub task: u64,
    pub role: Role,
}

impl RngStream {
    pub fn new(master_seed: u64, replicate: u64, task: u64, role: Role) -> Self {
        Self {
            master_seed,
            replicate,
            task,
            role,
        }
    }

    /// Single flat id, for callers that only need one stream per index.
    pub fn flat(master_seed: u64, stream_id: u64) -> Self {
        Self::new(master_seed, stream_id, 0, Role::Audit)
    }

    pub fn with_task(self, task: u64, role: Role) -> Self {
        Self { task, role, ..self }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.replicate.to_le_bytes());
        key[16..24].copy_from_slice(&self.task.to_le_bytes());
        key[24..32].copy_from_slice(&(self.role as u64).to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

/// `rows × cols` matrix of i.i.d. N(0, 1) entries, filled column by column.
pub fn standard_normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_iterator(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn standard_normal_vector<R: Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}
