//! Fixed-capacity FIFO queue of unit-norm teacher embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{norm, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    /// `capacity × dim`, ring order.
    storage: Vec<f64>,
    /// Next slot to overwrite, i.e. the oldest row.
    head: usize,
}

/// `K` independent Gaussian directions normalized to unit length.
pub fn init_queue(capacity: usize, dim: usize, seed: u64) -> Result<FeatureQueue> {
    if dim == 0 {
        return Err(Error::invalid("queue dim must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut storage = Vec::with_capacity(capacity * dim);
    for _ in 0..capacity {
        let row: Vec<f64> = loop {
            let r: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if norm(&r) > 1e-12 {
                break r;
            }
        };
        let n = norm(&row);
        storage.extend(row.iter().map(|v| v / n));
    }
    Ok(FeatureQueue {
        capacity,
        dim,
        storage,
        head: 0,
    })
}

impl FeatureQueue {
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn is_empty(&self) -> bool {
        self.capacity == 0
    }

    /// Replaces the oldest rows by the rows of `z` (`B × dim`), in order.
    /// Only the last `K` rows survive when `B > K`.
    pub fn enqueue_batch(&mut self, z: &Tensor) -> Result<()> {
        if z.rank() != 2 || z.cols() != self.dim {
            return Err(Error::shape("enqueue_batch", z.shape(), &[0, self.dim]));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        let b = z.rows();
        let skip = b.saturating_sub(self.capacity);
        for i in skip..b {
            let d = self.dim;
            self.storage[self.head * d..(self.head + 1) * d].copy_from_slice(z.row(i));
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    /// Ring storage as a `K × dim` matrix (row order is not chronological).
    pub fn snapshot(&self) -> Tensor {
        Tensor::new(&[self.capacity, self.dim], self.storage.clone()).expect("storage is K×dim")
    }

    /// Rows from oldest to newest.
    pub fn rows_in_order(&self) -> Vec<&[f64]> {
        let d = self.dim;
        (0..self.capacity)
            .map(|i| {
                let r = (self.head + i) % self.capacity;
                &self.storage[r * d..(r + 1) * d]
            })
            .collect()
    }

    /// `D⁺`: a copy of the queue with `target` (`1 × dim`) appended as row `K+1`.
    pub fn with_target(&self, target: &Tensor) -> Result<Tensor> {
        if target.numel() != self.dim || target.rows() != 1 && target.rank() == 2 {
            return Err(Error::shape("with_target", target.shape(), &[1, self.dim]));
        }
        let mut data = self.storage.clone();
        data.extend_from_slice(target.data());
        Tensor::new(&[self.capacity + 1, self.dim], data)
    }
}
