//! The hippocampus queue: a fixed-capacity FIFO of detached anchor
//! representations from previous batches, weighted by block-indexed
//! forgetting coefficients p_m = 1 - lambda * ceil(m / N), with m = 1 at the
//! newest entry. The queue contributes the extra negative mass
//! phi = sum_m p_m * exp(sim(h, H_m) / tau) to the identical-twin loss.

use crate::error::{Error, Result};
use crate::numeric::{all_finite, cosine_similarity};
use std::collections::VecDeque;

/// Fixed-capacity FIFO of representation vectors. Entries are plain value
/// copies: nothing in the training graph can write back into them.
#[derive(Debug, Clone)]
pub struct HippocampusQueue {
    capacity: usize,
    block_size: usize,
    lambda: f64,
    /// entries[0] is the newest (m = 1 in the coefficient formula).
    entries: VecDeque<Vec<f64>>,
}

impl HippocampusQueue {
    /// Creates an empty queue. Capacity need not be a whole number of blocks
    /// (the partial oldest block just gets the smallest coefficient), but
    /// every coefficient must stay positive: 1 - lambda * ceil(M/N) > 0.
    pub fn new(capacity: usize, block_size: usize, lambda: f64) -> Result<Self> {
        if block_size == 0 || capacity < block_size {
            return Err(Error::Config(format!(
                "queue needs capacity >= block size >= 1, got capacity {capacity}, block {block_size}"
            )));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!(
                "forgetting rate must lie in [0, 1], got {lambda}"
            )));
        }
        let blocks = capacity.div_ceil(block_size);
        let oldest = 1.0 - lambda * blocks as f64;
        if oldest <= 0.0 {
            return Err(Error::Config(format!(
                "forgetting rate {lambda} drives the oldest block's coefficient to {oldest} \
                 (capacity {capacity}, block {block_size}); it must stay positive"
            )));
        }
        Ok(HippocampusQueue {
            capacity,
            block_size,
            lambda,
            entries: VecDeque::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry at FIFO position `i` (0 = newest).
    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i]
    }

    /// Forgetting coefficient for 1-based position m.
    fn coefficient_at(&self, m: usize) -> f64 {
        1.0 - self.lambda * m.div_ceil(self.block_size) as f64
    }

    /// Coefficients aligned with the current entries, newest first.
    pub fn coefficients(&self) -> Vec<f64> {
        (1..=self.entries.len())
            .map(|m| self.coefficient_at(m))
            .collect()
    }

    /// Prepends a finished batch as the newest block and evicts the oldest
    /// entries until the length is back within capacity. The batch must be
    /// exactly one block of finite, nonzero-norm vectors.
    pub fn push_batch(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if batch.len() != self.block_size {
            return Err(Error::Domain(format!(
                "push_batch: got {} vectors, the block size is {}",
                batch.len(),
                self.block_size
            )));
        }
        for (i, h) in batch.iter().enumerate() {
            if !all_finite(h) {
                return Err(Error::Numeric(format!(
                    "push_batch: vector {i} has a non-finite entry"
                )));
            }
            if h.iter().all(|&x| x == 0.0) {
                return Err(Error::Domain(format!(
                    "push_batch: vector {i} has zero norm"
                )));
            }
        }
        // prepend in reverse so batch[0] ends up newest, matching the order
        // the anchors were produced in
        for h in batch.iter().rev() {
            self.entries.push_front(h.clone());
        }
        while self.entries.len() > self.capacity {
            self.entries.pop_back();
        }
        Ok(())
    }

    /// The weighted negative mass phi = sum_m p_m * exp(sim(h, H_m) / tau).
    /// An empty queue contributes exactly 0.
    pub fn phi(&self, h: &[f64], tau: f64) -> Result<f64> {
        Ok(self
            .phi_terms(h, tau)?
            .iter()
            .fold(0.0, |acc, &(p, e)| acc + p * e))
    }

    /// Per-entry pieces of phi: (p_m, exp(sim(h, H_m) / tau)), newest first.
    /// The loss layer consumes these so its log-sum-exp stabilization and its
    /// gradients see exactly the same terms.
    pub fn phi_terms(&self, h: &[f64], tau: f64) -> Result<Vec<(f64, f64)>> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let mut out = Vec::with_capacity(self.entries.len());
        for (idx, entry) in self.entries.iter().enumerate() {
            let sim = cosine_similarity(h, entry)?;
            out.push((self.coefficient_at(idx + 1), (sim / tau).exp()));
        }
        Ok(out)
    }

    /// Similarities sim(h, H_m) newest first, for gradient computation.
    pub fn similarities(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.entries
            .iter()
            .map(|entry| cosine_similarity(h, entry))
            .collect()
    }
}
