//! Small helpers shared by the model trainers.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Yields minibatches of row indices, reshuffling after every pass.
pub(crate) struct Batcher {
    order: Vec<usize>,
    pos: usize,
    epoch_done: bool,
}

impl Batcher {
    pub(crate) fn new(indices: Vec<usize>) -> Self {
        Self {
            pos: indices.len(),
            order: indices,
            epoch_done: false,
        }
    }

    /// Next batch of at most `size` indices. Batches never straddle an epoch
    /// boundary, so the last batch of an epoch may be short.
    pub(crate) fn next<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> &[usize] {
        self.epoch_done = false;
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos = (start + size.max(1)).min(self.order.len());
        if self.pos == self.order.len() {
            self.epoch_done = true;
        }
        &self.order[start..self.pos]
    }

    /// True when the batch returned by the last `next` call ended an epoch.
    pub(crate) fn epoch_finished(&self) -> bool {
        self.epoch_done
    }
}

/// Copies the selected rows of `m` into a new matrix.
pub(crate) fn gather(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(r));
    }
    out
}

/// Concatenates slices into one feature row.
pub(crate) fn concat_rows(parts: &[&[f64]]) -> Vec<f64> {
    let mut v = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        v.extend_from_slice(p);
    }
    v
}

pub(crate) fn ensure_finite(loss: f64, what: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::fault(format!("{what}: non-finite loss {loss} at step {step}")))
    }
}

pub(crate) fn require_nonempty(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        Err(Error::config(format!("{what}: dataset has no transitions")))
    } else {
        Ok(())
    }
}
