use rand::seq::SliceRandom;
use rand::Rng;

use super::{Batch, BatchItem, DomainDataset};
use crate::error::{Error, Result};
use crate::seeding;

fn train_union(datasets: &[DomainDataset]) -> Vec<BatchItem> {
    datasets
        .iter()
        .enumerate()
        .flat_map(|(d, ds)| {
            ds.split.train.iter().map(move |&i| BatchItem {
                dataset: d,
                instance: i,
            })
        })
        .collect()
}

fn check_args(union: &[BatchItem], batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be at least 1".into()));
    }
    if union.is_empty() {
        return Err(Error::EmptyData("no training instances in any domain".into()));
    }
    Ok(())
}

/// Draws one batch without replacement from a fresh shuffle of the union of
/// all training splits.
pub fn sample_minibatch<R: Rng + ?Sized>(datasets: &[DomainDataset], batch_size: usize, rng: &mut R) -> Result<Batch> {
    let mut union = train_union(datasets);
    check_args(&union, batch_size)?;
    union.shuffle(rng);
    union.truncate(batch_size);
    Ok(Batch::new(union))
}

/// Epoch-ordered batch stream: every epoch reshuffles the training union
/// and emits contiguous batches, keeping the final partial batch.
#[derive(Debug, Clone)]
pub struct EpochBatches {
    union: Vec<BatchItem>,
    order: Vec<BatchItem>,
    batch_size: usize,
    epochs: Option<usize>,
    seed: u64,
    epoch: usize,
    cursor: usize,
}

impl EpochBatches {
    /// Zero-based epoch of the batch returned by the next call to `next`.
    pub fn epoch(&self) -> usize {
        if self.cursor >= self.order.len() {
            self.epoch + 1
        } else {
            self.epoch
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.union.len().div_ceil(self.batch_size)
    }

    /// Removes the epoch limit, so batches keep coming.
    pub fn unbounded(mut self) -> Self {
        self.epochs = None;
        self
    }

    fn shuffle_epoch(&mut self, epoch: usize) {
        self.order.clone_from(&self.union);
        let mut rng = seeding::stream(self.seed, &format!("epoch-{epoch}"));
        self.order.shuffle(&mut rng);
        self.epoch = epoch;
        self.cursor = 0;
    }
}

impl Iterator for EpochBatches {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            let next_epoch = if self.order.is_empty() { 0 } else { self.epoch + 1 };
            if self.epochs.is_some_and(|e| next_epoch >= e) {
                return None;
            }
            self.shuffle_epoch(next_epoch);
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = Batch::new(self.order[self.cursor..end].to_vec());
        self.cursor = end;
        Some(batch)
    }
}

pub fn iterate_epochs(datasets: &[DomainDataset], batch_size: usize, epochs: usize, seed: u64) -> Result<EpochBatches> {
    let union = train_union(datasets);
    check_args(&union, batch_size)?;
    Ok(EpochBatches {
        union,
        order: Vec::new(),
        batch_size,
        epochs: Some(epochs),
        seed,
        epoch: 0,
        cursor: 0,
    })
}
