use rand::seq::SliceRandom;
use rand::Rng;

use super::augment::{augment_image, record_rng, PreprocessConfig};
use super::image::{load_and_resize_image, normalize_image, ImageTensor};
use super::manifest::ImageRecord;
use crate::error::{Error, Result};

/// One epoch's worth of batches over a record slice.
#[derive(Debug, Clone)]
pub struct Batches<'a, T> {
    items: &'a [T],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a, T> Iterator for Batches<'a, T> {
    type Item = Vec<(usize, &'a T)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].iter().map(|&i| (i, &self.items[i])).collect();
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl<T> ExactSizeIterator for Batches<'_, T> {}

/// Splits `records` into batches of `batch_size` (the last may be short), each item
/// paired with its index in `records`. With `shuffle`, the order is a permutation
/// drawn from `rng`.
pub fn iterate_batches<'a, T, R: Rng + ?Sized>(
    records: &'a [T],
    batch_size: usize,
    shuffle: bool,
    rng: &mut R,
) -> Result<Batches<'a, T>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty record list".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(Batches {
        items: records,
        order,
        batch_size,
        pos: 0,
    })
}

/// How a record is turned into a network input.
#[derive(Debug, Clone, Copy)]
pub enum Pipeline<'a> {
    /// Resize and normalize only (validation and inference).
    Eval,
    /// Resize, augment with a per-record random source, normalize.
    Train {
        config: &'a PreprocessConfig,
        seed: u64,
        epoch: usize,
    },
}

/// Loads one record as a normalized network input.
pub fn prepare_image(
    record: &ImageRecord,
    index: usize,
    target_size: usize,
    pipeline: Pipeline<'_>,
) -> Result<ImageTensor> {
    let image = load_and_resize_image(record, target_size)?;
    let image = match pipeline {
        Pipeline::Eval => image,
        Pipeline::Train { config, seed, epoch } => {
            if config.is_identity() {
                image
            } else {
                augment_image(&image, config, &mut record_rng(seed, epoch, index))
            }
        }
    };
    normalize_image(image)
}
