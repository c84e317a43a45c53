//! Tuples encoded once into stacked tensors, and the deterministic batch
//! order used by the trainer.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use tch::Tensor;

use crate::dataset::TrainingTuple;
use crate::diffusion::codec::images_to_tensor;
use crate::diffusion::omp::{downsample_mask, masks_to_tensor};
use crate::diffusion::{rng, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct EncodedDataset {
    /// Target (with-object) latents `[N, 3, H, W]`.
    pub targets: Tensor,
    /// Input (object-removed) latents `[N, 3, H, W]`.
    pub inputs: Tensor,
    /// Masks at latent resolution `[N, 1, H, W]`.
    pub masks: Tensor,
    pub tokens: Vec<i64>,
}

impl EncodedDataset {
    pub fn encode(tuples: &[TrainingTuple], vocab: &Vocabulary, size: u32) -> Result<Self> {
        if tuples.is_empty() {
            return Err(Error::EmptyInput("no training tuples".into()));
        }
        for t in tuples {
            if t.target_image.dimensions() != (size, size) {
                return Err(Error::contract(format!(
                    "tuple image is {:?}, model expects {size}×{size}",
                    t.target_image.dimensions()
                )));
            }
        }
        let targets = images_to_tensor(&tuples.iter().map(|t| &t.target_image).collect::<Vec<_>>())?;
        let inputs = images_to_tensor(&tuples.iter().map(|t| &t.input_image).collect::<Vec<_>>())?;
        let masks = tuples
            .iter()
            .map(|t| downsample_mask(&t.mask, (size as usize, size as usize)))
            .collect::<Result<Vec<_>>>()?;
        let tokens = tuples.iter().map(|t| vocab.token(&t.caption)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            targets,
            inputs,
            masks: masks_to_tensor(&masks)?,
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Infinite sequence of shuffled epochs; batch `s` covers positions
/// `s·B .. (s+1)·B` of that sequence, so any step's batch is computable
/// without replaying earlier ones.
#[derive(Debug)]
pub struct BatchOrder {
    n: usize,
    seed: u64,
    epochs: HashMap<u64, Vec<usize>>,
}

impl BatchOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            epochs: HashMap::new(),
        }
    }

    fn epoch(&mut self, e: u64) -> &[usize] {
        let (n, seed) = (self.n, self.seed);
        self.epochs.entry(e).or_insert_with(|| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng::stream("epoch", &[seed, e]));
            idx
        })
    }

    pub fn batch(&mut self, step: u64, batch_size: usize) -> Vec<usize> {
        let start = step * batch_size as u64;
        let out = (0..batch_size as u64)
            .map(|i| {
                let g = start + i;
                let (e, i) = (g / self.n as u64, (g % self.n as u64) as usize);
                self.epoch(e)[i]
            })
            .collect();
        // Only the current and next epoch are ever needed again.
        let cur = start / self.n as u64;
        self.epochs.retain(|&k, _| k + 1 >= cur);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_epoch_is_a_permutation() {
        let mut o = BatchOrder::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|s| o.batch(s, 4)).collect();
        seen.truncate(20);
        let (mut a, mut b) = (seen[..10].to_vec(), seen[10..].to_vec());
        a.sort();
        b.sort();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
        assert_eq!(b, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batches_are_random_access() {
        let mut fresh = BatchOrder::new(7, 1);
        let mut walked = BatchOrder::new(7, 1);
        for s in 0..20 {
            walked.batch(s, 3);
        }
        assert_eq!(fresh.batch(20, 3), walked.batch(20, 3));
    }
}
