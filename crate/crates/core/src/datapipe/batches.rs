use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::frames::FrameSource;
use crate::augment::{apply_pipeline, AugmentConfig, AugmentationPlan, CutoutMode};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Mixes a run seed with two stream coordinates (splitmix64 finalizer).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Index batches over `n` frames; shuffled with `seed` when `shuffle` is set.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled order, augmented with the given cut-out mode.
    Train(CutoutMode),
    /// Source order, no augmentation.
    Eval,
}

/// Model inputs `[N, 3, 224, 224]`, targets `[N]` (1 = fake) and the
/// source indices they came from.
#[derive(Clone, Debug)]
pub struct Batch<T: Real> {
    pub inputs: Tensor<T>,
    pub targets: Tensor<T>,
    pub indices: Vec<usize>,
    pub plans: Vec<AugmentationPlan>,
}

/// Lazily assembled batches; frames of a batch are decoded and augmented in
/// parallel, each with a seed derived from `(seed, epoch, frame index)`.
pub struct Batches<'a, S: FrameSource + ?Sized> {
    source: &'a S,
    order: Vec<Vec<usize>>,
    next: usize,
    mode: BatchMode,
    seed: u64,
    epoch: u64,
    cfg: AugmentConfig,
}

pub fn make_batches<'a, S: FrameSource + ?Sized>(
    source: &'a S,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    mode: BatchMode,
    cfg: &AugmentConfig,
) -> Result<Batches<'a, S>> {
    cfg.validate()?;
    let shuffle = matches!(mode, BatchMode::Train(_));
    let order = batch_order(source.len(), batch_size, derive_seed(seed, epoch, u64::MAX), shuffle)?;
    Ok(Batches { source, order, next: 0, mode, seed, epoch, cfg: cfg.clone() })
}

impl<S: FrameSource + ?Sized> Batches<'_, S> {
    pub fn order(&self) -> &[Vec<usize>] {
        &self.order
    }

    pub fn assemble<T: Real>(&self, indices: &[usize]) -> Result<Batch<T>> {
        let (cutout, cfg) = match self.mode {
            BatchMode::Train(m) => (m, self.cfg.clone()),
            BatchMode::Eval => (
                CutoutMode::None,
                AugmentConfig { normalization: self.cfg.normalization.clone(), ..AugmentConfig::disabled() },
            ),
        };
        let items: Vec<(Tensor<T>, AugmentationPlan, T)> = indices
            .par_iter()
            .map(|&i| {
                let frame = self.source.frame(i)?;
                let (t, plan) =
                    apply_pipeline::<T>(&frame, cutout, derive_seed(self.seed, self.epoch, i as u64), &cfg)?;
                Ok((t, plan, T::of(frame.label.target())))
            })
            .collect::<Result<_>>()?;
        let mut tensors = Vec::with_capacity(items.len());
        let mut plans = Vec::with_capacity(items.len());
        let mut targets = Vec::with_capacity(items.len());
        for (t, p, y) in items {
            tensors.push(t);
            plans.push(p);
            targets.push(y);
        }
        Ok(Batch {
            inputs: Tensor::stack(&tensors)?,
            targets: Tensor::new(vec![targets.len()], targets)?,
            indices: indices.to_vec(),
            plans,
        })
    }

    pub fn next_batch<T: Real>(&mut self) -> Option<Result<Batch<T>>> {
        let idx = self.order.get(self.next)?.clone();
        self.next += 1;
        Some(self.assemble(&idx))
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}
