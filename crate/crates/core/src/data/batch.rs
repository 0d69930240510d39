use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pairs::mix_seed;
use super::DomainSample;
use crate::error::{Error, Result};

/// Mixed-domain batch schedule. Each step takes `batch_size / 2` samples from
/// each domain; an epoch is one pass over the longer dataset and the shorter
/// one cycles, reshuffled on every cycle.
#[derive(Debug, Clone)]
pub struct BatchIterator<'a> {
    source: &'a [DomainSample],
    target: &'a [DomainSample],
    half: usize,
    seed: u64,
    max_steps: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(
        source: &'a [DomainSample],
        target: &'a [DomainSample],
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Data(format!(
                "batch iterator needs both domains (source {}, target {})",
                source.len(),
                target.len()
            )));
        }
        if batch_size < 2 || batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch size {batch_size} must be even")));
        }
        Ok(Self {
            source,
            target,
            half: batch_size / 2,
            seed,
            max_steps: 0,
        })
    }

    /// Caps the steps per epoch (0 = no cap).
    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn steps_per_epoch(&self) -> usize {
        let n = self.source.len().max(self.target.len()).div_ceil(self.half);
        if self.max_steps > 0 {
            n.min(self.max_steps)
        } else {
            n
        }
    }

    fn order(&self, len: usize, tag: &str, epoch: usize, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        let mut cycle = 0;
        while out.len() < count {
            let mut perm: Vec<usize> = (0..len).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &format!("{tag}/{epoch}/{cycle}")));
            perm.shuffle(&mut rng);
            out.extend(perm.into_iter().take(count - out.len()));
            cycle += 1;
        }
        out
    }

    /// Index batches `(source, target)` for one epoch.
    pub fn epoch_indices(&self, epoch: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
        let steps = self.steps_per_epoch();
        let s = self.order(self.source.len(), "s", epoch, steps * self.half);
        let t = self.order(self.target.len(), "t", epoch, steps * self.half);
        s.chunks(self.half)
            .zip(t.chunks(self.half))
            .map(|(a, b)| (a.to_vec(), b.to_vec()))
            .collect()
    }

    pub fn epoch(&self, epoch: usize) -> EpochBatches<'a> {
        EpochBatches {
            source: self.source,
            target: self.target,
            batches: self.epoch_indices(epoch).into_iter(),
        }
    }
}

pub struct EpochBatches<'a> {
    source: &'a [DomainSample],
    target: &'a [DomainSample],
    batches: std::vec::IntoIter<(Vec<usize>, Vec<usize>)>,
}

impl<'a> Iterator for EpochBatches<'a> {
    type Item = (Vec<&'a DomainSample>, Vec<&'a DomainSample>);

    fn next(&mut self) -> Option<Self::Item> {
        let (s, t) = self.batches.next()?;
        Some((
            s.into_iter().map(|i| &self.source[i]).collect(),
            t.into_iter().map(|i| &self.target[i]).collect(),
        ))
    }
}
