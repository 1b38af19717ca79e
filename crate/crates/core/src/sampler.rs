//! m-per-class batch construction: every batch is built from groups holding
//! `m` samples of each class, drawn without replacement from per-class pools
//! that reshuffle when exhausted.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed_mix;

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Samples per class per group.
    pub m: usize,
    /// Total batch size; must be a multiple of `2 m`.
    pub batch_size: usize,
    /// Dataset indices per label.
    pub class_indices: [Vec<usize>; 2],
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::config("sampler: m must be >= 1"));
        }
        if self.batch_size == 0 || self.batch_size % (2 * self.m) != 0 {
            return Err(Error::config(format!(
                "sampler: batch size {} must be a positive multiple of 2m = {}",
                self.batch_size,
                2 * self.m
            )));
        }
        for (label, pool) in self.class_indices.iter().enumerate() {
            if pool.is_empty() {
                return Err(Error::config(format!(
                    "sampler: class {label} has no samples"
                )));
            }
        }
        Ok(())
    }
}

struct Pool {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Pool {
    fn new(indices: &[usize], seed: u64) -> Self {
        let mut pool = Pool {
            order: indices.to_vec(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        pool.shuffle();
        pool
    }

    fn shuffle(&mut self) {
        for i in (1..self.order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    fn draw(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.shuffle();
        }
        let idx = self.order[self.pos];
        self.pos += 1;
        idx
    }
}

/// One epoch worth of planned batches plus a cursor for streaming.
#[derive(Debug, Clone)]
pub struct EpochPlan {
    batches: Vec<Vec<(usize, u8)>>,
    cursor: usize,
}

impl EpochPlan {
    pub fn batches(&self) -> &[Vec<(usize, u8)>] {
        &self.batches
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Next planned batch, or `None` at end of epoch.
    pub fn next_batch(&mut self) -> Option<&[(usize, u8)]> {
        let batch = self.batches.get(self.cursor)?;
        self.cursor += 1;
        Some(batch)
    }
}

/// Materializes `n_batches` class-balanced batches. Each batch concatenates
/// `batch_size / 2m` groups of `m` class-0 then `m` class-1 indices.
pub fn epoch_plan(cfg: &SamplerConfig, n_batches: usize) -> Result<EpochPlan> {
    cfg.validate()?;
    let groups = cfg.batch_size / (2 * cfg.m);
    let mut pools = [
        Pool::new(&cfg.class_indices[0], seed_mix(cfg.seed, 0)),
        Pool::new(&cfg.class_indices[1], seed_mix(cfg.seed, 1)),
    ];
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..groups {
            for label in 0..2u8 {
                for _ in 0..cfg.m {
                    batch.push((pools[label as usize].draw(), label));
                }
            }
        }
        batches.push(batch);
    }
    Ok(EpochPlan { batches, cursor: 0 })
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    fn config(m: usize, batch: usize, n0: usize, n1: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            m,
            batch_size: batch,
            class_indices: [(0..n0).collect(), (n0..n0 + n1).collect()],
            seed,
        }
    }

    #[test]
    fn batches_are_class_balanced_with_group_structure() {
        let cfg = config(4, 32, 40, 40, 7);
        let plan = epoch_plan(&cfg, 10).unwrap();
        assert_eq!(plan.len(), 10);
        for batch in plan.batches() {
            assert_eq!(batch.len(), 32);
            let ones = batch.iter().filter(|(_, l)| *l == 1).count();
            assert_eq!(ones, 16, "16 per class");
            // every consecutive 2m chunk holds m of each class
            for chunk in batch.chunks(8) {
                assert_eq!(chunk.iter().filter(|(_, l)| *l == 0).count(), 4);
                assert_eq!(chunk.iter().filter(|(_, l)| *l == 1).count(), 4);
            }
        }
    }

    #[test]
    fn forced_composition_with_singleton_classes() {
        let cfg = SamplerConfig {
            m: 1,
            batch_size: 2,
            class_indices: [vec![0], vec![1]],
            seed: 3,
        };
        let plan = epoch_plan(&cfg, 5).unwrap();
        for batch in plan.batches() {
            assert_eq!(batch, &[(0, 0), (1, 1)]);
        }
    }

    #[test]
    fn pool_exhaustion_reshuffles_without_early_repeats() {
        // class pool of 10, demand 16 per class per batch: after any prefix
        // of draws, per-index counts differ by at most one
        let cfg = config(4, 32, 10, 10, 42);
        let plan = epoch_plan(&cfg, 5).unwrap();
        let mut counts: HashMap<usize, usize> = HashMap::new();
        let mut draws = 0usize;
        for batch in plan.batches() {
            for (idx, label) in batch {
                if *label == 0 {
                    *counts.entry(*idx).or_default() += 1;
                    draws += 1;
                }
            }
        }
        assert_eq!(draws, 80);
        let lo = draws / 10;
        for idx in 0..10 {
            let c = counts.get(&idx).copied().unwrap_or(0);
            assert!(
                c == lo || c == lo + 1,
                "index {idx} drawn {c} times over {draws} draws"
            );
        }
    }

    #[test]
    fn plans_are_deterministic_under_seed() {
        let a = epoch_plan(&config(2, 8, 20, 20, 3), 6).unwrap();
        let b = epoch_plan(&config(2, 8, 20, 20, 3), 6).unwrap();
        assert_eq!(a.batches(), b.batches());
        let c = epoch_plan(&config(2, 8, 20, 20, 4), 6).unwrap();
        assert_ne!(a.batches(), c.batches());
    }

    #[test]
    fn next_batch_streams_then_signals_end() {
        let mut plan = epoch_plan(&config(1, 2, 5, 5, 9), 3).unwrap();
        let mut seen = 0;
        while let Some(batch) = plan.next_batch() {
            assert_eq!(batch.len(), 2);
            for (idx, _) in batch {
                assert!(*idx < 10);
            }
            seen += 1;
        }
        assert_eq!(seen, 3);
        assert!(plan.next_batch().is_none());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(epoch_plan(&config(4, 30, 10, 10, 0), 1).is_err()); // 30 % 8 != 0
        assert!(epoch_plan(&config(0, 8, 10, 10, 0), 1).is_err());
        let empty = SamplerConfig {
            m: 1,
            batch_size: 2,
            class_indices: [vec![], vec![0]],
            seed: 0,
        };
        assert!(epoch_plan(&empty, 1).is_err());
    }
}
