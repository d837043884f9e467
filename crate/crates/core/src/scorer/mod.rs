//! Fitness contract for mask search and the scorers that implement it.
//!
//! A scorer maps a valid retention mask to a finite, non-negative loss.
//! In-process synthetic scorers have known optima; [`remote`] talks to an
//! external process over newline-delimited JSON.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::ScoreError;
use crate::mask::{GroupPartition, Mask};
use crate::sample::Sample;

pub mod brute;
pub mod planted;
pub mod pooled;
pub mod remote;

pub use brute::{brute_force_best, BruteForceResult, DEFAULT_SPACE_CAP};
pub use planted::{planted_score, PlantedInstance, PlantedScorer};
pub use pooled::{pooled_projection, pooled_score, PooledScorer};
pub use remote::{RemoteClient, RemoteScorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Concurrency {
    #[default]
    Safe,
    Serialized,
}

pub trait Scorer: Send + Sync {
    /// Stable identifier recorded in label files.
    fn id(&self) -> String;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Safe
    }

    fn score(&self, sample: &Sample, partition: &GroupPartition, mask: &Mask) -> Result<f64, ScoreError>;

    /// Scores a batch. Results are positional; implementations must not
    /// reorder them.
    fn score_batch(
        &self,
        sample: &Sample,
        partition: &GroupPartition,
        masks: &[Mask],
        workers: usize,
    ) -> Result<Vec<f64>, (usize, ScoreError)> {
        let workers = match self.concurrency() {
            Concurrency::Safe => workers,
            Concurrency::Serialized => 1,
        };
        evaluate_concurrently(masks.len(), workers, |i| self.score(sample, partition, &masks[i]))
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn id(&self) -> String {
        (**self).id()
    }
    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }
    fn score(&self, sample: &Sample, partition: &GroupPartition, mask: &Mask) -> Result<f64, ScoreError> {
        (**self).score(sample, partition, mask)
    }
    fn score_batch(
        &self,
        sample: &Sample,
        partition: &GroupPartition,
        masks: &[Mask],
        workers: usize,
    ) -> Result<Vec<f64>, (usize, ScoreError)> {
        (**self).score_batch(sample, partition, masks, workers)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }
    fn score(&self, sample: &Sample, partition: &GroupPartition, mask: &Mask) -> Result<f64, ScoreError> {
        (**self).score(sample, partition, mask)
    }
    fn score_batch(
        &self,
        sample: &Sample,
        partition: &GroupPartition,
        masks: &[Mask],
        workers: usize,
    ) -> Result<Vec<f64>, (usize, ScoreError)> {
        (**self).score_batch(sample, partition, masks, workers)
    }
}

/// Runs `eval(0..count)` on up to `workers` threads. Results land in their
/// own slot, so completion order never affects the output. On failure the
/// lowest failing index is reported.
pub fn evaluate_concurrently<F>(count: usize, workers: usize, eval: F) -> Result<Vec<f64>, (usize, ScoreError)>
where
    F: Fn(usize) -> Result<f64, ScoreError> + Sync,
{
    let workers = workers.max(1).min(count.max(1));
    if workers == 1 {
        return (0..count)
            .map(|i| eval(i).map_err(|e| (i, e)))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<f64, ScoreError>>>> = Mutex::new(vec![None; count]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let r = eval(i);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.expect("every slot is filled").map_err(|e| (i, e)))
        .collect()
}

/// Declarative scorer selection, as accepted by the labeler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSpec {
    Planted { seed: u64 },
    Pooled { seed: u64 },
    Remote {
        endpoint: remote::Endpoint,
        #[serde(default)]
        concurrency: Concurrency,
    },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concurrent_results_are_positional() {
        let out = evaluate_concurrently(100, 8, |i| {
            std::thread::sleep(std::time::Duration::from_micros(((100 - i) * 7) as u64));
            Ok(i as f64)
        })
        .unwrap();
        assert_eq!(out, (0..100).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn lowest_failure_reported() {
        let err = evaluate_concurrently(20, 4, |i| {
            if i % 7 == 3 {
                Err(ScoreError::EmptyRetention)
            } else {
                Ok(0.0)
            }
        })
        .unwrap_err();
        assert_eq!(err.0, 3);
    }

    #[test]
    fn empty_batch() {
        assert!(evaluate_concurrently(0, 4, |_| Ok(1.0)).unwrap().is_empty());
    }
}
