//! Throughput of concurrent mask evaluation.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScoreError};
use crate::evolution::{search_traced, EvoConfig};
use crate::mask::{GroupPartition, Mask};
use crate::sample::Sample;
use crate::scorer::{Concurrency, Scorer};

/// Adds a fixed sleep to every evaluation, standing in for model latency.
#[derive(Debug)]
pub struct LatencyScorer<S> {
    pub inner: S,
    pub latency: Duration,
}

impl<S: Scorer> Scorer for LatencyScorer<S> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn concurrency(&self) -> Concurrency {
        self.inner.concurrency()
    }

    fn score(&self, sample: &Sample, partition: &GroupPartition, mask: &Mask) -> Result<f64, ScoreError> {
        std::thread::sleep(self.latency);
        self.inner.score(sample, partition, mask)
    }
}

/// Logs `sample_id<TAB>bits` for every evaluation in call order.
#[derive(Debug)]
pub struct RecordingScorer<S> {
    pub inner: S,
    log: Mutex<Vec<String>>,
}

impl<S> RecordingScorer<S> {
    pub fn new(inner: S) -> Self {
        RecordingScorer { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn take_log(&self) -> Vec<String> {
        std::mem::take(&mut self.log.lock().unwrap())
    }
}

impl<S: Scorer> Scorer for RecordingScorer<S> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn concurrency(&self) -> Concurrency {
        self.inner.concurrency()
    }

    fn score(&self, sample: &Sample, partition: &GroupPartition, mask: &Mask) -> Result<f64, ScoreError> {
        let bits: String = mask.bits().iter().map(|b| char::from(b'0' + b)).collect();
        self.log.lock().unwrap().push(format!("{}\t{bits}", sample.id));
        self.inner.score(sample, partition, mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub workers: usize,
    pub evaluations: usize,
    pub seconds: f64,
    pub masks_per_second: f64,
    pub per_sample_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub samples: usize,
    pub runs: Vec<BenchRun>,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:>7} {:>11} {:>9} {:>12}\n", "workers", "evaluations", "seconds", "masks/s");
        for r in &self.runs {
            out += &format!("{:>7} {:>11} {:>9.3} {:>12.1}\n", r.workers, r.evaluations, r.seconds, r.masks_per_second);
        }
        out
    }
}

/// Runs the full search over every sample once per worker count.
pub fn bench<S: Scorer + ?Sized>(
    samples: &[Sample],
    partitions: &[GroupPartition],
    scorer: &S,
    evo: &EvoConfig,
    workers: &[usize],
) -> Result<BenchReport> {
    let mut runs = Vec::with_capacity(workers.len());
    for &w in workers {
        let cfg = EvoConfig { workers: w, ..evo.clone() };
        let mut evaluations = 0;
        let mut per_sample_seconds = Vec::with_capacity(samples.len());
        let start = Instant::now();
        for (sample, partition) in samples.iter().zip(partitions) {
            let t = Instant::now();
            evaluations += search_traced(sample, partition, scorer, &cfg)?.evaluations;
            per_sample_seconds.push(t.elapsed().as_secs_f64());
        }
        let seconds = start.elapsed().as_secs_f64();
        let masks_per_second = if seconds > 0.0 { evaluations as f64 / seconds } else { 0.0 };
        log::info!("workers {w}: {evaluations} masks in {seconds:.3}s");
        runs.push(BenchRun { workers: w, evaluations, seconds, masks_per_second, per_sample_seconds });
    }
    Ok(BenchReport { samples: samples.len(), runs })
}

/// Evaluation order of a single-worker search over every sample.
pub fn evaluation_order<S: Scorer>(
    samples: &[Sample],
    partitions: &[GroupPartition],
    scorer: S,
    evo: &EvoConfig,
) -> Result<Vec<String>> {
    let recorder = RecordingScorer::new(scorer);
    let cfg = EvoConfig { workers: 1, ..evo.clone() };
    for (sample, partition) in samples.iter().zip(partitions) {
        search_traced(sample, partition, &recorder, &cfg)?;
    }
    Ok(recorder.take_log())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::partition;
    use crate::scorer::PlantedScorer;
    use crate::synth::{generate, GenConfig};

    #[test]
    fn order_log_is_deterministic() {
        let data = generate(&GenConfig { n_samples: 2, tokens: 8, groups: 3, dim: 8, extra_anchors: 1, ..Default::default() }, 0).unwrap();
        let parts: Vec<_> = data.samples.iter().map(|s| partition(s, &data.anchors).unwrap()).collect();
        let evo = EvoConfig { iterations: 2, ..Default::default() };
        let a = evaluation_order(&data.samples, &parts, PlantedScorer::new(0), &evo).unwrap();
        let b = evaluation_order(&data.samples, &parts, PlantedScorer::new(0), &evo).unwrap();
        assert_eq!(a, b);
        assert!(a[0].starts_with("s00000\t"));
    }

    #[test]
    fn empty_dataset() {
        let r = bench(&[], &[], &PlantedScorer::new(0), &EvoConfig::default(), &[1, 2]).unwrap();
        assert_eq!(r.runs.len(), 2);
        assert!(r.runs.iter().all(|x| x.evaluations == 0));
    }
}
