//! Retention metrics for top-r selections against reference masks.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::{forward, ratio_to_r, select_top_r, CompressorConfig, CompressorParams};
use crate::error::{Error, Result};
use crate::hash;
use crate::label::LabelRecord;
use crate::mask::Mask;
use crate::sample::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Retention {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Retention {
    /// Empty predictions (or empty references) count as perfect precision
    /// (recall).
    pub fn compare(pred: &Mask, truth: &Mask) -> Self {
        let tp = pred.bits().iter().zip(truth.bits()).filter(|(&a, &b)| a == 1 && b == 1).count() as f64;
        let (np, nt) = (pred.retained() as f64, truth.retained() as f64);
        let precision = if np == 0.0 { 1.0 } else { tp / np };
        let recall = if nt == 0.0 { 1.0 } else { tp / nt };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Retention { precision, recall, f1 }
    }

    fn mean(items: impl Iterator<Item = Retention>) -> Retention {
        let mut acc = Retention::default();
        let mut k = 0.0;
        for r in items {
            acc.precision += r.precision;
            acc.recall += r.recall;
            acc.f1 += r.f1;
            k += 1.0;
        }
        if k > 0.0 {
            acc.precision /= k;
            acc.recall /= k;
            acc.f1 /= k;
        }
        acc
    }
}

/// How many tokens each sample keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Budget {
    /// As many as the sample's label keeps.
    #[default]
    Label,
    Count(usize),
    Ratio(f64),
}

impl Budget {
    pub fn resolve(&self, n: usize, label: &Mask) -> usize {
        match *self {
            Budget::Label => label.retained(),
            Budget::Count(r) => r.min(n),
            Budget::Ratio(f) => ratio_to_r(f, n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub sample_id: String,
    pub r: usize,
    pub trained: Retention,
    pub random: Retention,
    pub untrained: Retention,
    /// Fraction of ground-truth planted tokens inside the trained top-r.
    pub planted_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleEval>,
    pub trained: Retention,
    pub random: Retention,
    pub untrained: Retention,
    pub planted_recall: Option<f64>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<10} {:>9} {:>9} {:>9}", "selector", "precision", "recall", "f1").unwrap();
        for (name, r) in [("trained", self.trained), ("untrained", self.untrained), ("random", self.random)] {
            writeln!(out, "{name:<10} {:>9.4} {:>9.4} {:>9.4}", r.precision, r.recall, r.f1).unwrap();
        }
        if let Some(p) = self.planted_recall {
            writeln!(out, "planted-token recall: {p:.4}").unwrap();
        }
        writeln!(out, "samples: {}", self.samples.len()).unwrap();
        out
    }
}

/// Seeded uniform choice of `r` of `n` tokens, keyed by sample id.
pub fn random_top_r(n: usize, r: usize, seed: u64, sample_id: &str) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(hash::keyed(seed, sample_id, 1));
    let mut bits = vec![false; n];
    for i in sample_indices(&mut rng, n, r.min(n)) {
        bits[i] = true;
    }
    Mask::from_bools(&bits)
}

pub struct EvalInputs<'a> {
    pub samples: &'a [Sample],
    pub labels: &'a [LabelRecord],
    pub planted: Option<&'a [LabelRecord]>,
    pub trained: &'a CompressorParams,
    pub untrained: &'a CompressorParams,
    pub config: &'a CompressorConfig,
    pub budget: Budget,
    pub baseline_seed: u64,
}

fn by_id(records: &[LabelRecord]) -> HashMap<&str, &LabelRecord> {
    records.iter().map(|r| (r.sample_id.as_str(), r)).collect()
}

/// Scores trained, untrained and random top-r selections against the labels.
/// Samples need the compressor's width already.
pub fn evaluate(inputs: &EvalInputs<'_>) -> Result<EvalReport> {
    let labels = by_id(inputs.labels);
    let planted = inputs.planted.map(by_id);
    let mut samples = Vec::with_capacity(inputs.samples.len());
    for sample in inputs.samples {
        let label = labels
            .get(sample.id.as_str())
            .ok_or_else(|| Error::LabelMismatch(format!("no label for sample {:?}", sample.id)))?;
        let n = sample.n_visual();
        if label.mask.len() != n {
            return Err(Error::LabelMismatch(format!("label for {:?} has length {}", sample.id, label.mask.len())));
        }
        let r = inputs.budget.resolve(n, &label.mask);
        let trained = select_top_r(&forward(sample, inputs.trained, inputs.config)?.probs, r)?;
        let untrained = select_top_r(&forward(sample, inputs.untrained, inputs.config)?.probs, r)?;
        let random = random_top_r(n, r, inputs.baseline_seed, &sample.id);
        let planted_recall = match &planted {
            Some(map) => {
                let truth = map
                    .get(sample.id.as_str())
                    .ok_or_else(|| Error::LabelMismatch(format!("no planted mask for {:?}", sample.id)))?;
                Some(Retention::compare(&trained, &truth.mask).recall)
            }
            None => None,
        };
        samples.push(SampleEval {
            sample_id: sample.id.clone(),
            r,
            trained: Retention::compare(&trained, &label.mask),
            random: Retention::compare(&random, &label.mask),
            untrained: Retention::compare(&untrained, &label.mask),
            planted_recall,
        });
    }
    let planted_recall = planted.as_ref().map(|_| {
        samples.iter().filter_map(|s| s.planted_recall).sum::<f64>() / samples.len().max(1) as f64
    });
    Ok(EvalReport {
        trained: Retention::mean(samples.iter().map(|s| s.trained)),
        random: Retention::mean(samples.iter().map(|s| s.random)),
        untrained: Retention::mean(samples.iter().map(|s| s.untrained)),
        planted_recall,
        samples,
    })
}
