//! Pooled-embedding scorer: squared distance between the mean retained
//! visual row and a fixed linear image of the mean text row.
//!
//! The projection is `A[r][c] = (2 u(r*d + c) - 1) / sqrt(d)` with
//! `u(i) = unit_interval(splitmix64(seed ^ splitmix64(i)))`, so any
//! implementation with a splitmix64 can rebuild it exactly.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array2};

use crate::error::ScoreError;
use crate::hash::{splitmix64, unit_interval};
use crate::mask::{GroupPartition, Mask};
use crate::sample::Sample;

use super::Scorer;

pub fn pooled_projection(seed: u64, d: usize) -> Array2<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    Array2::from_shape_fn((d, d), |(r, c)| {
        let u = unit_interval(splitmix64(seed ^ splitmix64((r * d + c) as u64)));
        (2.0 * u - 1.0) * scale
    })
}

/// Loss against an explicit projection.
pub fn pooled_score(sample: &Sample, mask: &Mask, projection: &Array2<f64>) -> Result<f64, ScoreError> {
    let d = sample.width();
    if mask.len() != sample.n_visual() {
        return Err(ScoreError::InvalidMask(format!(
            "mask length {} for {} visual tokens",
            mask.len(),
            sample.n_visual()
        )));
    }
    if sample.n_text() == 0 {
        return Err(ScoreError::NoText);
    }
    let kept = mask.kept_indices();
    if kept.is_empty() {
        return Err(ScoreError::EmptyRetention);
    }
    let mut visual_mean = Array1::<f64>::zeros(d);
    for &i in &kept {
        for (acc, &v) in visual_mean.iter_mut().zip(sample.visual.row(i)) {
            *acc += v as f64;
        }
    }
    visual_mean /= kept.len() as f64;
    let mut text_mean = Array1::<f64>::zeros(d);
    for row in sample.text.rows() {
        for (acc, &v) in text_mean.iter_mut().zip(row) {
            *acc += v as f64;
        }
    }
    text_mean /= sample.n_text() as f64;
    let target = projection.dot(&text_mean);
    Ok(visual_mean
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

#[derive(Debug)]
pub struct PooledScorer {
    pub seed: u64,
    projections: Mutex<HashMap<usize, Arc<Array2<f64>>>>,
}

impl PooledScorer {
    pub fn new(seed: u64) -> Self {
        PooledScorer {
            seed,
            projections: Mutex::new(HashMap::new()),
        }
    }

    pub fn projection(&self, d: usize) -> Arc<Array2<f64>> {
        self.projections
            .lock()
            .unwrap()
            .entry(d)
            .or_insert_with(|| Arc::new(pooled_projection(self.seed, d)))
            .clone()
    }

    pub fn loss(&self, sample: &Sample, mask: &Mask) -> Result<f64, ScoreError> {
        pooled_score(sample, mask, &self.projection(sample.width()))
    }
}

impl Scorer for PooledScorer {
    fn id(&self) -> String {
        format!("pooled:{}", self.seed)
    }

    fn score(&self, sample: &Sample, _partition: &GroupPartition, mask: &Mask) -> Result<f64, ScoreError> {
        self.loss(sample, mask)
    }
}
