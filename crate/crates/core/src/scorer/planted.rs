//! Synthetic scorer with a planted optimum.
//!
//! Each active group `j` has a planted member `k*(j)` and a weight
//! `w_j in (0, 1]`, both derived from a keyed hash of `(sample id, seed)`.
//! The loss is the weighted, size-normalized distance between the chosen
//! and planted positions, averaged over active groups.

use crate::error::ScoreError;
use crate::hash;
use crate::mask::{compose_mask, decompose_mask, GroupPartition, Mask};
use crate::sample::Sample;

use super::Scorer;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedInstance {
    /// Planted member position per active group.
    pub planted: Vec<usize>,
    pub weights: Vec<f64>,
}

impl PlantedInstance {
    pub fn derive(sample_id: &str, seed: u64, partition: &GroupPartition) -> Self {
        Self::derive_for_sizes(sample_id, seed, &partition.active_sizes())
    }

    /// Derivation from active group sizes alone; the dataset generator uses
    /// this before any embedding exists.
    pub fn derive_for_sizes(sample_id: &str, seed: u64, sizes: &[usize]) -> Self {
        let (planted, weights) = sizes
            .iter()
            .enumerate()
            .map(|(j, &size)| {
                let k = hash::keyed(seed, sample_id, 2 * j as u64) % size as u64;
                let w = 1.0 - hash::unit_interval(hash::keyed(seed, sample_id, 2 * j as u64 + 1));
                (k as usize, w)
            })
            .unzip();
        PlantedInstance { planted, weights }
    }

    pub fn mask(&self, partition: &GroupPartition) -> Mask {
        compose_mask(partition, &self.planted).expect("planted choices index their groups")
    }
}

pub fn planted_score(partition: &GroupPartition, mask: &Mask, inst: &PlantedInstance) -> Result<f64, ScoreError> {
    let choices = decompose_mask(partition, mask).map_err(|e| ScoreError::InvalidMask(e.to_string()))?;
    if choices.len() != inst.planted.len() {
        return Err(ScoreError::InvalidMask(format!(
            "{} active groups, planted instance has {}",
            choices.len(),
            inst.planted.len()
        )));
    }
    let total: f64 = partition
        .active_groups()
        .zip(&choices)
        .zip(inst.planted.iter().zip(&inst.weights))
        .map(|((group, &sel), (&planted, &w))| {
            let span = (group.len().saturating_sub(1)).max(1) as f64;
            w * sel.abs_diff(planted) as f64 / span
        })
        .sum();
    Ok(total / choices.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantedScorer {
    pub seed: u64,
}

impl PlantedScorer {
    pub fn new(seed: u64) -> Self {
        PlantedScorer { seed }
    }

    pub fn instance(&self, sample: &Sample, partition: &GroupPartition) -> PlantedInstance {
        PlantedInstance::derive(&sample.id, self.seed, partition)
    }
}

impl Scorer for PlantedScorer {
    fn id(&self) -> String {
        format!("planted:{}", self.seed)
    }

    fn score(&self, sample: &Sample, partition: &GroupPartition, mask: &Mask) -> Result<f64, ScoreError> {
        planted_score(partition, mask, &self.instance(sample, partition))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Group;

    fn groups(sizes: &[usize]) -> GroupPartition {
        let mut next = 0;
        let gs = sizes
            .iter()
            .enumerate()
            .map(|(j, &s)| {
                let members = (next..next + s).collect();
                next += s;
                Group { anchor_id: j, members, active: true }
            })
            .collect();
        GroupPartition::new(next, gs).unwrap()
    }

    #[test]
    fn planted_mask_scores_zero() {
        let p = groups(&[3, 4, 2]);
        let inst = PlantedInstance::derive("s", 5, &p);
        assert_eq!(planted_score(&p, &inst.mask(&p), &inst).unwrap(), 0.0);
        assert!(inst.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
    }

    #[test]
    fn one_step_hand_value() {
        let p = groups(&[3, 3]);
        let inst = PlantedInstance { planted: vec![1, 2], weights: vec![1.0, 1.0] };
        let m = compose_mask(&p, &[0, 2]).unwrap();
        assert_eq!(planted_score(&p, &m, &inst).unwrap(), 0.25);
    }

    #[test]
    fn singleton_groups_forced_zero() {
        let p = groups(&[1, 1, 1]);
        let scorer = PlantedScorer::new(3);
        let s = crate::sample::Sample::new(
            "x",
            ndarray::Array2::ones((3, 2)),
            ndarray::Array2::zeros((0, 2)),
        )
        .unwrap();
        assert_eq!(scorer.score(&s, &p, &Mask::ones(3)).unwrap(), 0.0);
    }

    #[test]
    fn invalid_mask_rejected() {
        let p = groups(&[2, 2]);
        let inst = PlantedInstance::derive("s", 1, &p);
        let err = planted_score(&p, &Mask::ones(4), &inst).unwrap_err();
        assert!(matches!(err, ScoreError::InvalidMask(_)));
    }

    #[test]
    fn unit_step_increment() {
        // each step away adds w_j / (s' (n_j - 1))
        let p = groups(&[5, 2]);
        let inst = PlantedInstance { planted: vec![0, 0], weights: vec![0.5, 1.0] };
        let mut prev = 0.0;
        for k in 1..5 {
            let l = planted_score(&p, &compose_mask(&p, &[k, 0]).unwrap(), &inst).unwrap();
            assert!((l - prev - 0.5 / (2.0 * 4.0)).abs() < 1e-15);
            prev = l;
        }
    }
}
