use crate::error::{Error, Result};
use crate::mask::{compose_mask, GroupPartition, Mask};
use crate::sample::Sample;

use super::Scorer;

pub const DEFAULT_SPACE_CAP: u128 = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub mask: Mask,
    pub loss: f64,
    pub evaluations: usize,
}

/// Exhaustive search over every valid mask.
///
/// Masks are visited in lexicographic order of their per-group choices (the
/// last active group varies fastest); the first mask attaining the minimum
/// wins.
pub fn brute_force_best<S: Scorer + ?Sized>(
    sample: &Sample,
    partition: &GroupPartition,
    scorer: &S,
    cap: u128,
) -> Result<BruteForceResult> {
    let size = partition.space_size();
    if size > cap {
        return Err(Error::SearchSpaceTooLarge { size, cap });
    }
    let sizes = partition.active_sizes();
    let mut choices = vec![0usize; sizes.len()];
    let mut best: Option<(Mask, f64)> = None;
    let mut evaluations = 0;
    loop {
        let mask = compose_mask(partition, &choices)?;
        let loss = scorer
            .score(sample, partition, &mask)
            .map_err(|source| Error::Scorer {
                sample: sample.id.clone(),
                candidate: evaluations,
                source,
            })?;
        evaluations += 1;
        if best.as_ref().is_none_or(|(_, b)| loss < *b) {
            best = Some((mask, loss));
        }
        // odometer increment, last position fastest
        let mut pos = sizes.len();
        loop {
            if pos == 0 {
                let (mask, loss) = best.expect("at least one mask evaluated");
                return Ok(BruteForceResult { mask, loss, evaluations });
            }
            pos -= 1;
            choices[pos] += 1;
            if choices[pos] < sizes[pos] {
                break;
            }
            choices[pos] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Group;
    use crate::scorer::PlantedScorer;
    use ndarray::Array2;

    fn setup(sizes: &[usize]) -> (Sample, GroupPartition) {
        let mut next = 0;
        let groups = sizes
            .iter()
            .enumerate()
            .map(|(j, &s)| {
                let members = (next..next + s).collect();
                next += s;
                Group { anchor_id: j, members, active: true }
            })
            .collect();
        let p = GroupPartition::new(next, groups).unwrap();
        let s = Sample::new("bf", Array2::ones((next, 2)), Array2::ones((1, 2))).unwrap();
        (s, p)
    }

    #[test]
    fn finds_planted_mask() {
        let (s, p) = setup(&[3, 3, 3]);
        let scorer = PlantedScorer::new(11);
        let r = brute_force_best(&s, &p, &scorer, DEFAULT_SPACE_CAP).unwrap();
        assert_eq!(r.mask, scorer.instance(&s, &p).mask(&p));
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.evaluations, 27);
    }

    #[test]
    fn evaluation_count_is_product() {
        let (s, p) = setup(&[2, 3]);
        let r = brute_force_best(&s, &p, &PlantedScorer::new(0), DEFAULT_SPACE_CAP).unwrap();
        assert_eq!(r.evaluations, 6);
    }

    #[test]
    fn cap_enforced() {
        let (s, p) = setup(&[10, 10, 10, 11]);
        let err = brute_force_best(&s, &p, &PlantedScorer::new(0), DEFAULT_SPACE_CAP).unwrap_err();
        assert!(matches!(err, Error::SearchSpaceTooLarge { size: 11_000, .. }));
    }
}
