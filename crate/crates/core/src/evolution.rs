//! Elitist evolutionary search over one-hot-per-group retention masks.
//!
//! Candidates are handled internally as per-group choice vectors (one member
//! position per active group) and composed into masks only for scoring.

use std::collections::HashSet;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash;
use crate::label::LabelRecord;
use crate::mask::{compose_mask, decompose_mask, GroupPartition, Mask};
use crate::sample::Sample;
use crate::scorer::Scorer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvoConfig {
    pub population_size: usize,
    pub parent_count: usize,
    pub iterations: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    pub seed: u64,
    /// Rejected duplicates tolerated per generation before duplicates are
    /// accepted. `None` means `100 * population_size`.
    pub max_dedup_attempts: Option<usize>,
    /// Concurrent fitness evaluations.
    pub workers: usize,
}

impl Default for EvoConfig {
    fn default() -> Self {
        EvoConfig {
            population_size: 48,
            parent_count: 12,
            iterations: 10,
            crossover_prob: 0.9,
            mutation_prob: 0.2,
            seed: 0,
            max_dedup_attempts: None,
            workers: 1,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 {
            return Err(Error::InvalidConfig("population size must be at least 1".into()));
        }
        if self.parent_count == 0 || self.parent_count > self.population_size {
            return Err(Error::InvalidConfig(format!(
                "parent count {} must lie in 1..={}",
                self.parent_count, self.population_size
            )));
        }
        for (name, p) in [("crossover", self.crossover_prob), ("mutation", self.mutation_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn dedup_limit(&self) -> usize {
        self.max_dedup_attempts.unwrap_or(100 * self.population_size)
    }
}

/// Per-search generator; mixes the sample id into the seed so samples
/// sharing a config explore independently.
pub fn search_rng(seed: u64, sample_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash::keyed(seed, sample_id, 0))
}

fn random_choices<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Vec<usize> {
    sizes.iter().map(|&s| rng.random_range(0..s)).collect()
}

/// `q` random masks, each with one uniform choice per active group.
pub fn init_population<R: Rng + ?Sized>(partition: &GroupPartition, q: usize, rng: &mut R) -> Vec<Mask> {
    let sizes = partition.active_sizes();
    (0..q)
        .map(|_| compose_mask(partition, &random_choices(&sizes, rng)).expect("choices in range"))
        .collect()
}

/// First `floor(s'/2)` active sub-masks from `a`, the rest from `b`.
pub fn crossover_choices(a: &[usize], b: &[usize]) -> Vec<usize> {
    debug_assert_eq!(a.len(), b.len());
    let half = a.len() / 2;
    a[..half].iter().chain(&b[half..]).copied().collect()
}

pub fn crossover(a: &Mask, b: &Mask, partition: &GroupPartition) -> Result<Mask> {
    let ca = decompose_mask(partition, a).map_err(incompatible)?;
    let cb = decompose_mask(partition, b).map_err(incompatible)?;
    compose_mask(partition, &crossover_choices(&ca, &cb))
}

fn incompatible(e: Error) -> Error {
    Error::InvalidPartition(format!("mask incompatible with partition: {e}"))
}

/// Moves each triggered group's choice one position left or right.
///
/// Interior positions pick a direction uniformly; boundary positions take
/// the only valid direction; size-1 groups never move.
pub fn mutate_choices<R: Rng + ?Sized>(choices: &mut [usize], sizes: &[usize], prob: f64, rng: &mut R) {
    for (k, &size) in choices.iter_mut().zip(sizes) {
        if rng.random::<f64>() >= prob || size < 2 {
            continue;
        }
        *k = if *k == 0 {
            1
        } else if *k == size - 1 {
            *k - 1
        } else if rng.random::<bool>() {
            *k + 1
        } else {
            *k - 1
        };
    }
}

pub fn mutate<R: Rng + ?Sized>(mask: &Mask, partition: &GroupPartition, prob: f64, rng: &mut R) -> Result<Mask> {
    let mut choices = decompose_mask(partition, mask)?;
    mutate_choices(&mut choices, &partition.active_sizes(), prob, rng);
    compose_mask(partition, &choices)
}

/// Indices of the `p` smallest losses, ties to the earlier position.
pub fn top_p_indices(losses: &[f64], p: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    order.truncate(p);
    order
}

pub fn select_parents(candidates: &[Mask], losses: &[f64], p: usize) -> Result<Vec<Mask>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if candidates.len() != losses.len() {
        return Err(Error::DimensionMismatch {
            what: "losses",
            expected: candidates.len(),
            found: losses.len(),
        });
    }
    Ok(top_p_indices(losses, p)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    /// 0 is the initial population.
    pub iteration: usize,
    pub best_loss: f64,
    pub evaluations: usize,
    pub duplicates_accepted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub record: LabelRecord,
    pub trace: Vec<IterationStats>,
    pub evaluations: usize,
}

fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    sample: &Sample,
    partition: &GroupPartition,
    population: &[Vec<usize>],
    workers: usize,
    offset: usize,
) -> Result<Vec<f64>> {
    let masks: Vec<Mask> = population
        .iter()
        .map(|c| compose_mask(partition, c))
        .collect::<Result<_>>()?;
    let losses = scorer
        .score_batch(sample, partition, &masks, workers)
        .map_err(|(i, source)| Error::Scorer {
            sample: sample.id.clone(),
            candidate: offset + i,
            source,
        })?;
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::Scorer {
            sample: sample.id.clone(),
            candidate: offset + i,
            source: crate::error::ScoreError::Malformed(format!("non-finite loss {}", losses[i])),
        });
    }
    Ok(losses)
}

pub fn search<S: Scorer + ?Sized>(
    sample: &Sample,
    partition: &GroupPartition,
    scorer: &S,
    cfg: &EvoConfig,
) -> Result<LabelRecord> {
    search_traced(sample, partition, scorer, cfg).map(|o| o.record)
}

/// Full search with per-generation statistics.
pub fn search_traced<S: Scorer + ?Sized>(
    sample: &Sample,
    partition: &GroupPartition,
    scorer: &S,
    cfg: &EvoConfig,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if partition.n_tokens() != sample.n_visual() {
        return Err(Error::DimensionMismatch {
            what: "partition size",
            expected: sample.n_visual(),
            found: partition.n_tokens(),
        });
    }
    let q = cfg.population_size;
    let p = cfg.parent_count;
    let sizes = partition.active_sizes();
    let mut rng = search_rng(cfg.seed, &sample.id);

    let population: Vec<Vec<usize>> = (0..q).map(|_| random_choices(&sizes, &mut rng)).collect();
    let mut seen: HashSet<Vec<usize>> = population.iter().cloned().collect();
    let losses = evaluate(scorer, sample, partition, &population, cfg.workers, 0)?;
    let mut evaluations = q;

    let mut parents: Vec<(Vec<usize>, f64)> = top_p_indices(&losses, p)
        .into_iter()
        .map(|i| (population[i].clone(), losses[i]))
        .collect();
    let mut trace = vec![IterationStats {
        iteration: 0,
        best_loss: parents[0].1,
        evaluations,
        duplicates_accepted: 0,
    }];
    debug!("{}: iteration 0 best {:.6} evaluations {}", sample.id, parents[0].1, evaluations);

    for iteration in 1..=cfg.iterations {
        let mut children: Vec<Vec<usize>> = Vec::with_capacity(q);
        let mut rejected = 0;
        let mut duplicates_accepted = 0;
        while children.len() < q {
            let parent = &parents[rng.random_range(0..parents.len())].0;
            let mut child = if rng.random::<f64>() < cfg.crossover_prob {
                let other = &parents[rng.random_range(0..parents.len())].0;
                crossover_choices(parent, other)
            } else {
                parent.clone()
            };
            mutate_choices(&mut child, &sizes, cfg.mutation_prob, &mut rng);
            if seen.insert(child.clone()) {
                children.push(child);
            } else if rejected >= cfg.dedup_limit() {
                duplicates_accepted += 1;
                children.push(child);
            } else {
                rejected += 1;
            }
        }
        let child_losses = evaluate(scorer, sample, partition, &children, cfg.workers, evaluations)?;
        evaluations += q;

        let pool: Vec<(Vec<usize>, f64)> = parents
            .drain(..)
            .chain(children.into_iter().zip(child_losses))
            .collect();
        let pool_losses: Vec<f64> = pool.iter().map(|(_, l)| *l).collect();
        parents = top_p_indices(&pool_losses, p)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect();
        trace.push(IterationStats {
            iteration,
            best_loss: parents[0].1,
            evaluations,
            duplicates_accepted,
        });
        debug!(
            "{}: iteration {iteration} best {:.6} evaluations {evaluations}",
            sample.id, parents[0].1
        );
    }

    let (best, loss) = parents.swap_remove(0);
    info!("{}: best loss {loss:.6} after {evaluations} evaluations", sample.id);
    Ok(SearchOutcome {
        record: LabelRecord {
            sample_id: sample.id.clone(),
            mask: compose_mask(partition, &best)?,
            loss,
            partition_digest: partition.digest(),
            scorer_id: scorer.id(),
            seed: cfg.seed,
        },
        trace,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Group;
    use crate::scorer::{brute_force_best, PlantedScorer, DEFAULT_SPACE_CAP};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn sized(sizes: &[usize]) -> GroupPartition {
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
        GroupPartition::new(next, groups).unwrap()
    }

    fn sample_for(p: &GroupPartition, id: &str) -> Sample {
        Sample::new(id, Array2::ones((p.n_tokens(), 2)), Array2::ones((1, 2))).unwrap()
    }

    #[test]
    fn init_population_one_hot() {
        let p = sized(&[2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pop = init_population(&p, 48, &mut rng);
        assert_eq!(pop.len(), 48);
        for m in &pop {
            m.validate_against(&p).unwrap();
        }
        let again = init_population(&p, 48, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(pop, again);
    }

    #[test]
    fn init_population_forced() {
        let p = sized(&[1, 1, 1]);
        let pop = init_population(&p, 5, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(pop.iter().all(|m| m == &Mask::ones(3)));
    }

    #[test]
    fn crossover_halves() {
        assert_eq!(crossover_choices(&[1, 1, 1, 1], &[2, 2, 2, 2]), vec![1, 1, 2, 2]);
        assert_eq!(crossover_choices(&[1], &[2]), vec![2]);
        assert_eq!(crossover_choices(&[1, 1, 1], &[2, 2, 2]), vec![1, 2, 2]);
        let p = sized(&[3, 3, 3, 3]);
        let a = compose_mask(&p, &[0, 0, 0, 0]).unwrap();
        let b = compose_mask(&p, &[2, 2, 2, 2]).unwrap();
        let child = crossover(&a, &b, &p).unwrap();
        assert_eq!(decompose_mask(&p, &child).unwrap(), vec![0, 0, 2, 2]);
    }

    #[test]
    fn crossover_rejects_foreign_masks() {
        let p = sized(&[2, 2]);
        let other = Mask::ones(4);
        let a = compose_mask(&p, &[0, 0]).unwrap();
        assert!(crossover(&a, &other, &p).is_err());
    }

    #[test]
    fn mutation_interior_both_directions() {
        let mut left = 0;
        let mut right = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..4000 {
            let mut c = vec![1];
            mutate_choices(&mut c, &[3], 1.0, &mut rng);
            match c[0] {
                0 => left += 1,
                2 => right += 1,
                other => panic!("moved to {other}"),
            }
        }
        let frac = left as f64 / 4000.0;
        assert!((frac - 0.5).abs() < 0.04, "left fraction {frac}");
        assert_eq!(left + right, 4000);
    }

    #[test]
    fn mutation_boundaries_and_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = vec![0, 1, 0];
        mutate_choices(&mut c, &[2, 2, 1], 1.0, &mut rng);
        assert_eq!(c, vec![1, 0, 0]);
        let mut c = vec![2];
        mutate_choices(&mut c, &[3], 0.0, &mut rng);
        assert_eq!(c, vec![2]);
    }

    #[test]
    fn select_parents_cases() {
        let m: Vec<Mask> = (0..3).map(|i| Mask::from_bools(&[i == 0, i == 1, i == 2])).collect();
        let sel = select_parents(&m, &[0.5, 0.2, 0.9], 2).unwrap();
        assert_eq!(sel, vec![m[1].clone(), m[0].clone()]);
        let sel = select_parents(&m[..2], &[0.3, 0.3], 1).unwrap();
        assert_eq!(sel, vec![m[0].clone()]);
        assert_eq!(select_parents(&m, &[1.0, 2.0, 3.0], 5).unwrap().len(), 3);
        assert!(matches!(select_parents(&[], &[], 1), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn one_point_space() {
        let p = sized(&[1]);
        let s = sample_for(&p, "one");
        let outcome = search_traced(&s, &p, &PlantedScorer::new(1), &EvoConfig::default()).unwrap();
        assert_eq!(outcome.record.mask, Mask::ones(1));
        assert_eq!(outcome.record.loss, 0.0);
        assert_eq!(outcome.evaluations, 48 * 11);
    }

    #[test]
    fn finds_optimum_of_27_point_space() {
        let p = sized(&[3, 3, 3]);
        let scorer = PlantedScorer::new(4);
        for k in 0..5 {
            let s = sample_for(&p, &format!("s{k}"));
            let best = brute_force_best(&s, &p, &scorer, DEFAULT_SPACE_CAP).unwrap();
            let label = search(&s, &p, &scorer, &EvoConfig { seed: k, ..Default::default() }).unwrap();
            assert_eq!(label.mask, best.mask);
            assert_eq!(label.loss, best.loss);
        }
    }

    #[test]
    fn concurrency_does_not_change_result() {
        let p = sized(&[4, 5, 3, 6]);
        let s = sample_for(&p, "c");
        let scorer = PlantedScorer::new(2);
        let serial = search(&s, &p, &scorer, &EvoConfig { seed: 3, ..Default::default() }).unwrap();
        let parallel =
            search(&s, &p, &scorer, &EvoConfig { seed: 3, workers: 4, ..Default::default() }).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn config_validation() {
        assert!(EvoConfig { parent_count: 49, ..Default::default() }.validate().is_err());
        assert!(EvoConfig { parent_count: 0, ..Default::default() }.validate().is_err());
        assert!(EvoConfig { mutation_prob: 1.5, ..Default::default() }.validate().is_err());
        assert!(EvoConfig::default().validate().is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn operators_stay_valid(sizes in prop::collection::vec(1usize..6, 1..7), seed in any::<u64>()) {
            let p = sized(&sizes);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pop = init_population(&p, 4, &mut rng);
            let child = crossover(&pop[0], &pop[1], &p).unwrap();
            child.validate_against(&p).unwrap();
            let mutated = mutate(&child, &p, 0.5, &mut rng).unwrap();
            mutated.validate_against(&p).unwrap();
            prop_assert_eq!(mutated.retained(), p.active_count());
        }

        #[test]
        fn elitism_holds(sizes in prop::collection::vec(1usize..5, 1..6), seed in any::<u64>()) {
            let p = sized(&sizes);
            let s = sample_for(&p, "e");
            let cfg = EvoConfig { seed, iterations: 6, population_size: 12, parent_count: 4, ..Default::default() };
            let out = search_traced(&s, &p, &PlantedScorer::new(seed), &cfg).unwrap();
            prop_assert!(out.trace.windows(2).all(|w| w[1].best_loss <= w[0].best_loss));
            prop_assert_eq!(out.record.loss, out.trace.last().unwrap().best_loss);
        }
    }
}
