//! Seeded synthetic datasets with known structure.
//!
//! Every visual token is an anchor plus bounded noise, so nearest-anchor
//! grouping recovers the generating groups exactly whenever the noise radius
//! stays below one half (anchors are orthonormal). In the planted family the
//! token the planted scorer prefers in each group also carries a salience
//! direction orthogonal to every anchor; with `text_keyed` that direction is
//! instead a key named by the sample's text, and a decoy in each group
//! carries a different key.

use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelRecord;
use crate::mask::{Group, GroupPartition};
use crate::sample::{AnchorSet, Sample};
use crate::scorer::PlantedInstance;

/// Scorer id written into ground-truth planted records.
pub const GROUND_TRUTH_ID: &str = "ground-truth";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Planted,
    Pooled,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planted" => Ok(Family::Planted),
            "pooled" => Ok(Family::Pooled),
            _ => Err(Error::InvalidConfig(format!("unknown family {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub family: Family,
    pub n_samples: usize,
    /// Visual tokens per sample.
    pub tokens: usize,
    /// Groups per sample.
    pub groups: usize,
    pub dim: usize,
    pub text_tokens: usize,
    /// Anchors beyond those any sample uses.
    pub extra_anchors: usize,
    /// Noise radius; must stay below 0.5.
    pub noise: f64,
    /// Length of the salience (or key) offset on planted tokens.
    pub salience: f64,
    pub text_keyed: bool,
    /// Number of key directions in text-keyed mode.
    pub keys: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            family: Family::Planted,
            n_samples: 512,
            tokens: 24,
            groups: 6,
            dim: 64,
            text_tokens: 4,
            extra_anchors: 6,
            noise: 0.3,
            salience: 1.0,
            text_keyed: false,
            keys: 4,
            seed: 0,
        }
    }
}

impl GenConfig {
    fn directions(&self) -> usize {
        let extra = if self.text_keyed { self.keys } else { 1 };
        self.groups + self.extra_anchors + extra
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::InvalidConfig("groups must be at least 1".into()));
        }
        if self.tokens < self.groups {
            return Err(Error::InvalidConfig(format!(
                "{} tokens cannot fill {} groups",
                self.tokens, self.groups
            )));
        }
        if self.dim < self.directions() {
            return Err(Error::InvalidConfig(format!(
                "dim {} too small for {} orthogonal directions",
                self.dim,
                self.directions()
            )));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::InvalidConfig(format!("noise radius {} outside [0, 0.5)", self.noise)));
        }
        if !(self.salience >= 0.0) {
            return Err(Error::InvalidConfig("salience must be non-negative".into()));
        }
        if self.text_keyed && (self.keys < 2 || self.text_tokens == 0) {
            return Err(Error::InvalidConfig("text-keyed data needs at least 2 keys and 1 text token".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub anchors: AnchorSet,
    pub samples: Vec<Sample>,
    /// Generating partition per sample (all groups active).
    pub partitions: Vec<GroupPartition>,
    /// Planted-optimum records per sample (planted family only).
    pub planted: Vec<LabelRecord>,
    /// Key directions (text-keyed mode only), one row per key.
    pub keys: Option<Array2<f32>>,
    /// `(key, decoy key)` per sample (text-keyed mode only).
    pub sample_keys: Vec<(usize, usize)>,
}

/// Rows of a random orthonormal set (Gram-Schmidt on Gaussian draws).
pub fn orthonormal_rows<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((count, dim));
    let mut i = 0;
    while i < count {
        let mut v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for j in 0..i {
            let u = out.row(j);
            let proj = v.dot(&u);
            v.scaled_add(-proj, &u);
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-6 {
            continue;
        }
        out.row_mut(i).assign(&(v / norm));
        i += 1;
    }
    out
}

fn noise_vector<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> Array1<f64> {
    let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = v.dot(&v).sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>();
    v * (r / norm)
}

/// Group sizes summing to `tokens`, each at least one.
fn group_sizes<R: Rng + ?Sized>(tokens: usize, groups: usize, rng: &mut R) -> Vec<usize> {
    let mut sizes = vec![1; groups];
    for _ in groups..tokens {
        sizes[rng.random_range(0..groups)] += 1;
    }
    sizes
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:05}")
}

/// Generates a dataset. `planted_seed` must equal the planted scorer's seed
/// for the salient tokens to coincide with the scorer's optimum.
pub fn generate(cfg: &GenConfig, planted_seed: u64) -> Result<GeneratedData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_anchors = cfg.groups + cfg.extra_anchors;
    let dirs = orthonormal_rows(cfg.directions(), cfg.dim, &mut rng);
    let anchors64 = dirs.slice(ndarray::s![..n_anchors, ..]).to_owned();
    let special = dirs.slice(ndarray::s![n_anchors.., ..]).to_owned();
    let anchors = AnchorSet::new(anchors64.mapv(|v| v as f32))?;

    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut partitions = Vec::with_capacity(cfg.n_samples);
    let mut planted = Vec::new();
    let mut sample_keys = Vec::new();
    for s in 0..cfg.n_samples {
        let id = sample_id(s);
        let chosen = sample_indices(&mut rng, n_anchors, cfg.groups).into_vec();
        let sizes = group_sizes(cfg.tokens, cfg.groups, &mut rng);
        let mut positions: Vec<usize> = (0..cfg.tokens).collect();
        positions.shuffle(&mut rng);
        let mut groups = Vec::with_capacity(cfg.groups);
        let mut start = 0;
        for (&anchor, &size) in chosen.iter().zip(&sizes) {
            groups.push(Group { anchor_id: anchor, members: positions[start..start + size].to_vec(), active: true });
            start += size;
        }
        let partition = GroupPartition::new(cfg.tokens, groups)?;

        let mut visual = Array2::<f64>::zeros((cfg.tokens, cfg.dim));
        for g in partition.groups() {
            for &i in &g.members {
                let row = &anchors64.row(g.anchor_id) + &noise_vector(cfg.dim, cfg.noise, &mut rng);
                visual.row_mut(i).assign(&row);
            }
        }
        let mut text = Array2::<f64>::zeros((cfg.text_tokens, cfg.dim));
        for mut row in text.rows_mut() {
            row.assign(&noise_vector(cfg.dim, 1.0, &mut rng));
        }

        if cfg.family == Family::Planted {
            let inst = PlantedInstance::derive_for_sizes(&id, planted_seed, &partition.active_sizes());
            let key = if cfg.text_keyed {
                let q = rng.random_range(0..cfg.keys);
                let decoy = (q + rng.random_range(1..cfg.keys)) % cfg.keys;
                text.row_mut(0).scaled_add(1.0, &special.row(q));
                sample_keys.push((q, decoy));
                Some((q, decoy))
            } else {
                None
            };
            for (g, &k) in partition.groups().iter().zip(&inst.planted) {
                let target = g.members[k];
                match key {
                    None => visual.row_mut(target).scaled_add(cfg.salience, &special.row(0)),
                    Some((q, decoy)) => {
                        visual.row_mut(target).scaled_add(cfg.salience, &special.row(q));
                        if g.len() > 1 {
                            let other = g.members[(k + 1 + rng.random_range(0..g.len() - 1)) % g.len()];
                            visual.row_mut(other).scaled_add(cfg.salience, &special.row(decoy));
                        }
                    }
                }
            }
            planted.push(LabelRecord {
                sample_id: id.clone(),
                mask: inst.mask(&partition),
                loss: 0.0,
                partition_digest: partition.digest(),
                scorer_id: GROUND_TRUTH_ID.to_string(),
                seed: planted_seed,
            });
        }
        samples.push(Sample::new(id, visual.mapv(|v| v as f32), text.mapv(|v| v as f32))?);
        partitions.push(partition);
    }
    let keys = cfg.text_keyed.then(|| special.mapv(|v| v as f32));
    Ok(GeneratedData { anchors, samples, partitions, planted, keys, sample_keys })
}

/// Copy of `sample` whose text is exactly one key direction.
pub fn rekey_text(sample: &Sample, key: ndarray::ArrayView1<'_, f32>) -> Sample {
    let mut out = sample.clone();
    for mut row in out.text.rows_mut() {
        row.fill(0.0);
    }
    if out.text.nrows() > 0 {
        out.text.row_mut(0).assign(&key);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::partition;

    fn small() -> GenConfig {
        GenConfig { n_samples: 20, tokens: 12, groups: 4, dim: 16, seed: 3, ..Default::default() }
    }

    #[test]
    fn groups_are_recovered() {
        let data = generate(&small(), 3).unwrap();
        for (s, truth) in data.samples.iter().zip(&data.partitions) {
            assert_eq!(&partition(s, &data.anchors).unwrap(), truth);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small(), 3).unwrap();
        let b = generate(&small(), 3).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.planted, b.planted);
    }

    #[test]
    fn planted_records_match_scorer() {
        use crate::scorer::{PlantedScorer, Scorer};
        let data = generate(&small(), 9).unwrap();
        let scorer = PlantedScorer::new(9);
        for ((s, p), rec) in data.samples.iter().zip(&data.partitions).zip(&data.planted) {
            assert_eq!(scorer.score(s, p, &rec.mask).unwrap(), 0.0);
            rec.validate(p).unwrap();
        }
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            GenConfig { groups: 0, ..small() },
            GenConfig { tokens: 2, ..small() },
            GenConfig { dim: 4, ..small() },
            GenConfig { noise: 0.5, ..small() },
        ] {
            assert!(generate(&cfg, 0).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = orthonormal_rows(5, 8, &mut rng);
        let gram = m.dot(&m.t());
        for i in 0..5 {
            for j in 0..5 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn text_keyed_generation() {
        let cfg = GenConfig { text_keyed: true, ..small() };
        let data = generate(&cfg, 3).unwrap();
        assert_eq!(data.keys.as_ref().unwrap().nrows(), 4);
        assert_eq!(data.sample_keys.len(), 20);
        assert!(data.sample_keys.iter().all(|(q, d)| q != d));
        for (s, truth) in data.samples.iter().zip(&data.partitions) {
            assert_eq!(&partition(s, &data.anchors).unwrap(), truth);
        }
    }
}
