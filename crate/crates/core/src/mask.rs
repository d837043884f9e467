//! Group partitions, retention masks and the composition of per-group
//! one-hot sub-masks into a global mask.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::sample::Sample;

/// Visual tokens sharing one nearest anchor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub anchor_id: usize,
    /// Visual-token indices, sorted ascending.
    pub members: Vec<usize>,
    pub active: bool,
}

impl Group {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Disjoint cover of `0..n` by groups, in canonical order (by smallest member).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    n: usize,
    groups: Vec<Group>,
}

impl GroupPartition {
    /// Canonicalizes member and group order, then checks the partition invariants.
    pub fn new(n: usize, mut groups: Vec<Group>) -> Result<Self> {
        for g in &mut groups {
            g.members.sort_unstable();
            if g.members.is_empty() {
                return Err(Error::InvalidPartition("empty group".into()));
            }
        }
        groups.sort_by_key(|g| g.members[0]);
        let mut seen = vec![false; n];
        for g in &groups {
            for &i in &g.members {
                if i >= n {
                    return Err(Error::InvalidPartition(format!(
                        "token index {i} out of range for n = {n}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidPartition(format!(
                        "token {i} appears in more than one group"
                    )));
                }
            }
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(Error::InvalidPartition(format!("token {i} is not covered")));
        }
        if !groups.iter().any(|g| g.active) {
            return Err(Error::InvalidPartition("no active group".into()));
        }
        Ok(GroupPartition { n, groups })
    }

    pub fn n_tokens(&self) -> usize {
        self.n
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn active_groups(&self) -> impl Iterator<Item = &Group> + '_ {
        self.groups.iter().filter(|g| g.active)
    }

    pub fn active_count(&self) -> usize {
        self.active_groups().count()
    }

    /// Sizes of the active groups in canonical order.
    pub fn active_sizes(&self) -> Vec<usize> {
        self.active_groups().map(Group::len).collect()
    }

    /// Number of valid masks (product of active group sizes).
    pub fn space_size(&self) -> u128 {
        self.active_groups()
            .map(|g| g.len() as u128)
            .fold(1u128, |acc, s| acc.saturating_mul(s))
    }

    /// Same membership with new active flags.
    pub fn with_active(&self, active: &[bool]) -> Result<Self> {
        if active.len() != self.groups.len() {
            return Err(Error::DimensionMismatch {
                what: "active flags",
                expected: self.groups.len(),
                found: active.len(),
            });
        }
        let groups = self
            .groups
            .iter()
            .zip(active)
            .map(|(g, &a)| Group { active: a, ..g.clone() })
            .collect();
        GroupPartition::new(self.n, groups)
    }

    /// Hex SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("partition serializes");
        sha256_hex(&json)
    }
}

/// Binary retention vector over the visual tokens of one sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct Mask {
    bits: Vec<u8>,
}

impl TryFrom<Vec<u8>> for Mask {
    type Error = Error;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        Mask::from_bits(bits)
    }
}

impl From<Mask> for Vec<u8> {
    fn from(m: Mask) -> Self {
        m.bits
    }
}

impl Mask {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidMask(format!("bit value {b} is not 0 or 1")));
        }
        Ok(Mask { bits })
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Mask {
            bits: bits.iter().map(|&b| b as u8).collect(),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Mask { bits: vec![0; n] }
    }

    pub fn ones(n: usize) -> Self {
        Mask { bits: vec![1; n] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    pub fn retained(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (b == 1).then_some(i))
            .collect()
    }

    /// Checks one-hot-per-active-group and zero on inactive groups.
    pub fn validate_against(&self, partition: &GroupPartition) -> Result<()> {
        decompose_mask(partition, self).map(|_| ())
    }
}

/// Places a single 1 at the chosen member of each active group.
///
/// `choices[j]` is a position within the `j`-th active group's member list.
pub fn compose_mask(partition: &GroupPartition, choices: &[usize]) -> Result<Mask> {
    let active = partition.active_count();
    if choices.len() != active {
        return Err(Error::DimensionMismatch {
            what: "choices",
            expected: active,
            found: choices.len(),
        });
    }
    let mut bits = vec![0u8; partition.n_tokens()];
    for (j, (group, &k)) in partition.active_groups().zip(choices).enumerate() {
        let &token = group.members.get(k).ok_or(Error::ChoiceOutOfRange {
            group: j,
            choice: k,
            size: group.len(),
        })?;
        bits[token] = 1;
    }
    Ok(Mask { bits })
}

/// Reads back the chosen member position of every active group.
pub fn decompose_mask(partition: &GroupPartition, mask: &Mask) -> Result<Vec<usize>> {
    if mask.len() != partition.n_tokens() {
        return Err(Error::DimensionMismatch {
            what: "mask length",
            expected: partition.n_tokens(),
            found: mask.len(),
        });
    }
    let mut choices = Vec::with_capacity(partition.active_count());
    for (j, group) in partition.groups().iter().enumerate() {
        let set: Vec<usize> = group
            .members
            .iter()
            .enumerate()
            .filter_map(|(k, &i)| mask.get(i).then_some(k))
            .collect();
        match (group.active, set.as_slice()) {
            (true, [k]) => choices.push(*k),
            (false, []) => {}
            (true, _) => {
                return Err(Error::InvalidMask(format!(
                    "active group {j} has {} retained tokens, expected 1",
                    set.len()
                )))
            }
            (false, _) => {
                return Err(Error::InvalidMask(format!(
                    "inactive group {j} has {} retained tokens",
                    set.len()
                )))
            }
        }
    }
    Ok(choices)
}

/// Keeps the visual rows whose bit is set, in original order.
pub fn apply_mask(sample: &Sample, mask: &Mask) -> Result<(Array2<f32>, Vec<usize>)> {
    if mask.len() != sample.n_visual() {
        return Err(Error::DimensionMismatch {
            what: "mask length",
            expected: sample.n_visual(),
            found: mask.len(),
        });
    }
    let kept = mask.kept_indices();
    let reduced = sample.visual.select(ndarray::Axis(0), &kept);
    Ok((reduced, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_groups(active: [bool; 2]) -> GroupPartition {
        GroupPartition::new(
            4,
            vec![
                Group { anchor_id: 0, members: vec![0, 1], active: active[0] },
                Group { anchor_id: 1, members: vec![2, 3], active: active[1] },
            ],
        )
        .unwrap()
    }

    #[test]
    fn compose_places_chosen_members() {
        let m = compose_mask(&two_groups([true, true]), &[1, 0]).unwrap();
        assert_eq!(m.bits(), &[0, 1, 1, 0]);
    }

    #[test]
    fn compose_singleton() {
        let p = GroupPartition::new(1, vec![Group { anchor_id: 0, members: vec![0], active: true }])
            .unwrap();
        assert_eq!(compose_mask(&p, &[0]).unwrap().bits(), &[1]);
    }

    #[test]
    fn inactive_group_stays_zero() {
        let p = two_groups([true, false]);
        let m = compose_mask(&p, &[0]).unwrap();
        assert_eq!(m.bits(), &[1, 0, 0, 0]);
        assert_eq!(m.retained(), 1);
    }

    #[test]
    fn choice_out_of_range() {
        let err = compose_mask(&two_groups([true, true]), &[0, 2]).unwrap_err();
        assert!(matches!(err, Error::ChoiceOutOfRange { group: 1, choice: 2, size: 2 }));
    }

    #[test]
    fn partition_rejects_overlap_and_gaps() {
        let overlap = GroupPartition::new(
            2,
            vec![
                Group { anchor_id: 0, members: vec![0, 1], active: true },
                Group { anchor_id: 1, members: vec![1], active: true },
            ],
        );
        assert!(matches!(overlap, Err(Error::InvalidPartition(_))));
        let gap = GroupPartition::new(
            3,
            vec![Group { anchor_id: 0, members: vec![0, 1], active: true }],
        );
        assert!(matches!(gap, Err(Error::InvalidPartition(_))));
        let none_active = GroupPartition::new(
            1,
            vec![Group { anchor_id: 0, members: vec![0], active: false }],
        );
        assert!(matches!(none_active, Err(Error::InvalidPartition(_))));
    }

    #[test]
    fn groups_are_canonically_ordered() {
        let p = GroupPartition::new(
            4,
            vec![
                Group { anchor_id: 7, members: vec![3, 1], active: true },
                Group { anchor_id: 2, members: vec![2, 0], active: true },
            ],
        )
        .unwrap();
        assert_eq!(p.groups()[0].members, vec![0, 2]);
        assert_eq!(p.groups()[1].members, vec![1, 3]);
    }

    #[test]
    fn apply_mask_cases() {
        let v = Array2::from_shape_fn((3, 2), |(r, c)| (r * 2 + c) as f32);
        let s = Sample::new("s", v.clone(), Array2::zeros((0, 2))).unwrap();
        let (all, idx) = apply_mask(&s, &Mask::ones(3)).unwrap();
        assert_eq!(all, v);
        assert_eq!(idx, vec![0, 1, 2]);
        let (none, idx) = apply_mask(&s, &Mask::zeros(3)).unwrap();
        assert_eq!(none.nrows(), 0);
        assert!(idx.is_empty());
        let (some, idx) = apply_mask(&s, &Mask::from_bits(vec![1, 0, 1]).unwrap()).unwrap();
        assert_eq!(idx, vec![0, 2]);
        assert_eq!(some.row(1), v.row(2));
        assert!(apply_mask(&s, &Mask::ones(2)).is_err());
    }

    #[test]
    fn mask_serializes_as_bit_list() {
        let m = Mask::from_bits(vec![0, 1, 1]).unwrap();
        assert_eq!(serde_json::to_string(&m).unwrap(), "[0,1,1]");
        assert!(serde_json::from_str::<Mask>("[0,2]").is_err());
    }

    fn arb_partition() -> impl Strategy<Value = (GroupPartition, Vec<usize>)> {
        (1usize..24, 1usize..6, any::<u64>()).prop_map(|(n, s, seed)| {
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); s.min(n)];
            for i in 0..n {
                let g = (crate::hash::splitmix64(seed ^ i as u64) as usize) % groups.len();
                groups[g].push(i);
            }
            let groups: Vec<Group> = groups
                .into_iter()
                .filter(|g| !g.is_empty())
                .enumerate()
                .map(|(j, members)| Group { anchor_id: j, members, active: j % 3 != 1 || j == 0 })
                .collect();
            let p = GroupPartition::new(n, groups).unwrap();
            let choices = p
                .active_groups()
                .enumerate()
                .map(|(j, g)| (crate::hash::splitmix64(seed.wrapping_add(j as u64)) as usize) % g.len())
                .collect();
            (p, choices)
        })
    }

    proptest! {
        #[test]
        fn compose_decompose_roundtrip((p, choices) in arb_partition()) {
            let m = compose_mask(&p, &choices).unwrap();
            prop_assert_eq!(decompose_mask(&p, &m).unwrap(), choices);
            prop_assert_eq!(m.retained(), p.active_count());
        }

        #[test]
        fn kept_indices_strictly_increase((p, choices) in arb_partition()) {
            let m = compose_mask(&p, &choices).unwrap();
            let kept = m.kept_indices();
            prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
